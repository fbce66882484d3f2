//! Encoder `q_φ(z | x, m)` and decoder `p_θ(x, m | z)` over two-channel
//! image+mask inputs.

use rand::Rng;

use super::blocks::{self, LEAKY_SLOPE};
use super::params::{Bound, LayerParams, ParamBuilder};
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    /// Channel width per resolution level, finest first. Each level halves
    /// the spatial extent; the bottleneck sits below the last level.
    pub widths: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            height: 32,
            width: 32,
            widths: vec![16, 32, 64],
            latent_dim: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a non-empty list of positive ints".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let f = 1 << self.widths.len();
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by {f} for {} levels",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << self.levels();
        (self.height / f, self.width / f)
    }

    fn deepest(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = self.bottleneck_hw();
        self.deepest() * h * w
    }
}

/// Mean and log-variance of the diagonal Gaussian `q_φ(z | x, m)`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    pub mu: Var<'g>,
    pub logvar: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput<'g> {
    /// `[1,H,W]`, unconstrained; clamp to [0,1] for display.
    pub image_mean: Var<'g>,
    /// `[1,H,W]` Bernoulli logits of the mask.
    pub mask_logits: Var<'g>,
}

/// Residual encoder/decoder with self-attention at the deepest level and the
/// bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeNet {
    config: NetConfig,
}

impl GenerativeNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(GenerativeNet { config })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<LayerParams> {
        let cfg = &self.config;
        let levels = cfg.levels();
        let deep = cfg.deepest();
        let mut b = ParamBuilder::new(rng);

        b.conv("enc.stem", cfg.widths[0], 2, 3)?;
        for (i, &c) in cfg.widths.iter().enumerate() {
            blocks::init_residual(&mut b, &format!("enc.l{i}.res"), c)?;
            if i == levels - 1 {
                blocks::init_attention(&mut b, &format!("enc.l{i}.attn"), c)?;
            }
            let next = cfg.widths.get(i + 1).copied().unwrap_or(deep);
            b.conv(&format!("enc.l{i}.down"), next, c, 4)?;
        }
        blocks::init_residual(&mut b, "enc.mid.res", deep)?;
        blocks::init_attention(&mut b, "enc.mid.attn", deep)?;
        b.linear("enc.mu", cfg.latent_dim, cfg.flat_dim())?;
        b.linear("enc.logvar", cfg.latent_dim, cfg.flat_dim())?;

        b.linear("dec.in", cfg.flat_dim(), cfg.latent_dim)?;
        blocks::init_residual(&mut b, "dec.mid.res", deep)?;
        blocks::init_attention(&mut b, "dec.mid.attn", deep)?;
        for i in (0..levels).rev() {
            let c = cfg.widths[i];
            let prev = cfg.widths.get(i + 1).copied().unwrap_or(deep);
            b.conv(&format!("dec.l{i}.up"), c, prev, 3)?;
            blocks::init_residual(&mut b, &format!("dec.l{i}.res"), c)?;
            if i == levels - 1 {
                blocks::init_attention(&mut b, &format!("dec.l{i}.attn"), c)?;
            }
        }
        b.conv("dec.image", 1, cfg.widths[0], 3)?;
        b.conv("dec.mask", 1, cfg.widths[0], 3)?;
        Ok(b.finish())
    }

    /// `x_and_m` is `[2,H,W]`: image channel then mask channel. On a strict
    /// record the mask channel must be exactly binary.
    pub fn encode<'g>(&self, p: &Bound<'g, '_>, x_and_m: Var<'g>) -> Result<EncoderOutput<'g>> {
        let cfg = &self.config;
        let shape = x_and_m.shape();
        if shape != [2, cfg.height, cfg.width] {
            return Err(shape_err(format!(
                "encoder expects [2,{},{}], got {shape:?}",
                cfg.height, cfg.width
            )));
        }
        if x_and_m.graph().is_strict() {
            let v = x_and_m.value();
            let plane = cfg.height * cfg.width;
            if v.data()[plane..].iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Data("mask channel is not binary".into()));
            }
        }
        let levels = cfg.levels();
        let mut h = blocks::conv(p, "enc.stem", x_and_m, 1, 1)?.leaky_relu(LEAKY_SLOPE)?;
        for i in 0..levels {
            h = blocks::residual_block(p, &format!("enc.l{i}.res"), h)?;
            if i == levels - 1 {
                h = blocks::self_attention(p, &format!("enc.l{i}.attn"), h)?;
            }
            h = blocks::conv(p, &format!("enc.l{i}.down"), h, 2, 1)?.leaky_relu(LEAKY_SLOPE)?;
        }
        h = blocks::residual_block(p, "enc.mid.res", h)?;
        h = blocks::self_attention(p, "enc.mid.attn", h)?;
        let flat = h.reshape(&[cfg.flat_dim()])?;
        Ok(EncoderOutput {
            mu: blocks::linear(p, "enc.mu", flat)?,
            logvar: blocks::linear(p, "enc.logvar", flat)?,
        })
    }

    pub fn decode<'g>(&self, p: &Bound<'g, '_>, z: Var<'g>) -> Result<DecoderOutput<'g>> {
        let cfg = &self.config;
        if z.shape() != [cfg.latent_dim] {
            return Err(shape_err(format!(
                "decoder expects a latent of shape [{}], got {:?}",
                cfg.latent_dim,
                z.shape()
            )));
        }
        let (bh, bw) = cfg.bottleneck_hw();
        let levels = cfg.levels();
        let mut h = blocks::linear(p, "dec.in", z)?
            .reshape(&[cfg.deepest(), bh, bw])?
            .leaky_relu(LEAKY_SLOPE)?;
        h = blocks::residual_block(p, "dec.mid.res", h)?;
        h = blocks::self_attention(p, "dec.mid.attn", h)?;
        for i in (0..levels).rev() {
            h = h.upsample2()?;
            h = blocks::conv(p, &format!("dec.l{i}.up"), h, 1, 1)?.leaky_relu(LEAKY_SLOPE)?;
            h = blocks::residual_block(p, &format!("dec.l{i}.res"), h)?;
            if i == levels - 1 {
                h = blocks::self_attention(p, &format!("dec.l{i}.attn"), h)?;
            }
        }
        Ok(DecoderOutput {
            image_mean: blocks::conv(p, "dec.image", h, 1, 1)?,
            mask_logits: blocks::conv(p, "dec.mask", h, 1, 1)?,
        })
    }
}

/// `z0 = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<'g>(mu: Var<'g>, logvar: Var<'g>, noise: Var<'g>) -> Result<Var<'g>> {
    if mu.shape() != logvar.shape() || mu.shape() != noise.shape() {
        return Err(shape_err(format!(
            "reparameterize needs equal shapes, got {:?}, {:?}, {:?}",
            mu.shape(),
            logvar.shape(),
            noise.shape()
        )));
    }
    mu.add(logvar.mul_scalar(0.5)?.exp()?.mul(noise)?)
}
