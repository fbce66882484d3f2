use rand::Rng;

use super::blocks;
use super::params::{Bound, LayerParams, ParamBuilder};
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub base_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            height: 32,
            width: 32,
            depth: 3,
            base_width: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::Config("U-Net depth and base width must be positive".into()));
        }
        let f = 1 << self.depth;
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Config(format!(
                "U-Net of depth {} needs extents divisible by {f}, got {}x{}",
                self.depth, self.height, self.width
            )));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Two 3x3 convolutions with ReLU at each resolution, max-pool down,
/// nearest-upsample + conv up, skip concatenation, 1x1 logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(UNet { config })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<LayerParams> {
        let cfg = &self.config;
        let mut b = ParamBuilder::new(rng);
        let mut c_in = 1;
        for l in 0..cfg.depth {
            let c = cfg.width_at(l);
            b.conv(&format!("unet.down{l}.a"), c, c_in, 3)?;
            b.conv(&format!("unet.down{l}.b"), c, c, 3)?;
            c_in = c;
        }
        let cb = cfg.width_at(cfg.depth);
        b.conv("unet.mid.a", cb, c_in, 3)?;
        b.conv("unet.mid.b", cb, cb, 3)?;
        for l in (0..cfg.depth).rev() {
            let c = cfg.width_at(l);
            b.conv(&format!("unet.up{l}.proj"), c, cfg.width_at(l + 1), 3)?;
            b.conv(&format!("unet.up{l}.a"), c, 2 * c, 3)?;
            b.conv(&format!("unet.up{l}.b"), c, c, 3)?;
        }
        b.conv("unet.head", 1, cfg.base_width, 1)?;
        Ok(b.finish())
    }

    fn double_conv<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let h = blocks::conv(p, &format!("{prefix}.a"), x, 1, 1)?.relu()?;
        blocks::conv(p, &format!("{prefix}.b"), h, 1, 1)?.relu()
    }

    /// `[1,H,W]` image to `[1,H,W]` mask logits.
    pub fn forward<'g>(&self, p: &Bound<'g, '_>, image: Var<'g>) -> Result<Var<'g>> {
        let cfg = &self.config;
        let s = image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(shape_err(format!("U-Net expects [1,H,W], got {s:?}")));
        }
        let f = 1 << cfg.depth;
        if s[1] % f != 0 || s[2] % f != 0 {
            return Err(shape_err(format!(
                "U-Net of depth {} needs extents divisible by {f}, got {}x{}",
                cfg.depth, s[1], s[2]
            )));
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = image;
        for l in 0..cfg.depth {
            h = Self::double_conv(p, &format!("unet.down{l}"), h)?;
            skips.push(h);
            h = h.maxpool2()?;
        }
        h = Self::double_conv(p, "unet.mid", h)?;
        for l in (0..cfg.depth).rev() {
            h = blocks::conv(p, &format!("unet.up{l}.proj"), h.upsample2()?, 1, 1)?.relu()?;
            h = skips[l].concat_channels(h)?;
            h = Self::double_conv(p, &format!("unet.up{l}"), h)?;
        }
        blocks::conv(p, "unet.head", h, 1, 0)
    }
}
