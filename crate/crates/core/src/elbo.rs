//! Training objectives: Gaussian image likelihood, Bernoulli mask
//! likelihood, the diagonal-Gaussian KL of the VAE baseline and the
//! Hamiltonian bound over the joint `(x, m)`.
//!
//! Every objective is a negated lower bound, so lower is better. Each
//! sample contributes one Monte-Carlo draw; batches are averaged in index
//! order.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::hmc::{self, HmcConfig, PhaseVars, Potential};
use crate::nn::{reparameterize, Bound, DecoderOutput, EncoderOutput, GenerativeNet, LayerParams};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `Σ −½ log(2π σ²) − (x − x_mean)² / (2σ²)`.
pub fn gaussian_recon_loglik_var<'g>(x: Var<'g>, x_mean: Var<'g>, sigma_x: f64) -> Result<Var<'g>> {
    same_shape(&x, &x_mean, "image likelihood")?;
    if !(sigma_x > 0.0 && sigma_x.is_finite()) {
        return Err(Error::Config(format!("sigma_x must be positive, got {sigma_x}")));
    }
    let d = x.value().numel() as f64;
    let constant = -d * (HALF_LN_2PI + sigma_x.ln());
    x.sub(x_mean)?
        .square()?
        .sum()?
        .mul_scalar(-0.5 / (sigma_x * sigma_x))?
        .add_scalar(constant)
}

/// `Σ m log σ(l) + (1 − m) log(1 − σ(l))`, evaluated as `m·l − softplus(l)`.
pub fn bernoulli_mask_loglik_var<'g>(m: Var<'g>, logits: Var<'g>) -> Result<Var<'g>> {
    same_shape(&m, &logits, "mask likelihood")?;
    if m.value().data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("mask likelihood needs a binary mask".into()));
    }
    m.mul(logits)?.sub(logits.softplus()?)?.sum()
}

/// `KL(N(mu, exp(logvar)) ‖ N(0, I)) = ½ Σ mu² + exp(logvar) − 1 − logvar`.
pub fn kl_diag_gaussian_var<'g>(mu: Var<'g>, logvar: Var<'g>) -> Result<Var<'g>> {
    same_shape(&mu, &logvar, "kl")?;
    mu.square()?
        .add(logvar.exp()?)?
        .sub(logvar)?
        .add_scalar(-1.0)?
        .sum()?
        .mul_scalar(0.5)
}

/// `log N(z; mu, diag(exp(logvar)))`.
pub fn gaussian_logdensity_var<'g>(z: Var<'g>, mu: Var<'g>, logvar: Var<'g>) -> Result<Var<'g>> {
    same_shape(&z, &mu, "log-density")?;
    same_shape(&z, &logvar, "log-density")?;
    let d = z.value().numel() as f64;
    let quad = z.sub(mu)?.square()?.mul(logvar.neg()?.exp()?)?;
    quad.add(logvar)?
        .sum()?
        .mul_scalar(-0.5)?
        .add_scalar(-d * HALF_LN_2PI)
}

/// `log N(z; 0, I)`.
pub fn standard_normal_logdensity_var(z: Var<'_>) -> Result<Var<'_>> {
    let d = z.value().numel() as f64;
    z.square()?.sum()?.mul_scalar(-0.5)?.add_scalar(-d * HALF_LN_2PI)
}

fn eval<F>(f: F) -> Result<f64>
where
    F: for<'g> FnOnce(&'g Graph) -> Result<Var<'g>>,
{
    let g = Graph::new();
    f(&g)?.item()
}

pub fn gaussian_recon_loglik(x: &Tensor, x_mean: &Tensor, sigma_x: f64) -> Result<f64> {
    eval(|g| gaussian_recon_loglik_var(g.constant(x.clone()), g.constant(x_mean.clone()), sigma_x))
}

pub fn bernoulli_mask_loglik(m: &Tensor, logits: &Tensor) -> Result<f64> {
    eval(|g| bernoulli_mask_loglik_var(g.constant(m.clone()), g.constant(logits.clone())))
}

pub fn kl_diag_gaussian(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    eval(|g| kl_diag_gaussian_var(g.constant(mu.clone()), g.constant(logvar.clone())))
}

pub fn gaussian_logdensity(z: &Tensor, mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    eval(|g| {
        gaussian_logdensity_var(
            g.constant(z.clone()),
            g.constant(mu.clone()),
            g.constant(logvar.clone()),
        )
    })
}

/// Density used for the `log q` term of the Hamiltonian bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitialDensity {
    /// Encoder density evaluated at the draw `z0`.
    #[default]
    EncoderAtZ0,
    /// `N(0, I)` evaluated at `z0`.
    StandardNormal,
    /// Encoder density evaluated at the flow output `zK`.
    EncoderAtZK,
}

impl InitialDensity {
    pub fn as_str(self) -> &'static str {
        match self {
            InitialDensity::EncoderAtZ0 => "encoder_z0",
            InitialDensity::StandardNormal => "standard_normal",
            InitialDensity::EncoderAtZK => "encoder_zk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder_z0" => Ok(InitialDensity::EncoderAtZ0),
            "standard_normal" => Ok(InitialDensity::StandardNormal),
            "encoder_zk" => Ok(InitialDensity::EncoderAtZK),
            other => Err(Error::Config(format!(
                "initial density must be encoder_z0, standard_normal or encoder_zk, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub sigma_x: f64,
    /// Weight `λ_m` of the mask log-likelihood.
    pub mask_weight: f64,
    pub initial_density: InitialDensity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma_x: 1.0,
            mask_weight: 1.0,
            initial_density: InitialDensity::EncoderAtZ0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_x.is_finite()) {
            return Err(Error::Config(format!("sigma_x must be positive, got {}", self.sigma_x)));
        }
        if !(self.mask_weight >= 0.0 && self.mask_weight.is_finite()) {
            return Err(Error::Config(format!(
                "mask weight must be non-negative, got {}",
                self.mask_weight
            )));
        }
        Ok(())
    }
}

/// Per-sample bound terms on a computation record.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms<'g> {
    pub recon_image: Var<'g>,
    /// Already multiplied by `λ_m`.
    pub recon_mask: Var<'g>,
    pub kinetic: Var<'g>,
    pub initial_logq: Var<'g>,
    pub prior_logp: Var<'g>,
    /// `−(recon_image + recon_mask + prior_logp − kinetic − initial_logq)`.
    pub total: Var<'g>,
}

impl<'g> ElboTerms<'g> {
    pub fn compose(
        recon_image: Var<'g>,
        recon_mask: Var<'g>,
        kinetic: Var<'g>,
        initial_logq: Var<'g>,
        prior_logp: Var<'g>,
    ) -> Result<Self> {
        let total = recon_image
            .add(recon_mask)?
            .add(prior_logp)?
            .sub(kinetic)?
            .sub(initial_logq)?
            .neg()?;
        Ok(ElboTerms {
            recon_image,
            recon_mask,
            kinetic,
            initial_logq,
            prior_logp,
            total,
        })
    }

    pub fn values(&self) -> Result<ElboBreakdown> {
        let b = ElboBreakdown {
            recon_image: self.recon_image.item()?,
            recon_mask: self.recon_mask.item()?,
            kinetic: self.kinetic.item()?,
            initial_logq: self.initial_logq.item()?,
            prior_logp: self.prior_logp.item()?,
            total: self.total.item()?,
        };
        b.ensure_finite()?;
        Ok(b)
    }
}

/// Bound terms as numbers (per sample, or batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    pub recon_image: f64,
    pub recon_mask: f64,
    pub kinetic: f64,
    pub initial_logq: f64,
    pub prior_logp: f64,
    pub total: f64,
}

impl ElboBreakdown {
    /// The total recomputed from the components.
    pub fn signed_sum(&self) -> f64 {
        -(self.recon_image + self.recon_mask + self.prior_logp - self.kinetic - self.initial_logq)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let parts = [
            self.recon_image,
            self.recon_mask,
            self.kinetic,
            self.initial_logq,
            self.prior_logp,
            self.total,
        ];
        if parts.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        Err(Error::NonFinite(format!(
            "loss terms recon_image={} recon_mask={} kinetic={} initial_logq={} prior_logp={} total={}",
            self.recon_image,
            self.recon_mask,
            self.kinetic,
            self.initial_logq,
            self.prior_logp,
            self.total
        )))
    }

    /// Componentwise mean, summed in slice order.
    pub fn mean(items: &[ElboBreakdown]) -> Result<ElboBreakdown> {
        if items.is_empty() {
            return Err(Error::Data("cannot average an empty batch".into()));
        }
        let n = items.len() as f64;
        let mut acc = ElboBreakdown::default();
        for b in items {
            acc.recon_image += b.recon_image;
            acc.recon_mask += b.recon_mask;
            acc.kinetic += b.kinetic;
            acc.initial_logq += b.initial_logq;
            acc.prior_logp += b.prior_logp;
            acc.total += b.total;
        }
        Ok(ElboBreakdown {
            recon_image: acc.recon_image / n,
            recon_mask: acc.recon_mask / n,
            kinetic: acc.kinetic / n,
            initial_logq: acc.initial_logq / n,
            prior_logp: acc.prior_logp / n,
            total: acc.total / n,
        })
    }

    /// Components in reporting order: total, recon_image, recon_mask,
    /// kinetic, initial_logq, prior_logp.
    pub fn fields(&self) -> [f64; 6] {
        [
            self.total,
            self.recon_image,
            self.recon_mask,
            self.kinetic,
            self.initial_logq,
            self.prior_logp,
        ]
    }

    pub fn from_fields(f: [f64; 6]) -> Self {
        ElboBreakdown {
            total: f[0],
            recon_image: f[1],
            recon_mask: f[2],
            kinetic: f[3],
            initial_logq: f[4],
            prior_logp: f[5],
        }
    }
}

/// Random inputs of one sample's Monte-Carlo estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraws {
    /// Reparameterization noise `ε` for `z0 = mu + σ ε`.
    pub noise: Tensor,
    /// Initial momentum `ρ0 ~ N(0, M)`.
    pub momentum: Tensor,
    /// Uniform for the Metropolis-Hastings test.
    pub accept_uniform: f64,
}

impl SampleDraws {
    pub fn sample<R: Rng + ?Sized>(mass_diag: &Tensor, rng: &mut R) -> Self {
        let d = mass_diag.numel();
        let noise = Tensor::from_fn(&[d], |_| rng.sample(StandardNormal));
        let momentum = hmc::sample_momentum(mass_diag, rng);
        SampleDraws {
            noise,
            momentum,
            accept_uniform: rng.random(),
        }
    }

    /// One independent stream per sample, seeded from `rng` in batch order,
    /// so results do not depend on how samples are scheduled.
    pub fn for_batch<R: Rng + ?Sized>(n: usize, mass_diag: &Tensor, rng: &mut R) -> Vec<Self> {
        let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        seeds
            .into_iter()
            .map(|s| SampleDraws::sample(mass_diag, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect()
    }
}

/// VAE terms from already computed encoder and decoder outputs.
/// `prior_logp − initial_logq` is the closed-form `−KL`.
pub fn vae_terms<'g>(
    image: Var<'g>,
    mask: Var<'g>,
    decoded: DecoderOutput<'g>,
    enc: EncoderOutput<'g>,
    cfg: &LossConfig,
) -> Result<ElboTerms<'g>> {
    let g = image.graph();
    let recon_image = gaussian_recon_loglik_var(image, decoded.image_mean, cfg.sigma_x)?;
    let recon_mask = bernoulli_mask_loglik_var(mask, decoded.mask_logits)?.mul_scalar(cfg.mask_weight)?;
    // E_q log q = Σ −½ log 2π − ½ logvar − ½, so E_q log p − E_q log q = −KL.
    let d = enc.mu.value().numel() as f64;
    let initial_logq = enc
        .logvar
        .sum()?
        .mul_scalar(-0.5)?
        .add_scalar(-d * (HALF_LN_2PI + 0.5))?;
    let prior_logp = initial_logq.sub(kl_diag_gaussian_var(enc.mu, enc.logvar)?)?;
    ElboTerms::compose(recon_image, recon_mask, g.scalar(0.0), initial_logq, prior_logp)
}

fn sample_vars<'g>(g: &'g Graph, sample: &SamplePair) -> (Var<'g>, Var<'g>, Var<'g>) {
    (
        g.constant(sample.stacked()),
        g.constant(sample.image.clone()),
        g.constant(sample.mask.clone()),
    )
}

/// Single-sample negated VAE bound.
pub fn vae_sample_terms<'g>(
    net: &GenerativeNet,
    p: &Bound<'g, '_>,
    sample: &SamplePair,
    cfg: &LossConfig,
    draws: &SampleDraws,
) -> Result<ElboTerms<'g>> {
    let g = p.vars().first().map(|v| v.graph()).ok_or_else(|| {
        Error::Config("model has no parameters".into())
    })?;
    let (xm, image, mask) = sample_vars(g, sample);
    let enc = net.encode(p, xm)?;
    let z = reparameterize(enc.mu, enc.logvar, g.constant(draws.noise.clone()))?;
    let decoded = net.decode(p, z)?;
    vae_terms(image, mask, decoded, enc, cfg)
}

/// `U(z) = −[log p(x|z) + λ_m log p(m|z) + log N(z; 0, I)]`. Keeps the
/// terms of the most recent evaluation so the bound can reuse them at `zK`.
struct JointPotential<'a, 'g, 'p> {
    net: &'a GenerativeNet,
    params: &'a Bound<'g, 'p>,
    image: Var<'g>,
    mask: Var<'g>,
    cfg: &'a LossConfig,
    last: RefCell<Option<(usize, [Var<'g>; 3])>>,
}

impl<'g> JointPotential<'_, 'g, '_> {
    fn terms(&self, z: Var<'g>) -> Result<[Var<'g>; 3]> {
        if let Some((id, t)) = *self.last.borrow() {
            if id == z.id() {
                return Ok(t);
            }
        }
        let dec = self.net.decode(self.params, z)?;
        let ri = gaussian_recon_loglik_var(self.image, dec.image_mean, self.cfg.sigma_x)?;
        let rm = bernoulli_mask_loglik_var(self.mask, dec.mask_logits)?
            .mul_scalar(self.cfg.mask_weight)?;
        let prior = standard_normal_logdensity_var(z)?;
        let t = [ri, rm, prior];
        *self.last.borrow_mut() = Some((z.id(), t));
        Ok(t)
    }
}

impl<'g> Potential<'g> for JointPotential<'_, 'g, '_> {
    fn energy(&self, z: Var<'g>) -> Result<Var<'g>> {
        let [ri, rm, prior] = self.terms(z)?;
        ri.add(rm)?.add(prior)?.neg()
    }
}

/// Single-sample negated Hamiltonian bound over the joint `(x, m)`:
/// `−[log p(x, m | zK) + log p(zK) − ½ρKᵀM⁻¹ρK − log q(z0) (+ ½ρ0ᵀM⁻¹ρ0)]`.
///
/// With `create_graph` the result is differentiable in every parameter
/// through the whole flow. When Metropolis-Hastings is enabled a rejected
/// proposal takes the value of the start state while keeping the gradient
/// of the proposal (straight-through).
pub fn hvae_sample_terms<'g>(
    net: &GenerativeNet,
    p: &Bound<'g, '_>,
    sample: &SamplePair,
    cfg: &LossConfig,
    hmc_cfg: &HmcConfig,
    draws: &SampleDraws,
    create_graph: bool,
) -> Result<ElboTerms<'g>> {
    let g = p.vars().first().map(|v| v.graph()).ok_or_else(|| {
        Error::Config("model has no parameters".into())
    })?;
    if hmc_cfg.dim() != net.config().latent_dim {
        return Err(Error::Config(format!(
            "mass diagonal has {} entries, latent dimension is {}",
            hmc_cfg.dim(),
            net.config().latent_dim
        )));
    }
    let (xm, image, mask) = sample_vars(g, sample);
    let enc = net.encode(p, xm)?;
    let z0 = reparameterize(enc.mu, enc.logvar, g.constant(draws.noise.clone()))?;
    let rho0 = g.constant(draws.momentum.clone());
    let potential = JointPotential {
        net,
        params: p,
        image,
        mask,
        cfg,
        last: RefCell::new(None),
    };
    let ev = hmc::evolve(
        PhaseVars { z: z0, rho: rho0 },
        &potential,
        hmc_cfg,
        create_graph,
        hmc_cfg.mh_enabled,
    )?;
    let mut end = ev.end;
    if let Some(traj) = &ev.trajectory {
        let h_old = traj.first().map(|t| t.energy).unwrap_or(0.0);
        let h_new = traj.last().map(|t| t.energy).unwrap_or(0.0);
        if !hmc::metropolis_accept(h_old, h_new, draws.accept_uniform) {
            let shift = |to: &Var<'g>, from: &Var<'g>| -> Result<Var<'g>> {
                let delta = Tensor::new(
                    to.shape(),
                    to.value()
                        .data()
                        .iter()
                        .zip(from.value().data())
                        .map(|(a, b)| a - b)
                        .collect(),
                )?;
                from.add(g.constant(delta))
            };
            end = PhaseVars {
                z: shift(&z0, &end.z)?,
                rho: shift(&rho0, &end.rho)?,
            };
        }
    }
    let [recon_image, recon_mask, prior_logp] = potential.terms(end.z)?;
    let mut kinetic = hmc::kinetic_energy(end.rho, &hmc_cfg.mass_diag)?;
    if hmc_cfg.include_initial_kinetic {
        kinetic = kinetic.sub(hmc::kinetic_energy(rho0, &hmc_cfg.mass_diag)?)?;
    }
    let initial_logq = match cfg.initial_density {
        InitialDensity::EncoderAtZ0 => gaussian_logdensity_var(z0, enc.mu, enc.logvar)?,
        InitialDensity::StandardNormal => standard_normal_logdensity_var(z0)?,
        InitialDensity::EncoderAtZK => gaussian_logdensity_var(end.z, enc.mu, enc.logvar)?,
    };
    ElboTerms::compose(recon_image, recon_mask, kinetic, initial_logq, prior_logp)
}

/// Which bound a model is trained with.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Vae,
    Hvae(HmcConfig),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Vae => "vae",
            Objective::Hvae(_) => "hvae",
        }
    }

    /// Momentum mass used when drawing per-sample randomness.
    pub fn mass_diag(&self, latent_dim: usize) -> Tensor {
        match self {
            Objective::Vae => Tensor::ones(&[latent_dim]),
            Objective::Hvae(h) => h.mass_diag.clone(),
        }
    }

    pub fn sample_terms<'g>(
        &self,
        net: &GenerativeNet,
        p: &Bound<'g, '_>,
        sample: &SamplePair,
        cfg: &LossConfig,
        draws: &SampleDraws,
        create_graph: bool,
    ) -> Result<ElboTerms<'g>> {
        match self {
            Objective::Vae => vae_sample_terms(net, p, sample, cfg, draws),
            Objective::Hvae(h) => hvae_sample_terms(net, p, sample, cfg, h, draws, create_graph),
        }
    }
}

/// Batch-mean breakdown with explicit per-sample draws.
pub fn batch_loss_with_draws(
    net: &GenerativeNet,
    params: &LayerParams,
    batch: &[SamplePair],
    objective: &Objective,
    cfg: &LossConfig,
    draws: &[SampleDraws],
) -> Result<ElboBreakdown> {
    cfg.validate()?;
    if let Objective::Hvae(h) = objective {
        h.validate()?;
    }
    if batch.is_empty() {
        return Err(Error::Data("loss needs a non-empty batch".into()));
    }
    if draws.len() != batch.len() {
        return Err(Error::Config(format!(
            "{} draws for a batch of {}",
            draws.len(),
            batch.len()
        )));
    }
    let per_sample = batch
        .iter()
        .zip(draws)
        .map(|(s, d)| {
            let g = Graph::new();
            let p = params.bind(&g);
            objective.sample_terms(net, &p, s, cfg, d, false)?.values()
        })
        .collect::<Result<Vec<_>>>()?;
    ElboBreakdown::mean(&per_sample)
}

/// Negated VAE bound, batch mean, fresh reparameterization noise from `rng`.
pub fn vae_loss<R: Rng + ?Sized>(
    net: &GenerativeNet,
    params: &LayerParams,
    batch: &[SamplePair],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    let d = net.config().latent_dim;
    let draws = SampleDraws::for_batch(batch.len(), &Tensor::ones(&[d]), rng);
    batch_loss_with_draws(net, params, batch, &Objective::Vae, cfg, &draws)
}

/// Negated Hamiltonian bound, batch mean.
pub fn hvae_loss_joint<R: Rng + ?Sized>(
    net: &GenerativeNet,
    params: &LayerParams,
    batch: &[SamplePair],
    cfg: &LossConfig,
    hmc_cfg: &HmcConfig,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    let draws = SampleDraws::for_batch(batch.len(), &hmc_cfg.mass_diag, rng);
    let objective = Objective::Hvae(hmc_cfg.clone());
    batch_loss_with_draws(net, params, batch, &objective, cfg, &draws)
}

#[cfg(test)]
mod tests;
