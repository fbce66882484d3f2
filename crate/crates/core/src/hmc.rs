//! Hamiltonian dynamics over the latent space: the energy
//! `H(z, ρ) = U(z) + ½ ρᵀ M⁻¹ ρ`, leapfrog integration, momentum draws and
//! Metropolis-Hastings acceptance.
//!
//! Integration runs on a [`Graph`], so the flow `z0 → zK` can be
//! differentiated end to end when `create_graph` is set.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HmcConfig {
    /// Leapfrog steps per trajectory (`K`).
    pub steps: usize,
    pub step_size: f64,
    /// Diagonal of the mass matrix `M`.
    pub mass_diag: Tensor,
    pub mh_enabled: bool,
    /// Adds `½ ρ0ᵀ M⁻¹ ρ0` back into the bound (see [`crate::elbo`]).
    pub include_initial_kinetic: bool,
}

impl HmcConfig {
    /// Defaults used for training: `K = 5`, `eps = 0.05`, identity mass.
    pub fn new(latent_dim: usize) -> Self {
        HmcConfig {
            steps: 5,
            step_size: 0.05,
            mass_diag: Tensor::ones(&[latent_dim]),
            mh_enabled: false,
            include_initial_kinetic: true,
        }
    }

    pub fn with_steps(mut self, steps: usize, step_size: f64) -> Self {
        self.steps = steps;
        self.step_size = step_size;
        self
    }

    pub fn dim(&self) -> usize {
        self.mass_diag.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "hmc step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.mass_diag.rank() != 1
            || self
                .mass_diag
                .data()
                .iter()
                .any(|&m| !(m > 0.0 && m.is_finite()))
        {
            return Err(Error::Config("mass diagonal must be a vector of positive values".into()));
        }
        Ok(())
    }
}

/// Energy `U(z) = -log p(x, m, z)` up to a constant, evaluated on the
/// record that `z` belongs to.
pub trait Potential<'g> {
    fn energy(&self, z: Var<'g>) -> Result<Var<'g>>;
}

impl<'g, F> Potential<'g> for F
where
    F: Fn(Var<'g>) -> Result<Var<'g>>,
{
    fn energy(&self, z: Var<'g>) -> Result<Var<'g>> {
        self(z)
    }
}

/// `U(z) = ½ Σ z_i²`, the standard normal target.
#[derive(Clone, Copy, Debug, Default)]
pub struct StandardNormalPotential;

impl<'g> Potential<'g> for StandardNormalPotential {
    fn energy(&self, z: Var<'g>) -> Result<Var<'g>> {
        z.square()?.sum()?.mul_scalar(0.5)
    }
}

/// Position and momentum values.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub z: Tensor,
    pub rho: Tensor,
}

impl PhaseState {
    pub fn new(z: Tensor, rho: Tensor) -> Result<Self> {
        if z.shape() != rho.shape() {
            return Err(Error::Shape(format!(
                "position {:?} and momentum {:?} differ in shape",
                z.shape(),
                rho.shape()
            )));
        }
        Ok(PhaseState { z, rho })
    }
}

/// Position and momentum on a computation record.
#[derive(Clone, Copy, Debug)]
pub struct PhaseVars<'g> {
    pub z: Var<'g>,
    pub rho: Var<'g>,
}

/// `½ Σ ρ_i² / m_i`.
pub fn kinetic_energy<'g>(rho: Var<'g>, mass_diag: &Tensor) -> Result<Var<'g>> {
    let inv = rho.graph().constant(mass_diag.map(|m| 1.0 / m));
    rho.square()?.mul(inv)?.sum()?.mul_scalar(0.5)
}

/// `H(z, ρ) = U(z) + ½ ρᵀ M⁻¹ ρ`.
pub fn hamiltonian<P>(state: &PhaseState, potential: &P, mass_diag: &Tensor) -> Result<f64>
where
    P: for<'g> Potential<'g>,
{
    let g = Graph::new();
    let u = potential.energy(g.constant(state.z.clone()))?.item()?;
    if !u.is_finite() {
        return Err(Error::NonFinite(format!("potential energy is {u}")));
    }
    let k = kinetic_energy(g.constant(state.rho.clone()), mass_diag)?.item()?;
    Ok(u + k)
}

/// `ρ_i = sqrt(m_i) n_i` with `n_i` i.i.d. standard normal.
pub fn sample_momentum<R: Rng + ?Sized>(mass_diag: &Tensor, rng: &mut R) -> Tensor {
    let m = mass_diag.data();
    Tensor::from_fn(mass_diag.shape(), |i| m[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
}

/// `U(z)` and `∇z U(z)`. With `create_graph` the gradient stays differentiable.
pub fn potential_and_grad<'g, P>(
    potential: &P,
    z: Var<'g>,
    create_graph: bool,
) -> Result<(Var<'g>, Var<'g>)>
where
    P: Potential<'g> + ?Sized,
{
    let u = potential.energy(z)?;
    let grad = if z.requires_grad() {
        z.graph().grad(u, &[z], create_graph)?[0]
    } else {
        // Constant position: differentiate through a fresh parameter copy.
        return Err(Error::Graph(
            "position must participate in differentiation; create it with Graph::param".into(),
        ));
    };
    if !grad.value().all_finite() {
        return Err(Error::NonFinite("potential gradient".into()));
    }
    Ok((u, grad))
}

fn half_kick<'g>(rho: Var<'g>, grad: Var<'g>, eps: f64) -> Result<Var<'g>> {
    rho.sub(grad.mul_scalar(0.5 * eps)?)
}

fn drift<'g>(z: Var<'g>, rho: Var<'g>, eps: f64, mass_diag: &Tensor) -> Result<Var<'g>> {
    let inv = z.graph().constant(mass_diag.map(|m| eps / m));
    z.add(rho.mul(inv)?)
}

/// One Störmer–Verlet step:
/// `ρ½ = ρ − ε/2 ∇U(z)`, `z' = z + ε M⁻¹ ρ½`, `ρ' = ρ½ − ε/2 ∇U(z')`.
pub fn leapfrog_step<'g, P>(
    state: PhaseVars<'g>,
    potential: &P,
    step_size: f64,
    mass_diag: &Tensor,
    create_graph: bool,
) -> Result<PhaseVars<'g>>
where
    P: Potential<'g> + ?Sized,
{
    let (_, grad) = potential_and_grad(potential, state.z, create_graph)?;
    let rho_half = half_kick(state.rho, grad, step_size)?;
    let z = drift(state.z, rho_half, step_size, mass_diag)?;
    let (_, grad) = potential_and_grad(potential, z, create_graph)?;
    let rho = half_kick(rho_half, grad, step_size)?;
    Ok(PhaseVars { z, rho })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub z: Tensor,
    pub rho: Tensor,
    pub energy: f64,
}

pub struct Evolution<'g> {
    pub end: PhaseVars<'g>,
    /// States `0..=K` with their total energy, when requested.
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

/// `K` composed leapfrog steps from `(z0, ρ0)`. The gradient at each
/// intermediate position is shared by the two half-kicks around it.
pub fn evolve<'g, P>(
    start: PhaseVars<'g>,
    potential: &P,
    config: &HmcConfig,
    create_graph: bool,
    keep_trajectory: bool,
) -> Result<Evolution<'g>>
where
    P: Potential<'g> + ?Sized,
{
    config.validate()?;
    let eps = config.step_size;
    let mass = &config.mass_diag;
    let mut trajectory = keep_trajectory.then(Vec::new);
    let mut state = start;
    if config.steps == 0 && trajectory.is_none() {
        return Ok(Evolution {
            end: state,
            trajectory,
        });
    }
    let at_step = |k: usize, e: Error| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("leapfrog step {k}: {msg}")),
        other => other,
    };
    let (mut u, mut grad) =
        potential_and_grad(potential, state.z, create_graph).map_err(|e| at_step(0, e))?;
    let mut record = |k: usize, s: &PhaseVars<'g>, u: Var<'g>| -> Result<()> {
        if let Some(t) = trajectory.as_mut() {
            let kin = kinetic_energy(s.rho, mass)?.item()?;
            t.push(TrajectoryPoint {
                step: k,
                z: (*s.z.value()).clone(),
                rho: (*s.rho.value()).clone(),
                energy: u.item()? + kin,
            });
        }
        Ok(())
    };
    record(0, &state, u)?;
    for k in 1..=config.steps {
        let rho_half = half_kick(state.rho, grad, eps)?;
        let z = drift(state.z, rho_half, eps, mass)?;
        (u, grad) = potential_and_grad(potential, z, create_graph).map_err(|e| at_step(k, e))?;
        let rho = half_kick(rho_half, grad, eps)?;
        state = PhaseVars { z, rho };
        if !state.z.value().all_finite() || !state.rho.value().all_finite() {
            return Err(Error::NonFinite(format!("leapfrog step {k}: state diverged")));
        }
        record(k, &state, u)?;
    }
    Ok(Evolution {
        end: state,
        trajectory,
    })
}

/// Value-level [`evolve`] without differentiation.
pub fn evolve_values<P>(
    start: &PhaseState,
    potential: &P,
    config: &HmcConfig,
    keep_trajectory: bool,
) -> Result<(PhaseState, Option<Vec<TrajectoryPoint>>)>
where
    P: for<'g> Potential<'g>,
{
    let g = Graph::new();
    let vars = PhaseVars {
        z: g.param(start.z.clone()),
        rho: g.constant(start.rho.clone()),
    };
    let ev = evolve(vars, potential, config, false, keep_trajectory)?;
    let end = PhaseState {
        z: (*ev.end.z.value()).clone(),
        rho: (*ev.end.rho.value()).clone(),
    };
    Ok((end, ev.trajectory))
}

/// Accept iff `u < min(1, exp(h_old − h_new))`.
pub fn metropolis_accept(h_old: f64, h_new: f64, u: f64) -> bool {
    u < (h_old - h_new).exp().min(1.0)
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    pub samples: Vec<Tensor>,
    pub acceptance_rate: f64,
}

/// Plain HMC: momentum refresh, `K` leapfrog steps, Metropolis-Hastings
/// correction. Returns the chain position after each of `n_samples` transitions.
pub fn hmc_chain<P, R>(
    potential: &P,
    initial: &Tensor,
    config: &HmcConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<ChainResult>
where
    P: for<'g> Potential<'g>,
    R: Rng + ?Sized,
{
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("hmc chain needs at least one sample".into()));
    }
    if initial.shape() != config.mass_diag.shape() {
        return Err(Error::Shape(format!(
            "initial position {:?} does not match mass diagonal {:?}",
            initial.shape(),
            config.mass_diag.shape()
        )));
    }
    let mut current = initial.clone();
    let mut samples = Vec::with_capacity(n_samples);
    let mut accepted = 0usize;
    for _ in 0..n_samples {
        let rho = sample_momentum(&config.mass_diag, rng);
        let start = PhaseState::new(current.clone(), rho)?;
        let h_old = hamiltonian(&start, potential, &config.mass_diag)?;
        let (end, _) = evolve_values(&start, potential, config, false)?;
        let h_new = hamiltonian(&end, potential, &config.mass_diag)?;
        let u: f64 = rng.random();
        if metropolis_accept(h_old, h_new, u) {
            current = end.z;
            accepted += 1;
        }
        samples.push(current.clone());
    }
    Ok(ChainResult {
        samples,
        acceptance_rate: accepted as f64 / n_samples as f64,
    })
}

/// Writes `step,coordinate_index,z,rho,H`, one row per coordinate per step.
pub fn write_trajectory_csv<W: Write>(out: W, trajectory: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("trajectory csv: {e}"));
    w.write_record(["step", "coordinate_index", "z", "rho", "H"])
        .map_err(csv_err)?;
    for p in trajectory {
        for (i, (z, rho)) in p.z.data().iter().zip(p.rho.data()).enumerate() {
            w.write_record([
                p.step.to_string(),
                i.to_string(),
                format!("{z:e}"),
                format!("{rho:e}"),
                format!("{:e}", p.energy),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Data(format!("trajectory csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check_many;

    fn config(steps: usize, eps: f64, d: usize) -> HmcConfig {
        HmcConfig::new(d).with_steps(steps, eps)
    }

    /// A non-quadratic potential for flow-level checks.
    struct Anharmonic;

    impl<'g> Potential<'g> for Anharmonic {
        fn energy(&self, z: Var<'g>) -> Result<Var<'g>> {
            let quartic = z.square()?.square()?.sum()?.mul_scalar(0.25)?;
            let wobble = z.mul_scalar(1.3)?.tanh()?.sum()?;
            quartic.add(wobble)?.add(z.square()?.sum()?.mul_scalar(0.5)?)
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let u = StandardNormalPotential;
        let origin = PhaseState::new(Tensor::zeros(&[2]), Tensor::zeros(&[2])).unwrap();
        assert_eq!(hamiltonian(&origin, &u, &Tensor::ones(&[2])).unwrap(), 0.0);
        let s = PhaseState::new(Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0])).unwrap();
        assert_eq!(hamiltonian(&s, &u, &Tensor::ones(&[1])).unwrap(), 2.5);
        assert_eq!(hamiltonian(&s, &u, &Tensor::vector(vec![4.0])).unwrap(), 1.0);
    }

    #[test]
    fn momentum_draws_are_seeded_and_scaled() {
        let m = Tensor::ones(&[3]);
        let a = sample_momentum(&m, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_momentum(&m, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let draws: Vec<Tensor> = (0..n).map(|_| sample_momentum(&m, &mut rng)).collect();
        for i in 0..3 {
            let mean = draws.iter().map(|t| t.data()[i]).sum::<f64>() / n as f64;
            let var = draws
                .iter()
                .map(|t| (t.data()[i] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            assert!((0.9..=1.1).contains(&var), "{var}");
        }

        let heavy = Tensor::vector(vec![4.0]);
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_momentum(&heavy, &mut rng).data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((1.9..=2.1).contains(&sd), "{sd}");
    }

    #[test]
    fn leapfrog_on_quadratic_matches_hand_values() {
        let g = Graph::new();
        let s = PhaseVars {
            z: g.param(Tensor::vector(vec![1.0])),
            rho: g.constant(Tensor::vector(vec![0.0])),
        };
        let out = leapfrog_step(s, &StandardNormalPotential, 0.1, &Tensor::ones(&[1]), false)
            .unwrap();
        // ρ½ = −0.05, z' = 0.995, ρ' = −0.05 − 0.05·0.995
        assert!((out.z.item().unwrap() - 0.995).abs() < 1e-15);
        assert!((out.rho.item().unwrap() - (-0.09975)).abs() < 1e-15);
    }

    #[test]
    fn leapfrog_free_particle_and_zero_step() {
        fn flat(z: Var<'_>) -> Result<Var<'_>> {
            z.mul_scalar(0.0)?.sum()?.add_scalar(3.0)
        }
        let g = Graph::new();
        let m = Tensor::vector(vec![2.0, 0.5]);
        let s = PhaseVars {
            z: g.param(Tensor::vector(vec![0.1, -0.2])),
            rho: g.constant(Tensor::vector(vec![1.0, 2.0])),
        };
        let out = leapfrog_step(s, &flat, 0.3, &m, false).unwrap();
        assert_eq!(out.rho.value().data(), &[1.0, 2.0]);
        let z = out.z.value();
        assert!((z.data()[0] - (0.1 + 0.3 * 1.0 / 2.0)).abs() < 1e-15);
        assert!((z.data()[1] - (-0.2 + 0.3 * 2.0 / 0.5)).abs() < 1e-15);

        let same = leapfrog_step(s, &Anharmonic, 0.0, &m, false).unwrap();
        assert_eq!(same.z.value(), s.z.value());
        assert_eq!(same.rho.value(), s.rho.value());
    }

    #[test]
    fn evolve_zero_steps_and_composition() {
        let start = PhaseState::new(
            Tensor::vector(vec![0.4, -1.2]),
            Tensor::vector(vec![0.3, 0.9]),
        )
        .unwrap();
        let (end, _) = evolve_values(&start, &Anharmonic, &config(0, 0.1, 2), false).unwrap();
        assert_eq!(end, start);

        let (two, _) = evolve_values(&start, &Anharmonic, &config(2, 0.1, 2), false).unwrap();
        let g = Graph::new();
        let mut s = PhaseVars {
            z: g.param(start.z.clone()),
            rho: g.constant(start.rho.clone()),
        };
        for _ in 0..2 {
            s = leapfrog_step(s, &Anharmonic, 0.1, &Tensor::ones(&[2]), false).unwrap();
        }
        for (a, b) in two.z.data().iter().zip(s.z.value().data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in two.rho.data().iter().zip(s.rho.value().data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn evolve_is_time_reversible() {
        let cfg = config(20, 0.1, 3);
        let start = PhaseState::new(
            Tensor::vector(vec![0.5, -0.3, 1.1]),
            Tensor::vector(vec![-0.7, 0.2, 0.4]),
        )
        .unwrap();
        let (end, _) = evolve_values(&start, &Anharmonic, &cfg, false).unwrap();
        let flipped = PhaseState::new(end.z, end.rho.map(|v| -v)).unwrap();
        let (back, _) = evolve_values(&flipped, &Anharmonic, &cfg, false).unwrap();
        for (a, b) in back.z.data().iter().zip(start.z.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in back.rho.data().iter().zip(start.rho.data()) {
            assert!((-a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn metropolis_examples() {
        assert!(metropolis_accept(3.0, 1.0, 0.999_999));
        let ln2 = 2f64.ln();
        assert!(metropolis_accept(0.0, ln2, 0.4));
        assert!(!metropolis_accept(0.0, ln2, 0.6));
        assert!(metropolis_accept(1.5, 1.5, 0.999));
    }

    #[test]
    fn chain_with_one_sample_and_no_steps_keeps_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::vector(vec![0.25, -0.5]);
        let res = hmc_chain(&StandardNormalPotential, &z0, &config(0, 0.1, 2), 1, &mut rng)
            .unwrap();
        assert_eq!(res.samples, vec![z0]);
        assert_eq!(res.acceptance_rate, 1.0);
        assert!(hmc_chain(&StandardNormalPotential, &Tensor::zeros(&[2]), &config(1, 0.1, 2), 0, &mut rng).is_err());
    }

    #[test]
    fn evolve_reports_non_finite_step() {
        fn explode(z: Var<'_>) -> Result<Var<'_>> {
            z.square()?.square()?.sum()?.mul_scalar(1000.0)
        }
        let g = Graph::with_strict(false);
        let s = PhaseVars {
            z: g.param(Tensor::vector(vec![1.0])),
            rho: g.constant(Tensor::vector(vec![0.0])),
        };
        let err = match evolve(s, &explode, &config(10, 0.5, 1), false, false) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected divergence"),
        };
        assert!(err.contains("leapfrog step"), "{err}");
    }

    struct Weighted<'g> {
        theta: Var<'g>,
    }

    impl<'g> Potential<'g> for Weighted<'g> {
        fn energy(&self, z: Var<'g>) -> Result<Var<'g>> {
            let quad = z.square()?.mul(self.theta)?.sum()?.mul_scalar(0.5)?;
            quad.add(z.tanh()?.sum()?)
        }
    }

    #[test]
    fn flow_is_differentiable_in_start_and_potential_parameters() {
        // U_θ(z) = ½ Σ θ_i z_i² + Σ tanh(z); f = Σ zK² + Σ ρK.
        let cfg = config(4, 0.15, 3);
        let err = finite_diff_check_many(
            |g, v| {
                let (z0, rho0, theta) = (v[0], v[1], v[2]);
                let _ = g;
                let u = Weighted { theta };
                let ev = evolve(PhaseVars { z: z0, rho: rho0 }, &u, &cfg, true, false)?;
                ev.end.z.square()?.sum()?.add(ev.end.rho.sum()?)
            },
            &[
                Tensor::vector(vec![0.3, -0.8, 1.2]),
                Tensor::vector(vec![0.5, 0.1, -0.4]),
                Tensor::vector(vec![1.5, 0.7, 2.0]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn trajectory_csv_layout() {
        let start = PhaseState::new(Tensor::vector(vec![1.0, 0.0]), Tensor::zeros(&[2])).unwrap();
        let (_, traj) =
            evolve_values(&start, &StandardNormalPotential, &config(3, 0.1, 2), true).unwrap();
        let traj = traj.unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj[0].energy, 0.5);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,coordinate_index,z,rho,H");
        assert_eq!(lines.len(), 1 + 4 * 2);
        assert!(lines[1].starts_with("0,0,"));
    }

    fn max_drift(eps: f64, total_time: f64) -> f64 {
        let steps = (total_time / eps).round() as usize;
        let start = PhaseState::new(
            Tensor::vector(vec![1.0, -0.5]),
            Tensor::vector(vec![0.3, 0.8]),
        )
        .unwrap();
        let (_, traj) = evolve_values(
            &start,
            &StandardNormalPotential,
            &config(steps, eps, 2),
            true,
        )
        .unwrap();
        let traj = traj.unwrap();
        let h0 = traj[0].energy;
        traj.iter().map(|p| (p.energy - h0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn energy_error_is_second_order() {
        for eps in [0.2, 0.1, 0.05] {
            let ratio = max_drift(eps, 2.0) / max_drift(eps / 2.0, 2.0);
            assert!((3.0..=6.0).contains(&ratio), "eps {eps}: ratio {ratio}");
        }
    }

    fn step_map(x: &[f64], eps: f64) -> Vec<f64> {
        let d = x.len() / 2;
        let start = PhaseState::new(
            Tensor::vector(x[..d].to_vec()),
            Tensor::vector(x[d..].to_vec()),
        )
        .unwrap();
        let mut cfg = config(1, eps, d);
        cfg.mass_diag = Tensor::from_fn(&[d], |i| 0.5 + i as f64);
        let (end, _) = evolve_values(&start, &Anharmonic, &cfg, false).unwrap();
        end.z.data().iter().chain(end.rho.data()).copied().collect()
    }

    fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    #[test]
    fn leapfrog_preserves_phase_volume() {
        for (d, x) in [
            (1, vec![0.7, -0.4]),
            (2, vec![0.2, -1.1, 0.5, 0.9]),
            (3, vec![1.3, 0.1, -0.6, -0.2, 0.4, 1.0]),
        ] {
            let h = 1e-6;
            let n = 2 * d;
            let mut jac = vec![vec![0.0; n]; n];
            for j in 0..n {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[j] += h;
                dn[j] -= h;
                let (fu, fd) = (step_map(&up, 0.3), step_map(&dn, 0.3));
                for i in 0..n {
                    jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
                }
            }
            let det = determinant(jac);
            assert!((det - 1.0).abs() < 1e-6, "d={d}: det {det}");
        }
    }

    #[test]
    fn chain_targets_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = config(10, 0.1, 2);
        let res = hmc_chain(&StandardNormalPotential, &Tensor::zeros(&[2]), &cfg, 5000, &mut rng)
            .unwrap();
        assert!(res.acceptance_rate > 0.9, "{}", res.acceptance_rate);
        let kept = &res.samples[1000..];
        let n = kept.len() as f64;
        for i in 0..2 {
            let mean = kept.iter().map(|t| t.data()[i]).sum::<f64>() / n;
            let var = kept.iter().map(|t| (t.data()[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((var - 1.0).abs() < 0.15, "var {var}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(config(5, 0.0, 2).validate().is_err());
        assert!(config(5, f64::NAN, 2).validate().is_err());
        let mut bad = config(5, 0.1, 2);
        bad.mass_diag = Tensor::vector(vec![1.0, -1.0]);
        assert!(bad.validate().is_err());
        assert!(HmcConfig::new(4).validate().is_ok());
    }
}
