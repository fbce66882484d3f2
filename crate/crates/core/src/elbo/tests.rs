use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{finite_diff_check_params, NetConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_net() -> GenerativeNet {
    GenerativeNet::new(NetConfig {
        height: 8,
        width: 8,
        widths: vec![4, 4],
        latent_dim: 4,
    })
    .unwrap()
}

fn random_sample(h: usize, r: &mut ChaCha8Rng) -> SamplePair {
    let image = Tensor::from_fn(&[1, h, h], |_| r.random_range(0.0..1.0));
    let mask = Tensor::from_fn(&[1, h, h], |_| f64::from(r.random_bool(0.3)));
    SamplePair::new(image, mask).unwrap()
}

fn scramble(params: &LayerParams, seed: u64, scale: f64) -> LayerParams {
    let mut r = rng(seed);
    let mut out = params.clone();
    out.for_each_mut(|_, t| {
        for v in t.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    });
    out
}

fn hmc(steps: usize, eps: f64, include_initial_kinetic: bool) -> HmcConfig {
    let mut h = HmcConfig::new(4).with_steps(steps, eps);
    h.include_initial_kinetic = include_initial_kinetic;
    h
}

#[test]
fn gaussian_recon_examples() {
    let x = Tensor::from_fn(&[1, 3, 5], |i| i as f64 * 0.1);
    let v = gaussian_recon_loglik(&x, &x, 1.0).unwrap();
    assert!((v - (-7.5 * LN_2PI)).abs() < 1e-12);
    let one = gaussian_recon_loglik(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]), 1.0)
        .unwrap();
    assert!((one - (-0.5 * LN_2PI - 0.5)).abs() < 1e-14);
    // σ = 2, residual 2: −½ log(8π) − ½.
    let s2 = gaussian_recon_loglik(&Tensor::vector(vec![3.0]), &Tensor::vector(vec![1.0]), 2.0)
        .unwrap();
    assert!((s2 - (-0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5)).abs() < 1e-14);
    assert!(gaussian_recon_loglik(&x, &Tensor::zeros(&[1, 5, 3]), 1.0).is_err());
    assert!(gaussian_recon_loglik(&x, &x, 0.0).is_err());
}

#[test]
fn bernoulli_mask_examples() {
    let m = Tensor::from_fn(&[1, 2, 3], |i| (i % 2) as f64);
    let v = bernoulli_mask_loglik(&m, &Tensor::zeros(&[1, 2, 3])).unwrap();
    assert!((v - 6.0 * 0.5f64.ln()).abs() < 1e-14);
    let one = bernoulli_mask_loglik(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0])).unwrap();
    assert!((one + 2f64.ln()).abs() < 1e-15);
    let sure = bernoulli_mask_loglik(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![20.0])).unwrap();
    assert!(sure > -1e-8 && sure <= 0.0);
    let huge = bernoulli_mask_loglik(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![800.0])).unwrap();
    assert!((huge + 800.0).abs() < 1e-9);
    assert!(bernoulli_mask_loglik(&Tensor::vector(vec![0.5]), &Tensor::vector(vec![0.0])).is_err());
}

#[test]
fn kl_examples() {
    assert_eq!(kl_diag_gaussian(&Tensor::zeros(&[3]), &Tensor::zeros(&[3])).unwrap(), 0.0);
    assert!((kl_diag_gaussian(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0])).unwrap() - 0.5).abs() < 1e-15);
    let v = kl_diag_gaussian(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
    assert!((v - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-14);
    assert!((v - 0.35914).abs() < 1e-5);
}

#[test]
fn logdensity_examples_and_normalization() {
    let mode = gaussian_logdensity(&Tensor::vector(vec![0.7]), &Tensor::vector(vec![0.7]), &Tensor::vector(vec![0.0])).unwrap();
    assert!((mode + 0.918939).abs() < 1e-6);
    let lv = 0.8f64;
    let sd = (lv / 2.0).exp();
    let at_mode = gaussian_logdensity(&Tensor::vector(vec![0.2]), &Tensor::vector(vec![0.2]), &Tensor::vector(vec![lv])).unwrap();
    let off = gaussian_logdensity(&Tensor::vector(vec![0.2 + sd]), &Tensor::vector(vec![0.2]), &Tensor::vector(vec![lv])).unwrap();
    assert!((off - (at_mode - 0.5)).abs() < 1e-12);

    // Midpoint rule over ±12σ.
    let (mu, lv) = (0.3, 0.5f64);
    let sd = (lv / 2.0).exp();
    let n = 24_000;
    let h = 24.0 * sd / n as f64;
    let total: f64 = (0..n)
        .map(|i| {
            let z = mu - 12.0 * sd + (i as f64 + 0.5) * h;
            gaussian_logdensity(&Tensor::vector(vec![z]), &Tensor::vector(vec![mu]), &Tensor::vector(vec![lv]))
                .unwrap()
                .exp()
                * h
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn kl_matches_monte_carlo_difference_of_log_densities() {
    let mu = Tensor::vector(vec![0.4, -1.0]);
    let lv = Tensor::vector(vec![-0.3, 0.6]);
    let mut r = rng(8);
    let n = 40_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = Tensor::from_fn(&[2], |i| {
            mu.data()[i] + (lv.data()[i] / 2.0).exp() * r.sample::<f64, _>(StandardNormal)
        });
        acc += gaussian_logdensity(&z, &mu, &lv).unwrap()
            - gaussian_logdensity(&z, &Tensor::zeros(&[2]), &Tensor::zeros(&[2])).unwrap();
    }
    let kl = kl_diag_gaussian(&mu, &lv).unwrap();
    assert!((acc / n as f64 - kl).abs() < 0.02, "{} vs {kl}", acc / n as f64);
}

#[test]
fn vae_loss_with_exact_decoder_is_constant() {
    let g = Graph::new();
    let mut r = rng(1);
    let s = random_sample(4, &mut r);
    let image = g.constant(s.image.clone());
    let mask = g.constant(s.mask.clone());
    let decoded = DecoderOutput {
        image_mean: image,
        mask_logits: g.constant(Tensor::zeros(&[1, 4, 4])),
    };
    let enc = EncoderOutput {
        mu: g.constant(Tensor::zeros(&[3])),
        logvar: g.constant(Tensor::zeros(&[3])),
    };
    let cfg = LossConfig {
        mask_weight: 0.0,
        ..LossConfig::default()
    };
    let b = vae_terms(image, mask, decoded, enc, &cfg).unwrap().values().unwrap();
    assert!((b.total - 8.0 * LN_2PI).abs() < 1e-12);
    assert!((b.total - b.signed_sum()).abs() < 1e-10);
}

#[test]
fn vae_prior_minus_logq_is_negative_kl() {
    let g = Graph::new();
    let s = random_sample(4, &mut rng(2));
    let mu = Tensor::vector(vec![0.3, -0.7]);
    let lv = Tensor::vector(vec![0.2, -1.1]);
    let enc = EncoderOutput {
        mu: g.constant(mu.clone()),
        logvar: g.constant(lv.clone()),
    };
    let decoded = DecoderOutput {
        image_mean: g.constant(Tensor::full(&[1, 4, 4], 0.5)),
        mask_logits: g.constant(Tensor::full(&[1, 4, 4], -1.0)),
    };
    let cfg = LossConfig::default();
    let b = vae_terms(g.constant(s.image.clone()), g.constant(s.mask.clone()), decoded, enc, &cfg)
        .unwrap()
        .values()
        .unwrap();
    let kl = kl_diag_gaussian(&mu, &lv).unwrap();
    assert!((b.prior_logp - b.initial_logq + kl).abs() < 1e-12);
    let ri = gaussian_recon_loglik(&s.image, &Tensor::full(&[1, 4, 4], 0.5), 1.0).unwrap();
    let rm = bernoulli_mask_loglik(&s.mask, &Tensor::full(&[1, 4, 4], -1.0)).unwrap();
    assert!((b.total - (-(ri + rm - kl))).abs() < 1e-10);
    assert_eq!(b.kinetic, 0.0);
}

/// Independent composition of the `z0` bound from the value-level functions.
fn z0_bound(net: &GenerativeNet, params: &LayerParams, s: &SamplePair, draws: &SampleDraws) -> (f64, f64) {
    let g = Graph::new();
    let p = params.bind(&g);
    let enc = net.encode(&p, g.constant(s.stacked())).unwrap();
    let (mu, lv) = ((*enc.mu.value()).clone(), (*enc.logvar.value()).clone());
    let z0 = Tensor::from_fn(mu.shape(), |i| {
        mu.data()[i] + (lv.data()[i] / 2.0).exp() * draws.noise.data()[i]
    });
    let dec = net.decode(&p, g.constant(z0.clone())).unwrap();
    let ri = gaussian_recon_loglik(&s.image, &dec.image_mean.value(), 1.0).unwrap();
    let rm = bernoulli_mask_loglik(&s.mask, &dec.mask_logits.value()).unwrap();
    let d = z0.numel();
    let prior = gaussian_logdensity(&z0, &Tensor::zeros(&[d]), &Tensor::zeros(&[d])).unwrap();
    let logq = gaussian_logdensity(&z0, &mu, &lv).unwrap();
    let rho2: f64 = draws.momentum.data().iter().map(|v| v * v).sum();
    (-(ri + rm + prior - logq), 0.5 * rho2)
}

fn hvae_values(
    net: &GenerativeNet,
    params: &LayerParams,
    s: &SamplePair,
    cfg: &LossConfig,
    h: &HmcConfig,
    draws: &SampleDraws,
) -> ElboBreakdown {
    let g = Graph::new();
    let p = params.bind(&g);
    hvae_sample_terms(net, &p, s, cfg, h, draws, false)
        .unwrap()
        .values()
        .unwrap()
}

#[test]
fn hvae_without_steps_reduces_to_z0_bound() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(3)).unwrap(), 4, 0.3);
    let mut r = rng(5);
    let s = random_sample(8, &mut r);
    let draws = SampleDraws::sample(&Tensor::ones(&[4]), &mut r);
    let (oracle, half_rho2) = z0_bound(&net, &params, &s, &draws);
    let cfg = LossConfig::default();

    let on = hvae_values(&net, &params, &s, &cfg, &hmc(0, 0.05, true), &draws);
    assert!(on.kinetic.abs() < 1e-15);
    assert!((on.total - oracle).abs() < 1e-10, "{} vs {oracle}", on.total);
    assert!((on.total - on.signed_sum()).abs() < 1e-10);

    let off = hvae_values(&net, &params, &s, &cfg, &hmc(0, 0.05, false), &draws);
    assert!((off.kinetic - half_rho2).abs() < 1e-12);
    assert!((off.total - (oracle + half_rho2)).abs() < 1e-10);

    // The same bound through the VAE path uses the closed-form KL instead.
    let g = Graph::new();
    let p = params.bind(&g);
    let vae = vae_sample_terms(&net, &p, &s, &cfg, &draws).unwrap().values().unwrap();
    assert!((vae.recon_image - on.recon_image).abs() < 1e-10);
    assert!((vae.recon_mask - on.recon_mask).abs() < 1e-10);
}

#[test]
fn initial_density_variants() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(3)).unwrap(), 6, 0.3);
    let mut r = rng(7);
    let s = random_sample(8, &mut r);
    let draws = SampleDraws::sample(&Tensor::ones(&[4]), &mut r);
    let h = hmc(3, 0.1, true);
    let with = |d| {
        let cfg = LossConfig {
            initial_density: d,
            ..LossConfig::default()
        };
        hvae_values(&net, &params, &s, &cfg, &h, &draws)
    };
    let z0 = with(InitialDensity::EncoderAtZ0);
    let std = with(InitialDensity::StandardNormal);
    let zk = with(InitialDensity::EncoderAtZK);
    assert_eq!(z0.prior_logp, std.prior_logp);
    assert_eq!(z0.recon_image, zk.recon_image);
    assert_ne!(z0.initial_logq, std.initial_logq);
    assert_ne!(z0.initial_logq, zk.initial_logq);
    for b in [z0, std, zk] {
        assert!((b.total - b.signed_sum()).abs() < 1e-10);
    }
    for name in ["encoder_z0", "standard_normal", "encoder_zk"] {
        assert_eq!(InitialDensity::parse(name).unwrap().as_str(), name);
    }
    assert!(InitialDensity::parse("prior").is_err());
}

#[test]
fn metropolis_rejection_restores_start_state() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(3)).unwrap(), 9, 0.3);
    let mut r = rng(10);
    let s = random_sample(8, &mut r);
    let mut draws = SampleDraws::sample(&Tensor::ones(&[4]), &mut r);
    let cfg = LossConfig::default();
    let plain = hmc(3, 0.1, true);
    let mut mh = plain.clone();
    mh.mh_enabled = true;

    draws.accept_uniform = 0.0;
    let accepted = hvae_values(&net, &params, &s, &cfg, &mh, &draws);
    let free = hvae_values(&net, &params, &s, &cfg, &plain, &draws);
    assert!((accepted.total - free.total).abs() < 1e-12);

    draws.accept_uniform = 1.0;
    let rejected = hvae_values(&net, &params, &s, &cfg, &mh, &draws);
    let (oracle, _) = z0_bound(&net, &params, &s, &draws);
    assert!(rejected.kinetic.abs() < 1e-12);
    assert!((rejected.total - oracle).abs() < 1e-9);
}

#[test]
fn hvae_gradient_matches_finite_differences() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(11)).unwrap(), 12, 0.3);
    let mut r = rng(13);
    let s = random_sample(8, &mut r);
    let draws = SampleDraws::sample(&Tensor::ones(&[4]), &mut r);
    let cfg = LossConfig::default();
    let h = hmc(2, 0.05, true);
    let err = finite_diff_check_params(
        &params,
        |_, p| Ok(hvae_sample_terms(&net, p, &s, &cfg, &h, &draws, true)?.total),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn vae_gradient_matches_finite_differences() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(14)).unwrap(), 15, 0.3);
    let mut r = rng(16);
    let s = random_sample(8, &mut r);
    let draws = SampleDraws::sample(&Tensor::ones(&[4]), &mut r);
    let cfg = LossConfig::default();
    let err = finite_diff_check_params(
        &params,
        |_, p| Ok(vae_sample_terms(&net, p, &s, &cfg, &draws)?.total),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batch_losses_are_permutation_invariant() {
    let net = tiny_net();
    let params = scramble(&net.init_params(&mut rng(17)).unwrap(), 18, 0.3);
    let mut r = rng(19);
    let batch: Vec<SamplePair> = (0..5).map(|_| random_sample(8, &mut r)).collect();
    let draws = SampleDraws::for_batch(5, &Tensor::ones(&[4]), &mut r);
    let order = [3, 0, 4, 1, 2];
    let pb: Vec<SamplePair> = order.iter().map(|&i| batch[i].clone()).collect();
    let pd: Vec<SampleDraws> = order.iter().map(|&i| draws[i].clone()).collect();
    let cfg = LossConfig::default();
    for objective in [Objective::Vae, Objective::Hvae(hmc(2, 0.05, true))] {
        let a = batch_loss_with_draws(&net, &params, &batch, &objective, &cfg, &draws).unwrap();
        let b = batch_loss_with_draws(&net, &params, &pb, &objective, &cfg, &pd).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.kinetic - b.kinetic).abs() < 1e-12);
        assert!((a.total - a.signed_sum()).abs() < 1e-10);
    }
    assert!(batch_loss_with_draws(&net, &params, &[], &Objective::Vae, &cfg, &[]).is_err());
}

#[test]
fn losses_are_finite_at_default_init() {
    let net = GenerativeNet::new(NetConfig::default()).unwrap();
    let params = net.init_params(&mut rng(20)).unwrap();
    let mut r = rng(21);
    let batch = vec![random_sample(32, &mut r)];
    let cfg = LossConfig::default();
    let vae = vae_loss(&net, &params, &batch, &cfg, &mut r).unwrap();
    let hvae = hvae_loss_joint(&net, &params, &batch, &cfg, &HmcConfig::new(32), &mut r).unwrap();
    for b in [vae, hvae] {
        b.ensure_finite().unwrap();
        assert!((b.total - b.signed_sum()).abs() < 1e-10);
    }
}

#[test]
fn non_finite_breakdown_names_terms() {
    let b = ElboBreakdown {
        total: f64::NAN,
        ..ElboBreakdown::default()
    };
    let msg = b.ensure_finite().unwrap_err().to_string();
    assert!(msg.contains("recon_image=") && msg.contains("total=NaN"), "{msg}");
}

proptest! {
    #[test]
    fn recon_loglik_is_symmetric(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6), s in 0.1f64..3.0) {
        let x = Tensor::vector(a);
        let y = Tensor::vector(b);
        prop_assert_eq!(gaussian_recon_loglik(&x, &y, s).unwrap(), gaussian_recon_loglik(&y, &x, s).unwrap());
    }

    #[test]
    fn bernoulli_matches_naive_form(l in prop::collection::vec(-15.0f64..15.0, 5), bits in prop::collection::vec(any::<bool>(), 5)) {
        let m: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
        let naive: f64 = l.iter().zip(&m).map(|(&l, &m)| {
            let p = 1.0 / (1.0 + (-l).exp());
            m * p.ln() + (1.0 - m) * (1.0 - p).ln()
        }).sum();
        let v = bernoulli_mask_loglik(&Tensor::vector(m), &Tensor::vector(l)).unwrap();
        prop_assert!((v - naive).abs() < 1e-6 * (1.0 + naive.abs()));
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 4), lv in prop::collection::vec(-3.0f64..3.0, 4)) {
        prop_assert!(kl_diag_gaussian(&Tensor::vector(mu), &Tensor::vector(lv)).unwrap() >= 0.0);
    }
}
