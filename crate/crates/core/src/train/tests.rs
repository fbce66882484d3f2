use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::KeyValues;
use crate::data::{generate_phantom, PhantomConfig};
use crate::elbo::gaussian_recon_loglik;
use crate::metrics::mse;

fn phantoms(n: usize, extent: usize) -> Vec<SamplePair> {
    let cfg = PhantomConfig::with_extent(extent, extent);
    (0..n as u64).map(|i| generate_phantom(&cfg, i).unwrap()).collect()
}

fn tiny(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        epochs: 3,
        batch_size: 2,
        learning_rate: 3e-3,
        height: 16,
        width: 16,
        widths: vec![4, 8],
        latent_dim: 4,
        hmc_steps: 2,
        ..TrainConfig::default()
    }
}

fn tiny_seg() -> SegConfig {
    SegConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 3e-3,
        height: 16,
        width: 16,
        depth: 2,
        base_width: 4,
        seed: 5,
    }
}

#[test]
fn config_validation() {
    let mut c = tiny(ModelKind::Vae);
    c.epochs = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny(ModelKind::Hvae);
    c.hmc_mass = vec![1.0, 2.0];
    assert!(c.validate().is_err());
    c.hmc_mass = vec![1.0, 2.0, 1.0, 0.5];
    c.validate().unwrap();
    assert_eq!(c.hmc_config().mass_diag.data(), &[1.0, 2.0, 1.0, 0.5]);
    let mut c = tiny(ModelKind::Vae);
    c.learning_rate = 0.0;
    assert!(c.validate().is_err());
    let mut s = tiny_seg();
    s.epochs = 0;
    assert!(matches!(s.validate(), Err(Error::Config(_))));
}

#[test]
fn config_key_values_round_trip() {
    let mut c = tiny(ModelKind::Hvae);
    c.initial_density = crate::elbo::InitialDensity::StandardNormal;
    c.mh_enabled = true;
    let kv = c.to_key_values();
    assert_eq!(kv.keys().count(), TRAIN_KEYS.len());
    assert_eq!(TrainConfig::from_key_values(&kv).unwrap(), c);
    let text = "model_kind=vae\nepochs=7\nwidths=8,16\nhmc.mass=2\n";
    let parsed = TrainConfig::from_key_values(&KeyValues::parse(text).unwrap()).unwrap();
    assert_eq!((parsed.model_kind, parsed.epochs), (ModelKind::Vae, 7));
    assert_eq!(parsed.widths, vec![8, 16]);
    assert!(TrainConfig::from_key_values(&KeyValues::parse("epoch=3").unwrap()).is_err());
    assert!(TrainConfig::from_key_values(&KeyValues::parse("model_kind=gan").unwrap()).is_err());
    let s = tiny_seg();
    assert_eq!(SegConfig::from_key_values(&s.to_key_values()).unwrap(), s);
}

#[test]
fn recon_mse_inverts_the_gaussian_term() {
    let x = Tensor::from_fn(&[1, 16, 16], |i| (i as f64 * 0.37).sin().abs());
    let y = Tensor::from_fn(&[1, 16, 16], |i| (i as f64 * 0.11).cos().abs());
    for sigma in [1.0, 0.3] {
        let c = TrainConfig {
            sigma_x: sigma,
            ..tiny(ModelKind::Vae)
        };
        let ll = gaussian_recon_loglik(&x, &y, sigma).unwrap();
        assert!((c.recon_mse(ll) - mse(&x, &y).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn mean_gradients_do_not_depend_on_threads() {
    let data = phantoms(5, 16);
    let cfg = tiny_seg();
    let net = crate::nn::UNet::new(cfg.unet_config()).unwrap();
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let compute = || {
        mean_gradients(&params, data.len(), |i, g, p| {
            let logits = net.forward(p, g.constant(data[i].image.clone()))?;
            Ok((segmenter::pixel_bce(logits, g.constant(data[i].mask.clone()))?, ()))
        })
        .unwrap()
        .0
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(compute);
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(compute);
    assert_eq!(one, three);
    // Against a single record holding the whole batch mean.
    let g = Graph::new();
    let p = params.bind(&g);
    let mut total = g.scalar(0.0);
    for s in &data {
        let l = segmenter::pixel_bce(net.forward(&p, g.constant(s.image.clone())).unwrap(), g.constant(s.mask.clone())).unwrap();
        total = total.add(l).unwrap();
    }
    let total = total.mul_scalar(1.0 / data.len() as f64).unwrap();
    let grads = g.backward(total).unwrap();
    for (v, got) in p.vars().iter().zip(&one) {
        for (a, b) in grads.wrt(v).data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_decreases_over_100_steps_on_four_phantoms() {
    let data = phantoms(4, 16);
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Vae, ModelKind::Hvae] {
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 4,
            ..tiny(kind)
        };
        let run = train_generative(&data, &cfg, &dir.path().join(kind.as_str())).unwrap();
        let first = run.history[0].loss.total;
        let tail: f64 = run.history[90..].iter().map(|r| r.loss.total).sum::<f64>() / 10.0;
        assert!(tail < first, "{kind:?}: {first} -> {tail}");
        assert!(run.history[99].recon_mse < run.history[0].recon_mse);
    }
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let data = phantoms(5, 16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny(ModelKind::Hvae)
    };
    let a = train_generative(&data, &cfg, &dir.path().join("a")).unwrap();
    let b = train_generative(&data, &cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    for f in ["loss.csv", "model.ckpt", "epoch-0002.ckpt"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(read_loss_csv(&dir.path().join("a/loss.csv")).unwrap(), a.history);
    let loaded = GenerativeModel::load(&a.checkpoint).unwrap();
    assert!(loaded.params.bit_equal(&a.model.params));
    assert_eq!(loaded.config, cfg);
    let s1 = loaded.sample(3, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let s2 = a.model.sample(3, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn resume_continues_bit_exactly() {
    let data = phantoms(5, 16);
    let dir = tempfile::tempdir().unwrap();
    let full_cfg = TrainConfig {
        epochs: 4,
        checkpoint_every: 2,
        ..tiny(ModelKind::Hvae)
    };
    let full = train_generative(&data, &full_cfg, &dir.path().join("full")).unwrap();
    let ckpt = Checkpoint::read(&dir.path().join("full/epoch-0002.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 2);
    let half_dir = dir.path().join("half");
    train_generative(&data, &TrainConfig { epochs: 2, ..full_cfg.clone() }, &half_dir).unwrap();
    let resumed = resume_generative(&data, &full_cfg, &ckpt, &half_dir).unwrap();
    assert!(resumed.model.params.bit_equal(&full.model.params));
    assert_eq!(resumed.history, full.history);
    let other = TrainConfig {
        learning_rate: 0.5,
        ..full_cfg.clone()
    };
    assert!(matches!(resume_generative(&data, &other, &ckpt, &half_dir), Err(Error::Config(_))));
}

#[test]
fn training_rejects_bad_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::Vae);
    assert!(matches!(train_generative(&[], &cfg, dir.path()), Err(Error::Data(_))));
    assert!(matches!(train_generative(&phantoms(2, 32), &cfg, dir.path()), Err(Error::Data(_))));
}

#[test]
fn non_finite_loss_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..tiny(ModelKind::Vae)
    };
    let err = train_generative(&phantoms(4, 16), &cfg, dir.path()).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("epoch") && m.contains("batch")), "{err}");
}

#[test]
fn model_loading_checks_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_generative(&phantoms(2, 16), &TrainConfig { epochs: 1, ..tiny(ModelKind::Vae) }, dir.path()).unwrap();
    let mut ckpt = Checkpoint::read(&run.checkpoint).unwrap();
    ckpt.config.set("latent_dim", 5);
    ckpt.config.set("hmc.mass", 1);
    assert!(matches!(GenerativeModel::from_checkpoint(&ckpt), Err(Error::Checkpoint(_))));
    assert!(matches!(Segmenter::from_checkpoint(&Checkpoint::read(&run.checkpoint).unwrap()), Err(Error::Checkpoint(_))));
}

#[test]
fn segmenter_learns_and_is_reproducible() {
    let real = phantoms(8, 16);
    let held = phantoms(12, 16)[8..].to_vec();
    let cfg = SegConfig {
        epochs: 30,
        ..tiny_seg()
    };
    let dir = tempfile::tempdir().unwrap();
    let a = train_segmenter(&real, &[], &held, &cfg, Some(dir.path())).unwrap();
    let b = train_segmenter(&real, &[], &held, &cfg, None).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.history[29].loss < a.history[0].loss);
    assert!(a.history.iter().all(|e| (0.0..=1.0).contains(&e.dsc)));
    let text = fs::read_to_string(dir.path().join("dsc.csv")).unwrap();
    assert!(text.starts_with("epoch,loss,dsc\n"));
    assert_eq!(text.lines().count(), 31);
    assert_eq!(read_dsc_csv(&dir.path().join("dsc.csv")).unwrap(), a.history);
    let loaded = Segmenter::load(&dir.path().join(MODEL_FILE)).unwrap();
    assert_eq!(loaded.mean_dice(&held).unwrap(), a.final_dsc());
    let with_synth = train_segmenter(&real, &held, &held, &cfg, None).unwrap();
    assert_ne!(with_synth.history, a.history);
}

#[test]
fn segmenter_needs_real_data() {
    let held = phantoms(2, 16);
    let err = train_segmenter(&[], &held, &held, &tiny_seg(), None).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(train_segmenter(&held, &[], &[], &tiny_seg(), None).is_err());
}
