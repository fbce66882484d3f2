use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, ModelKind, RngState};
use super::{at_step, check_extent, mean_gradients, MODEL_FILE};
use crate::config::{join_list, KeyValues};
use crate::data::SamplePair;
use crate::elbo::{ElboBreakdown, InitialDensity, LossConfig, Objective, SampleDraws};
use crate::error::{Error, Result};
use crate::hmc::HmcConfig;
use crate::metrics::sample_pairs;
use crate::nn::{GenerativeNet, LayerParams, NetConfig};
use crate::tensor::Tensor;

pub const TRAIN_KEYS: [&str; 18] = [
    "model_kind",
    "epochs",
    "batch_size",
    "learning_rate",
    "height",
    "width",
    "widths",
    "latent_dim",
    "hmc.steps",
    "hmc.step_size",
    "hmc.mass",
    "hmc.mh_enabled",
    "hmc.include_initial_kinetic",
    "seed",
    "checkpoint_every",
    "mask_weight",
    "sigma_x",
    "initial_density",
];

pub const LOSS_HEADER: [&str; 8] = [
    "epoch",
    "total",
    "recon_image",
    "recon_mask",
    "kinetic",
    "initial_logq",
    "prior_logp",
    "recon_mse",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub hmc_steps: usize,
    pub hmc_step_size: f64,
    /// One value (shared by every coordinate) or one per latent coordinate.
    pub hmc_mass: Vec<f64>,
    pub mh_enabled: bool,
    pub include_initial_kinetic: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub mask_weight: f64,
    pub sigma_x: f64,
    pub initial_density: InitialDensity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let hmc = HmcConfig::new(net.latent_dim);
        let loss = LossConfig::default();
        TrainConfig {
            model_kind: ModelKind::Hvae,
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            height: net.height,
            width: net.width,
            widths: net.widths,
            latent_dim: net.latent_dim,
            hmc_steps: hmc.steps,
            hmc_step_size: hmc.step_size,
            hmc_mass: vec![1.0],
            mh_enabled: hmc.mh_enabled,
            include_initial_kinetic: hmc.include_initial_kinetic,
            seed: 0,
            checkpoint_every: 0,
            mask_weight: loss.mask_weight,
            sigma_x: loss.sigma_x,
            initial_density: loss.initial_density,
        }
    }
}

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    /// Overrides fields named in `kv`; unknown keys are an error.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&TRAIN_KEYS)?;
        if let Some(k) = kv.get("model_kind") {
            self.model_kind = ModelKind::parse(k)?;
        }
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("learning_rate", &mut self.learning_rate)?;
        kv.update("height", &mut self.height)?;
        kv.update("width", &mut self.width)?;
        if let Some(w) = kv.list("widths")? {
            self.widths = w;
        }
        kv.update("latent_dim", &mut self.latent_dim)?;
        kv.update("hmc.steps", &mut self.hmc_steps)?;
        kv.update("hmc.step_size", &mut self.hmc_step_size)?;
        if let Some(m) = kv.list("hmc.mass")? {
            self.hmc_mass = m;
        }
        kv.update("hmc.mh_enabled", &mut self.mh_enabled)?;
        kv.update("hmc.include_initial_kinetic", &mut self.include_initial_kinetic)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("checkpoint_every", &mut self.checkpoint_every)?;
        kv.update("mask_weight", &mut self.mask_weight)?;
        kv.update("sigma_x", &mut self.sigma_x)?;
        if let Some(d) = kv.get("initial_density") {
            self.initial_density = InitialDensity::parse(d)?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model_kind", self.model_kind.as_str());
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", self.learning_rate);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("widths", join_list(&self.widths));
        kv.set("latent_dim", self.latent_dim);
        kv.set("hmc.steps", self.hmc_steps);
        kv.set("hmc.step_size", self.hmc_step_size);
        kv.set("hmc.mass", join_list(&self.hmc_mass));
        kv.set("hmc.mh_enabled", self.mh_enabled);
        kv.set("hmc.include_initial_kinetic", self.include_initial_kinetic);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("mask_weight", self.mask_weight);
        kv.set("sigma_x", self.sigma_x);
        kv.set("initial_density", self.initial_density.as_str());
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_kind == ModelKind::UNet {
            return Err(Error::Config("generative model_kind must be vae or hvae".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.hmc_mass.len() != 1 && self.hmc_mass.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "hmc.mass needs 1 or {} values, got {}",
                self.latent_dim,
                self.hmc_mass.len()
            )));
        }
        self.net_config().validate()?;
        self.loss_config().validate()?;
        self.hmc_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            height: self.height,
            width: self.width,
            widths: self.widths.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            sigma_x: self.sigma_x,
            mask_weight: self.mask_weight,
            initial_density: self.initial_density,
        }
    }

    pub fn hmc_config(&self) -> HmcConfig {
        let mass = if self.hmc_mass.len() == 1 {
            Tensor::full(&[self.latent_dim], self.hmc_mass[0])
        } else {
            Tensor::vector(self.hmc_mass.clone())
        };
        HmcConfig {
            steps: self.hmc_steps,
            step_size: self.hmc_step_size,
            mass_diag: mass,
            mh_enabled: self.mh_enabled,
            include_initial_kinetic: self.include_initial_kinetic,
        }
    }

    pub fn objective(&self) -> Objective {
        match self.model_kind {
            ModelKind::Hvae => Objective::Hvae(self.hmc_config()),
            _ => Objective::Vae,
        }
    }

    /// Mean squared image error implied by a per-sample `recon_image` value.
    pub fn recon_mse(&self, recon_image: f64) -> f64 {
        let d = (self.height * self.width) as f64;
        let s2 = self.sigma_x * self.sigma_x;
        let norm = d * (0.5 * (2.0 * std::f64::consts::PI * s2).ln());
        (-recon_image - norm) * 2.0 * s2 / d
    }
}

/// A trained encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub config: TrainConfig,
    pub net: GenerativeNet,
    pub params: LayerParams,
}

impl GenerativeModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind == ModelKind::UNet {
            return Err(Error::Checkpoint("checkpoint holds a segmenter, not a generative model".into()));
        }
        let config = TrainConfig::from_key_values(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        if config.model_kind != ckpt.kind {
            return Err(Error::Checkpoint("model kind disagrees with the config echo".into()));
        }
        let net = GenerativeNet::new(config.net_config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let reference = net.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        same_layout(&reference, &ckpt.params)?;
        Ok(GenerativeModel {
            config,
            net,
            params: ckpt.params.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        GenerativeModel::from_checkpoint(&Checkpoint::read(path)?)
            .map_err(|e| match e {
                Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// `n` decoded pairs from `z ~ N(0, I)`, masks thresholded at `threshold`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, threshold: f64, rng: &mut R) -> Result<Vec<SamplePair>> {
        sample_pairs(&self.net, &self.params, n, threshold, rng)
    }
}

pub(crate) fn same_layout(reference: &LayerParams, got: &LayerParams) -> Result<()> {
    let a: Vec<(&str, &[usize])> = reference.entries().iter().map(|e| (e.name.as_str(), e.value.shape())).collect();
    let b: Vec<(&str, &[usize])> = got.entries().iter().map(|e| (e.name.as_str(), e.value.shape())).collect();
    if a != b {
        let first = a
            .iter()
            .zip(&b)
            .find(|(x, y)| x != y)
            .map(|(x, y)| format!("expected {} {:?}, found {} {:?}", x.0, x.1, y.0, y.1))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", a.len(), b.len()));
        return Err(Error::Checkpoint(format!("parameters do not match the architecture: {first}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's samples.
    pub loss: ElboBreakdown,
    pub recon_mse: f64,
}

pub fn write_loss_csv<W: Write>(out: W, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("loss csv: {e}"));
    w.write_record(LOSS_HEADER).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        rec.extend(r.loss.fields().iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.recon_mse));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("loss csv: {e}")))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != LOSS_HEADER {
        return Err(bad(format!("header must be {}", LOSS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| row[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", &row[i])));
        let mut f = [0.0; 6];
        for (k, v) in f.iter_mut().enumerate() {
            *v = num(k + 1)?;
        }
        out.push(EpochRecord {
            epoch: row[0].parse().map_err(|e| bad(format!("epoch {}: {e}", &row[0])))?,
            loss: ElboBreakdown::from_fields(f),
            recon_mse: num(7)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GenerativeRun {
    pub model: GenerativeModel,
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

struct State {
    params: LayerParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochRecord>,
}

/// Trains from scratch, writing `loss.csv`, cadence checkpoints
/// `epoch-NNNN.ckpt` and the final `model.ckpt` under `out_dir`.
pub fn train_generative(data: &[SamplePair], cfg: &TrainConfig, out_dir: &Path) -> Result<GenerativeRun> {
    cfg.validate()?;
    let net = GenerativeNet::new(cfg.net_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = net.init_params(&mut rng)?;
    let adam = AdamState::new(&params);
    run(
        data,
        cfg,
        net,
        State {
            params,
            adam,
            rng,
            epoch: 0,
            history: Vec::new(),
        },
        out_dir,
    )
}

/// Continues from `ckpt` up to `cfg.epochs`. Every other setting must match
/// the checkpoint's config echo. Earlier rows of `out_dir/loss.csv` are kept.
pub fn resume_generative(
    data: &[SamplePair],
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    out_dir: &Path,
) -> Result<GenerativeRun> {
    cfg.validate()?;
    let mut echo = ckpt.config.clone();
    echo.set("epochs", cfg.epochs);
    if echo != cfg.to_key_values() {
        return Err(Error::Config(
            "resume config differs from the checkpoint's beyond the epoch count".into(),
        ));
    }
    let model = GenerativeModel::from_checkpoint(ckpt)?;
    let epoch = ckpt.epoch as usize;
    if epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {epoch}, past the requested {}",
            cfg.epochs
        )));
    }
    let adam = ckpt
        .adam
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
    let log = out_dir.join("loss.csv");
    let history = if log.exists() {
        read_loss_csv(&log)?.into_iter().filter(|r| r.epoch <= epoch).collect()
    } else {
        Vec::new()
    };
    run(
        data,
        cfg,
        model.net,
        State {
            params: model.params,
            adam,
            rng: ckpt.rng.restore(),
            epoch,
            history,
        },
        out_dir,
    )
}

fn run(data: &[SamplePair], cfg: &TrainConfig, net: GenerativeNet, mut st: State, out_dir: &Path) -> Result<GenerativeRun> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_extent(data, cfg.height, cfg.width, "training")?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let objective = cfg.objective();
    let loss_cfg = cfg.loss_config();
    let mass = objective.mass_diag(cfg.latent_dim);
    let log_path = out_dir.join("loss.csv");
    let snapshot = |st: &State, path: &Path| -> Result<()> {
        Checkpoint {
            kind: cfg.model_kind,
            epoch: st.epoch as u64,
            config: cfg.to_key_values(),
            params: st.params.clone(),
            rng: RngState::capture(&st.rng),
            adam: Some(st.adam.clone()),
        }
        .write(path)
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    while st.epoch < cfg.epochs {
        let epoch = st.epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut st.rng);
        let mut seen = Vec::with_capacity(data.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let draws = SampleDraws::for_batch(chunk.len(), &mass, &mut st.rng);
            let (grads, terms) = mean_gradients(&st.params, chunk.len(), |i, _g, p| {
                let t = objective.sample_terms(&net, p, &data[chunk[i]], &loss_cfg, &draws[i], true)?;
                Ok((t.total, t.values()?))
            })
            .map_err(at_step(epoch, b))?;
            adam_step(&mut st.params, &grads, &mut st.adam, cfg.learning_rate).map_err(at_step(epoch, b))?;
            seen.extend(terms);
        }
        let loss = ElboBreakdown::mean(&seen)?;
        st.history.push(EpochRecord {
            epoch,
            loss,
            recon_mse: cfg.recon_mse(loss.recon_image),
        });
        st.epoch = epoch;
        log::debug!("{} epoch {epoch}: loss {:.6}", cfg.model_kind.as_str(), loss.total);
        let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        write_loss_csv(std::io::BufWriter::new(file), &st.history)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            snapshot(&st, &out_dir.join(format!("epoch-{epoch:04}.ckpt")))?;
        }
    }
    let final_path = out_dir.join(MODEL_FILE);
    snapshot(&st, &final_path)?;
    Ok(GenerativeRun {
        model: GenerativeModel {
            config: cfg.clone(),
            net,
            params: st.params,
        },
        history: st.history,
        checkpoint: final_path,
    })
}
