use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, ModelKind, RngState};
use super::generative::same_layout;
use super::{at_step, check_extent, mean_gradients, MODEL_FILE};
use crate::autodiff::{Graph, Var};
use crate::config::KeyValues;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::nn::{LayerParams, UNet, UNetConfig};
use crate::tensor::Tensor;

pub const SEG_KEYS: [&str; 8] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "height",
    "width",
    "depth",
    "base_width",
    "seed",
];

pub const DSC_HEADER: [&str; 3] = ["epoch", "loss", "dsc"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        SegConfig {
            epochs: 80,
            batch_size: 32,
            learning_rate: 1e-3,
            height: u.height,
            width: u.width,
            depth: u.depth,
            base_width: u.base_width,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = SegConfig::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&SEG_KEYS)?;
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("learning_rate", &mut self.learning_rate)?;
        kv.update("height", &mut self.height)?;
        kv.update("width", &mut self.width)?;
        kv.update("depth", &mut self.depth)?;
        kv.update("base_width", &mut self.base_width)?;
        kv.update("seed", &mut self.seed)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", self.learning_rate);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("depth", self.depth);
        kv.set("base_width", self.base_width);
        kv.set("seed", self.seed);
        kv
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            height: self.height,
            width: self.width,
            depth: self.depth,
            base_width: self.base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
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
        self.unet_config().validate()
    }
}

/// A trained U-Net.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: SegConfig,
    pub net: UNet,
    pub params: LayerParams,
}

impl Segmenter {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::UNet {
            return Err(Error::Checkpoint("checkpoint does not hold a segmenter".into()));
        }
        let config = SegConfig::from_key_values(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let net = UNet::new(config.unet_config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        same_layout(&net.init_params(&mut ChaCha8Rng::seed_from_u64(0))?, &ckpt.params)?;
        Ok(Segmenter {
            config,
            net,
            params: ckpt.params.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Segmenter::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Binary masks (`logit > 0`) for each image.
    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        predict(&self.net, &self.params, images)
    }

    /// Mean Dice of the predictions over `pairs`.
    pub fn mean_dice(&self, pairs: &[SamplePair]) -> Result<f64> {
        mean_dice(&self.net, &self.params, pairs)
    }
}

fn predict(net: &UNet, params: &LayerParams, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .par_iter()
        .map(|x| {
            let g = Graph::new();
            let p = params.bind(&g);
            let logits = net.forward(&p, g.constant(x.clone()))?;
            Ok(logits.value().map(|l| f64::from(l > 0.0)))
        })
        .collect()
}

fn mean_dice(net: &UNet, params: &LayerParams, pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("Dice evaluation needs at least one pair".into()));
    }
    let images: Vec<Tensor> = pairs.iter().map(|p| p.image.clone()).collect();
    let preds = predict(net, params, &images)?;
    let mut sum = 0.0;
    for (pred, pair) in preds.iter().zip(pairs) {
        sum += dice(pred, &pair.mask)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean pixel binary cross-entropy of mask logits.
pub(crate) fn pixel_bce<'g>(logits: Var<'g>, mask: Var<'g>) -> Result<Var<'g>> {
    logits.softplus()?.sub(mask.mul(logits)?)?.mean()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    /// Mean training cross-entropy.
    pub loss: f64,
    /// Mean Dice on the held-out set after the epoch.
    pub dsc: f64,
}

pub fn write_dsc_csv<W: Write>(out: W, rows: &[SegEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("dsc csv: {e}"));
    w.write_record(DSC_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([r.epoch.to_string(), format!("{:e}", r.loss), format!("{:e}", r.dsc)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("dsc csv: {e}")))
}

pub fn read_dsc_csv(path: &Path) -> Result<Vec<SegEpoch>> {
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != DSC_HEADER {
        return Err(bad(format!("header must be {}", DSC_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| row[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", &row[i])));
        out.push(SegEpoch {
            epoch: row[0].parse().map_err(|e| bad(format!("epoch {}: {e}", &row[0])))?,
            loss: num(1)?,
            dsc: num(2)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SegRun {
    pub model: Segmenter,
    pub history: Vec<SegEpoch>,
    /// Set when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl SegRun {
    pub fn final_dsc(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.dsc)
    }
}

/// Trains on `real` followed by `synthetic` and scores Dice on `held_out`
/// after every epoch. With `out_dir`, writes `dsc.csv` and `model.ckpt`.
pub fn train_segmenter(
    real: &[SamplePair],
    synthetic: &[SamplePair],
    held_out: &[SamplePair],
    cfg: &SegConfig,
    out_dir: Option<&Path>,
) -> Result<SegRun> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(Error::Data("segmenter needs at least one real sample".into()));
    }
    if held_out.is_empty() {
        return Err(Error::Data("segmenter needs a non-empty held-out set".into()));
    }
    check_extent(real, cfg.height, cfg.width, "real")?;
    check_extent(synthetic, cfg.height, cfg.width, "synthetic")?;
    check_extent(held_out, cfg.height, cfg.width, "held-out")?;
    let train: Vec<&SamplePair> = real.iter().chain(synthetic).collect();
    let net = UNet::new(cfg.unet_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.init_params(&mut rng)?;
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, l) = mean_gradients(&params, chunk.len(), |i, g, p| {
                let s = train[chunk[i]];
                let logits = net.forward(p, g.constant(s.image.clone()))?;
                let loss = pixel_bce(logits, g.constant(s.mask.clone()))?;
                let v = loss.item()?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("segmenter loss {v}")));
                }
                Ok((loss, v))
            })
            .map_err(at_step(epoch, b))?;
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate).map_err(at_step(epoch, b))?;
            losses.extend(l);
        }
        let dsc = mean_dice(&net, &params, held_out)?;
        history.push(SegEpoch {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            dsc,
        });
        log::debug!("segmenter epoch {epoch}: dsc {dsc:.4}");
    }
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("dsc.csv");
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        write_dsc_csv(std::io::BufWriter::new(file), &history)?;
        let path = dir.join(MODEL_FILE);
        Checkpoint {
            kind: ModelKind::UNet,
            epoch: cfg.epochs as u64,
            config: cfg.to_key_values(),
            params: params.clone(),
            rng: RngState::capture(&rng),
            adam: Some(adam),
        }
        .write(&path)?;
        checkpoint = Some(path);
    }
    Ok(SegRun {
        model: Segmenter {
            config: cfg.clone(),
            net,
            params,
        },
        history,
        checkpoint,
    })
}
