//! The two-phase protocol end to end: phantoms, generative training,
//! synthetic sets per run, segmenter training per arm and run, and the
//! summary tables.
//!
//! Tables for a plan go to `out/<plan hash>/`. Each stage writes into
//! `out/stages/<name>-<input hash>/` and finishes by writing `stage.done`;
//! a stage whose marker is present with the same inputs is reused, also by
//! other plans.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{join_list, KeyValues};
use crate::data::{
    augment, generate_dataset, load_dataset, write_image, DatasetManifest, ImageFormat,
    ManifestRecord, PhantomConfig, SamplePair, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{format_value, matched_fidelity, mean_std, MetricsReport};
use crate::train::{
    read_dsc_csv, train_generative, train_segmenter, GenerativeModel, ModelKind, SegConfig,
    TrainConfig, MODEL_FILE,
};

pub const PLAN_KEYS: [&str; 9] = [
    "seed",
    "runs",
    "counts",
    "models",
    "train_count",
    "test_count",
    "augment",
    "augment_factors",
    "sample_threshold",
];

pub const TABLE1_HEADER: [&str; 6] = ["arm", "model", "synthetic", "dsc_mean", "dsc_std", "runs"];
pub const TABLE2_HEADER: [&str; 8] = [
    "model",
    "psnr_mean",
    "psnr_std",
    "psnr_inf",
    "ssim_mean",
    "ssim_std",
    "runs",
    "samples",
];

const DONE: &str = "stage.done";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub runs: usize,
    /// Synthetic set sizes, strictly increasing.
    pub counts: Vec<usize>,
    pub models: Vec<ModelKind>,
    pub train_count: usize,
    pub test_count: usize,
    /// Adds rotation/flip augmentation arms.
    pub augment: bool,
    /// Dataset multipliers of the augmentation arms.
    pub augment_factors: Vec<usize>,
    pub sample_threshold: f64,
    pub phantom: PhantomConfig,
    /// Shared generative settings; `model_kind` and `seed` are set per model.
    pub generative: TrainConfig,
    /// `seed` is set per run.
    pub segmenter: SegConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seed: 0,
            runs: 10,
            counts: vec![100, 200, 300, 500],
            models: vec![ModelKind::Vae, ModelKind::Hvae],
            train_count: 100,
            test_count: 100,
            augment: false,
            augment_factors: vec![2, 3, 5],
            sample_threshold: 0.5,
            phantom: PhantomConfig::default(),
            generative: TrainConfig::default(),
            segmenter: SegConfig::default(),
        }
    }
}

impl ExperimentPlan {
    /// Defaults with every image extent set to `height x width`.
    pub fn with_extent(height: usize, width: usize) -> Self {
        let mut plan = ExperimentPlan::default();
        plan.set_extent(height, width);
        plan
    }

    pub fn set_extent(&mut self, height: usize, width: usize) {
        let seed = self.phantom.seed;
        self.phantom = PhantomConfig {
            seed,
            ..PhantomConfig::with_extent(height, width)
        };
        self.generative.height = height;
        self.generative.width = width;
        self.segmenter.height = height;
        self.segmenter.width = width;
    }

    /// Keys are the plan keys, plus `phantom.*`, `gen.*` and `seg.*` for
    /// the stage configs. Stage seeds come from the plan seed, so the
    /// sections do not accept `seed`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let top: Vec<&str> = kv.keys().filter(|k| !k.contains('.')).collect();
        for k in &top {
            if !PLAN_KEYS.contains(k) {
                return Err(Error::Config(format!("unknown configuration key: {k}")));
            }
        }
        for k in kv.keys().filter(|k| k.contains('.')) {
            let known = ["phantom.", "gen.", "seg."].iter().any(|p| k.starts_with(p));
            if !known {
                return Err(Error::Config(format!("unknown configuration key: {k}")));
            }
            if k.ends_with(".seed") || k == "gen.model_kind" {
                return Err(Error::Config(format!(
                    "{k} is set per stage; use seed and models instead"
                )));
            }
        }
        kv.update("seed", &mut self.seed)?;
        kv.update("runs", &mut self.runs)?;
        if let Some(c) = kv.list("counts")? {
            self.counts = c;
        }
        if let Some(m) = kv.list::<ModelKind>("models")? {
            self.models = m;
        }
        kv.update("train_count", &mut self.train_count)?;
        kv.update("test_count", &mut self.test_count)?;
        kv.update("augment", &mut self.augment)?;
        if let Some(f) = kv.list("augment_factors")? {
            self.augment_factors = f;
        }
        kv.update("sample_threshold", &mut self.sample_threshold)?;
        self.phantom.apply(&kv.section("phantom"))?;
        self.generative.apply(&kv.section("gen"))?;
        self.segmenter.apply(&kv.section("seg"))
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut plan = ExperimentPlan::default();
        if let (Some(h), Some(w)) = (kv.value("phantom.height")?, kv.value("phantom.width")?) {
            plan.set_extent(h, w);
        }
        plan.apply(kv)?;
        Ok(plan)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("runs", self.runs);
        kv.set("counts", join_list(&self.counts));
        let models: Vec<&str> = self.models.iter().map(|m| m.as_str()).collect();
        kv.set("models", models.join(","));
        kv.set("train_count", self.train_count);
        kv.set("test_count", self.test_count);
        kv.set("augment", self.augment);
        kv.set("augment_factors", join_list(&self.augment_factors));
        kv.set("sample_threshold", self.sample_threshold);
        for (k, v) in self.phantom.to_key_values() {
            if k != "seed" {
                kv.set(&format!("phantom.{k}"), v);
            }
        }
        let gen = self.generative.to_key_values();
        for k in gen.keys().filter(|k| *k != "seed" && *k != "model_kind") {
            kv.set(&format!("gen.{k}"), gen.get(k).unwrap_or(""));
        }
        let seg = self.segmenter.to_key_values();
        for k in seg.keys().filter(|k| *k != "seed") {
            kv.set(&format!("seg.{k}"), seg.get(k).unwrap_or(""));
        }
        kv
    }

    /// First 16 hex digits of the SHA-256 of the canonical plan.
    pub fn hash(&self) -> String {
        short_hash(&self.to_key_values().render())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.counts.is_empty() || self.counts[0] == 0 || self.counts.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("counts must be positive and strictly increasing, got {:?}", self.counts));
        }
        if self.models.is_empty() || self.models.contains(&ModelKind::UNet) {
            return bad("models must list vae and/or hvae".into());
        }
        if self.models.len() == 2 && self.models[0] == self.models[1] {
            return bad("models are listed twice".into());
        }
        if self.train_count == 0 || self.test_count == 0 {
            return bad("train_count and test_count must be positive".into());
        }
        if self.augment && (self.augment_factors.is_empty() || self.augment_factors.iter().any(|&f| f < 2)) {
            return bad(format!("augment factors must be at least 2, got {:?}", self.augment_factors));
        }
        if !(0.0..=1.0).contains(&self.sample_threshold) {
            return bad(format!("sample_threshold must lie in [0,1], got {}", self.sample_threshold));
        }
        let (h, w) = (self.phantom.height, self.phantom.width);
        if (self.generative.height, self.generative.width) != (h, w)
            || (self.segmenter.height, self.segmenter.width) != (h, w)
        {
            return bad(format!(
                "image extents disagree: phantom {h}x{w}, gen {}x{}, seg {}x{}",
                self.generative.height, self.generative.width, self.segmenter.height, self.segmenter.width
            ));
        }
        self.phantom.validate()?;
        self.generative.validate()?;
        self.segmenter.validate()
    }

    fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    fn generative_config(&self, kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            seed: derive_seed(self.seed, "gen", kind.as_str(), 0),
            ..self.generative.clone()
        }
    }

    fn segmenter_config(&self, run: usize) -> SegConfig {
        SegConfig {
            seed: derive_seed(self.seed, "seg", "", run as u64),
            ..self.segmenter.clone()
        }
    }

    /// Synthetic pairs drawn per model and run: enough for the largest arm
    /// and for the fidelity comparison against the test set.
    fn synthetic_size(&self) -> usize {
        self.counts.last().copied().unwrap_or(0).max(self.test_count)
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Independent 64-bit seed for one (purpose, name, index) of a plan.
pub fn derive_seed(seed: u64, purpose: &str, name: &str, index: u64) -> u64 {
    let d = Sha256::digest(format!("{seed}/{purpose}/{name}/{index}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRecord {
    pub name: String,
    pub hash: String,
    /// Relative to the output root.
    pub dir: PathBuf,
    pub cached: bool,
}

struct Stages {
    root: PathBuf,
    records: Vec<StageRecord>,
}

impl Stages {
    /// Reuses `stages/<name>-<hash>` when its marker matches `inputs`,
    /// otherwise (re)builds it with `build`.
    fn run(&mut self, name: &str, inputs: &KeyValues, build: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let text = format!("stage={name}\n{}", inputs.render());
        let hash = short_hash(&text);
        let rel = PathBuf::from("stages").join(format!("{name}-{hash}"));
        let dir = self.root.join(&rel);
        let marker = dir.join(DONE);
        let cached = fs::read_to_string(&marker).is_ok_and(|m| m == text);
        if cached {
            log::info!("stage {name}: cached");
        } else {
            log::info!("stage {name}: running");
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e).in_stage(name))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e).in_stage(name))?;
            build(&dir).map_err(|e| e.in_stage(name))?;
            fs::write(&marker, &text).map_err(|e| Error::io(&marker, e).in_stage(name))?;
        }
        self.records.push(StageRecord {
            name: name.to_string(),
            hash,
            dir: rel,
            cached,
        });
        Ok(dir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table1Row {
    pub arm: String,
    /// `real`, `vae`, `hvae` or `standard`.
    pub model: String,
    /// Extra training pairs on top of the real set.
    pub synthetic: usize,
    /// Final held-out Dice per run.
    pub dsc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table2Row {
    pub model: ModelKind,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
}

impl ExperimentOutcome {
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.cached)
    }
}

/// Writes `pairs` as IMGF under `dir/pairs/`, PGM previews under
/// `dir/preview/`, and the manifest `dir/synthetic.csv`, whose path is
/// returned.
pub fn write_synthetic(dir: &Path, pairs: &[SamplePair], provenance: &str) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("synthetic-{i:06}");
        let image = PathBuf::from("pairs").join(format!("{id}_image.{}", ImageFormat::Imgf.extension()));
        let mask = PathBuf::from("pairs").join(format!("{id}_mask.{}", ImageFormat::Imgf.extension()));
        write_image(&dir.join(&image), &p.image)?;
        write_image(&dir.join(&mask), &p.mask)?;
        write_image(&dir.join("preview").join(format!("{id}_image.pgm")), &p.image)?;
        write_image(&dir.join("preview").join(format!("{id}_mask.pgm")), &p.mask)?;
        records.push(ManifestRecord {
            id,
            image,
            mask,
            split: Split::Train,
        });
    }
    let path = dir.join("synthetic.csv");
    DatasetManifest {
        records,
        provenance: provenance.to_string(),
    }
    .write(&path)?;
    Ok(path)
}

fn write_csv_file(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn summary_cells(values: &[f64]) -> [String; 2] {
    match mean_std(values) {
        Some((m, s)) => [format_value(m), format_value(s)],
        None => ["na".into(), "na".into()],
    }
}

/// Runs (or reuses) every stage of `plan` under `out/stages/` and writes
/// `table1.csv`, `table2.csv`, `runs.csv` and `index.txt` to
/// `out/<plan hash>/`.
pub fn run_full_experiment(plan: &ExperimentPlan, out: &Path) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let root = out.join(plan.hash());
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut stages = Stages {
        root: out.to_path_buf(),
        records: Vec::new(),
    };

    let phantom = plan.phantom_config();
    let mut data_inputs = KeyValues::new();
    for (k, v) in phantom.to_key_values() {
        data_inputs.set(&format!("phantom.{k}"), v);
    }
    data_inputs.set("train_count", plan.train_count);
    data_inputs.set("test_count", plan.test_count);
    let data_dir = stages.run("data", &data_inputs, |dir| {
        generate_dataset(&phantom, plan.train_count, Split::Train, dir, ImageFormat::Imgf)?;
        generate_dataset(&phantom, plan.test_count, Split::Test, dir, ImageFormat::Imgf)?;
        Ok(())
    })?;
    let data_hash = stages.records.last().expect("stage recorded").hash.clone();
    let train = load_dataset(&data_dir.join("train.csv")).map_err(|e| e.in_stage("data"))?;
    let test = load_dataset(&data_dir.join("test.csv")).map_err(|e| e.in_stage("data"))?;

    // Phase one: generative models and their synthetic sets.
    let n_synth = plan.synthetic_size();
    let mut synthetic: Vec<(ModelKind, String, Vec<Vec<SamplePair>>)> = Vec::new();
    for &kind in &plan.models {
        let cfg = plan.generative_config(kind);
        let mut inputs = cfg.to_key_values();
        inputs.set("data", &data_hash);
        let name = format!("gen-{}", kind.as_str());
        let gen_dir = stages.run(&name, &inputs, |dir| train_generative(&train, &cfg, dir).map(|_| ()))?;
        let gen_hash = stages.records.last().expect("stage recorded").hash.clone();
        let model = GenerativeModel::load(&gen_dir.join(MODEL_FILE)).map_err(|e| e.in_stage(name.as_str()))?;
        let mut per_run = Vec::with_capacity(plan.runs);
        let mut hashes = Vec::with_capacity(plan.runs);
        for run in 0..plan.runs {
            let mut inputs = KeyValues::new();
            inputs.set("generator", &gen_hash);
            inputs.set("count", n_synth);
            inputs.set("threshold", plan.sample_threshold);
            let seed = derive_seed(plan.seed, "sample", kind.as_str(), run as u64);
            inputs.set("seed", seed);
            let name = format!("synth-{}-run{run}", kind.as_str());
            let dir = stages.run(&name, &inputs, |dir| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pairs = model.sample(n_synth, plan.sample_threshold, &mut rng)?;
                write_synthetic(dir, &pairs, &format!("generated:{gen_hash}"))?;
                Ok(())
            })?;
            hashes.push(stages.records.last().expect("stage recorded").hash.clone());
            per_run.push(load_dataset(&dir.join("synthetic.csv")).map_err(|e| e.in_stage(name.as_str()))?);
        }
        synthetic.push((kind, hashes.join(","), per_run));
    }

    // Phase two: one segmenter per arm and run.
    let mut arms: Vec<(String, String, usize)> = vec![("reference".into(), "real".into(), 0)];
    for (kind, _, _) in &synthetic {
        for &c in &plan.counts {
            arms.push((format!("{}+{c}", kind.as_str()), kind.as_str().into(), c));
        }
    }
    if plan.augment {
        for &f in &plan.augment_factors {
            arms.push((format!("augment-x{f}"), "standard".into(), (f - 1) * plan.train_count));
        }
    }
    let mut table1 = Vec::with_capacity(arms.len());
    let mut run_rows = Vec::new();
    for (arm, model, count) in &arms {
        let mut dsc = Vec::with_capacity(plan.runs);
        for run in 0..plan.runs {
            let cfg = plan.segmenter_config(run);
            let mut inputs = cfg.to_key_values();
            inputs.set("data", &data_hash);
            inputs.set("arm", arm);
            let extra: Vec<SamplePair> = match model.as_str() {
                "real" => Vec::new(),
                "standard" => {
                    let seed = derive_seed(plan.seed, "augment", arm, run as u64);
                    inputs.set("augment_seed", seed);
                    augment(&train, count / plan.train_count, &mut ChaCha8Rng::seed_from_u64(seed))?
                }
                _ => {
                    let (_, hashes, sets) = synthetic
                        .iter()
                        .find(|(k, _, _)| k.as_str() == model)
                        .expect("arm built from a trained model");
                    inputs.set("synthetic", hashes.split(',').nth(run).unwrap_or(""));
                    inputs.set("count", count);
                    sets[run][..*count].to_vec()
                }
            };
            let name = format!("seg-{arm}-run{run}");
            let dir = stages.run(&name, &inputs, |dir| {
                train_segmenter(&train, &extra, &test, &cfg, Some(dir)).map(|_| ())
            })?;
            let history = read_dsc_csv(&dir.join("dsc.csv")).map_err(|e| e.in_stage(name.as_str()))?;
            let last = history
                .last()
                .ok_or_else(|| Error::Data("empty Dice curve".into()).in_stage(name.as_str()))?;
            run_rows.push(vec![arm.clone(), run.to_string(), format!("{:e}", last.dsc)]);
            dsc.push(last.dsc);
        }
        table1.push(Table1Row {
            arm: arm.clone(),
            model: model.clone(),
            synthetic: *count,
            dsc,
        });
    }

    // Fidelity of each generator's samples against the test set.
    let mut table2 = Vec::new();
    for (kind, _, sets) in &synthetic {
        let runs = sets
            .iter()
            .map(|s| matched_fidelity(&s[..plan.test_count], &test))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage(format!("fidelity-{}", kind.as_str())))?;
        table2.push(Table2Row {
            model: *kind,
            report: MetricsReport {
                runs,
                samples_per_run: plan.test_count,
            },
        });
    }

    let t1: Vec<Vec<String>> = table1
        .iter()
        .map(|r| {
            let [m, s] = summary_cells(&r.dsc);
            vec![r.arm.clone(), r.model.clone(), r.synthetic.to_string(), m, s, r.dsc.len().to_string()]
        })
        .collect();
    write_csv_file(&root.join("table1.csv"), &TABLE1_HEADER, &t1)?;
    let t2: Vec<Vec<String>> = table2
        .iter()
        .map(|r| {
            let [pm, ps] = summary_cells(&r.report.values("psnr_db"));
            let [sm, ss] = summary_cells(&r.report.values("ssim"));
            let inf: usize = r.report.runs.iter().map(|x| x.psnr_inf).sum();
            vec![
                r.model.as_str().to_string(),
                pm,
                ps,
                inf.to_string(),
                sm,
                ss,
                r.report.runs.len().to_string(),
                r.report.samples_per_run.to_string(),
            ]
        })
        .collect();
    write_csv_file(&root.join("table2.csv"), &TABLE2_HEADER, &t2)?;
    write_csv_file(&root.join("runs.csv"), &["arm", "run", "dsc"], &run_rows)?;
    for r in &table2 {
        let path = root.join(format!("generation-{}.csv", r.model.as_str()));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        r.report.write_csv(std::io::BufWriter::new(file))?;
    }

    write_index(&root, plan, &stages.records)?;
    Ok(ExperimentOutcome {
        dir: root,
        stages: stages.records,
        table1,
        table2,
    })
}

fn write_index(root: &Path, plan: &ExperimentPlan, stages: &[StageRecord]) -> Result<()> {
    let path = root.join("index.txt");
    let mut text = String::new();
    text.push_str(&format!("experiment.hash={}\n", plan.hash()));
    for line in plan.to_key_values().render().lines() {
        text.push_str(&format!("plan.{line}\n"));
    }
    for s in stages {
        text.push_str(&format!("stage.{}.hash={}\n", s.name, s.hash));
        text.push_str(&format!("stage.{}.dir=../{}\n", s.name, s.dir.display()));
        text.push_str(&format!(
            "stage.{}.status={}\n",
            s.name,
            if s.cached { "cached" } else { "computed" }
        ));
    }
    for f in ["table1.csv", "table2.csv", "runs.csv"] {
        text.push_str(&format!("output.{}={f}\n", f.trim_end_matches(".csv")));
    }
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> ExperimentPlan {
        let mut plan = ExperimentPlan::with_extent(16, 16);
        plan.runs = 2;
        plan.counts = vec![3, 6];
        plan.train_count = 4;
        plan.test_count = 3;
        plan.generative.epochs = 2;
        plan.generative.widths = vec![4, 8];
        plan.generative.latent_dim = 4;
        plan.generative.hmc_steps = 2;
        plan.generative.batch_size = 4;
        plan.segmenter.epochs = 2;
        plan.segmenter.depth = 2;
        plan.segmenter.base_width = 4;
        plan
    }

    #[test]
    fn plan_key_values_round_trip() {
        let mut plan = tiny_plan();
        plan.augment = true;
        plan.seed = 17;
        let back = ExperimentPlan::from_key_values(&plan.to_key_values()).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.hash(), plan.hash());
        let mut other = plan.clone();
        other.seed = 18;
        assert_ne!(other.hash(), plan.hash());
    }

    #[test]
    fn plan_validation() {
        let mut p = tiny_plan();
        p.counts = vec![6, 3];
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = tiny_plan();
        p.segmenter.height = 32;
        assert!(p.validate().is_err());
        let mut p = tiny_plan();
        p.runs = 0;
        assert!(p.validate().is_err());
        assert!(ExperimentPlan::from_key_values(&KeyValues::parse("gen.seed=3").unwrap()).is_err());
        assert!(ExperimentPlan::from_key_values(&KeyValues::parse("colour=3").unwrap()).is_err());
        assert!(ExperimentPlan::from_key_values(&KeyValues::parse("gan.epochs=3").unwrap()).is_err());
        assert!(ExperimentPlan::from_key_values(&KeyValues::parse("models=vae,unet").unwrap())
            .unwrap()
            .validate()
            .is_err());
    }

    #[test]
    fn seeds_are_independent_per_purpose() {
        let a = derive_seed(1, "seg", "", 0);
        assert_ne!(a, derive_seed(1, "seg", "", 1));
        assert_ne!(a, derive_seed(2, "seg", "", 0));
        assert_ne!(a, derive_seed(1, "gen", "", 0));
        assert_eq!(a, derive_seed(1, "seg", "", 0));
    }

    #[test]
    fn end_to_end_tables_and_caching() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan();
        plan.augment = true;
        plan.augment_factors = vec![2];
        let first = run_full_experiment(&plan, dir.path()).unwrap();
        assert!(first.stages.iter().all(|s| !s.cached));
        let arms: Vec<&str> = first.table1.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(arms, ["reference", "vae+3", "vae+6", "hvae+3", "hvae+6", "augment-x2"]);
        assert!(first.table1.iter().all(|r| r.dsc.len() == 2));
        let t1 = fs::read_to_string(first.dir.join("table1.csv")).unwrap();
        assert!(t1.starts_with("arm,model,synthetic,dsc_mean,dsc_std,runs\n"));
        assert_eq!(t1.lines().count(), 7);
        let t2 = fs::read_to_string(first.dir.join("table2.csv")).unwrap();
        assert_eq!(t2.lines().count(), 3);
        let index = KeyValues::read(&first.dir.join("index.txt")).unwrap();
        assert_eq!(index.get("experiment.hash"), Some(plan.hash().as_str()));
        assert_eq!(index.get("stage.gen-hvae.status"), Some("computed"));

        let again = run_full_experiment(&plan, dir.path()).unwrap();
        assert!(again.all_cached());
        assert_eq!(fs::read_to_string(again.dir.join("table1.csv")).unwrap(), t1);
        assert_eq!(again.table1, first.table1);

        // Changing a segmenter setting retrains only the segmenters.
        plan.segmenter.epochs = 3;
        let third = run_full_experiment(&plan, dir.path()).unwrap();
        for s in &third.stages {
            assert_eq!(s.cached, !s.name.starts_with("seg-"), "{}", s.name);
        }
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan();
        plan.generative.learning_rate = 1e300;
        plan.generative.epochs = 3;
        let err = run_full_experiment(&plan, dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "gen-vae"), "{err}");
        assert_eq!(err.exit_code(), 4);
    }
}
