use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hvae::config::KeyValues;
use hvae::data::{generate_dataset, ingest_external, load_dataset, ImageFormat, PhantomConfig, SamplePair, Split};
use hvae::error::{Error, Result};
use hvae::experiment::{run_full_experiment, write_synthetic, ExperimentPlan};
use hvae::metrics::{evaluate_generation, format_value, tumor_colocalization};
use hvae::train::{
    resume_generative, train_generative, train_segmenter, Checkpoint, GenerativeModel, SegConfig, Segmenter,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "hvae", version, about = "Hamiltonian VAE for joint image and mask synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Writes train and test phantom datasets with manifests.
    PhantomGen {
        #[arg(long, default_value_t = 100)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value = "pgm")]
        format: String,
        #[command(flatten)]
        common: Common,
    },
    /// Trains a VAE or HVAE on a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Draws image+mask pairs from a trained generative model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the U-Net on real plus optional synthetic pairs.
    SegTrain {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Uses only the first N synthetic pairs.
        #[arg(long)]
        synthetic_count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR/SSIM of generated pairs against a reference set, optionally
    /// with the Dice of a segmenter on the reference set.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Runs the full two-phase protocol and writes the summary tables.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Builds a manifest from external image and mask directories.
    Ingest {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value = "*.pgm")]
        pattern: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PhantomGen { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::SegTrain { common, .. }
            | Command::Eval { common, .. }
            | Command::Experiment { common }
            | Command::Ingest { common, .. } => common,
        }
    }
}

impl Common {
    /// Config file values, then `--set` overrides, then `--seed`.
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::new(),
        };
        for a in &self.set {
            kv.set_assignment(a)?;
        }
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        Ok(kv)
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Fills `height`/`width` from the data when the configuration leaves them out.
fn with_data_extent(mut kv: KeyValues, data: &[SamplePair]) -> KeyValues {
    if let Some(p) = data.first() {
        if kv.get("height").is_none() {
            kv.set("height", p.height());
        }
        if kv.get("width").is_none() {
            kv.set("width", p.width());
        }
    }
    kv
}

fn run(cmd: Command) -> Result<()> {
    let common = cmd.common().clone();
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let kv = common.key_values()?;
    match cmd {
        Command::PhantomGen { train, test, format, .. } => {
            let mut cfg = PhantomConfig::default();
            if let (Some(h), Some(w)) = (kv.value("height")?, kv.value("width")?) {
                cfg = PhantomConfig::with_extent(h, w);
            }
            cfg.apply(&kv)?;
            let format = ImageFormat::parse(&format)?;
            let dir = common.out_dir("phantoms")?;
            for (n, split) in [(train, Split::Train), (test, Split::Test)] {
                if n > 0 {
                    let m = generate_dataset(&cfg, n, split, &dir, format)?;
                    println!("{}", m.display());
                }
            }
        }
        Command::Train { data, resume, .. } => {
            let pairs = load_dataset(&data)?;
            let cfg = TrainConfig::from_key_values(&with_data_extent(kv, &pairs))?;
            let dir = common.out_dir("train")?;
            let run = match resume {
                Some(p) => resume_generative(&pairs, &cfg, &Checkpoint::read(&p)?, &dir)?,
                None => train_generative(&pairs, &cfg, &dir)?,
            };
            if let Some(last) = run.history.last() {
                println!(
                    "epoch {} total {} recon_mse {}",
                    last.epoch,
                    format_value(last.loss.total),
                    format_value(last.recon_mse)
                );
            }
            println!("{}", run.checkpoint.display());
        }
        Command::Sample { model, count, threshold, .. } => {
            kv.reject_unknown(&["seed"])?;
            let model = GenerativeModel::load(&model)?;
            let seed = kv.value("seed")?.unwrap_or(0u64);
            let pairs = model.sample(count, threshold, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let dir = common.out_dir("samples")?;
            let manifest = write_synthetic(&dir, &pairs, "generated")?;
            println!("{}", manifest.display());
        }
        Command::SegTrain { real, test, synthetic, synthetic_count, .. } => {
            let real = load_dataset(&real)?;
            let test = load_dataset(&test)?;
            let mut extra = match &synthetic {
                Some(p) => load_dataset(p)?,
                None => Vec::new(),
            };
            if let Some(n) = synthetic_count {
                if n > extra.len() {
                    return Err(Error::Data(format!(
                        "asked for {n} synthetic pairs, manifest has {}",
                        extra.len()
                    )));
                }
                extra.truncate(n);
            }
            let cfg = SegConfig::from_key_values(&with_data_extent(kv, &real))?;
            let dir = common.out_dir("segmenter")?;
            let run = train_segmenter(&real, &extra, &test, &cfg, Some(&dir))?;
            println!("dsc {}", format_value(run.final_dsc()));
        }
        Command::Eval { generated, reference, runs, segmenter, .. } => {
            kv.reject_unknown(&["seed"])?;
            let generated = load_dataset(&generated)?;
            let reference = load_dataset(&reference)?;
            let seed = kv.value("seed")?.unwrap_or(0u64);
            let mut report = evaluate_generation(&generated, &reference, runs, &mut ChaCha8Rng::seed_from_u64(seed))?;
            if let Some(p) = segmenter {
                let dsc = Segmenter::load(&p)?.mean_dice(&reference)?;
                for r in &mut report.runs {
                    r.dsc = Some(dsc);
                }
            }
            let dir = common.out_dir("eval")?;
            let path = dir.join("report.csv");
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
            print!("{}", String::from_utf8_lossy(&buf));
            let coloc = tumor_colocalization(&generated).map_or_else(|| "na".to_string(), format_value);
            println!("tumor_colocalization {coloc}");
        }
        Command::Experiment { .. } => {
            let plan = ExperimentPlan::from_key_values(&kv)?;
            let out = common.out_dir("out")?;
            let outcome = run_full_experiment(&plan, &out)?;
            let cached = outcome.stages.iter().filter(|s| s.cached).count();
            println!("stages {} cached {cached}", outcome.stages.len());
            println!("{}", outcome.dir.display());
        }
        Command::Ingest { images, masks, pattern, split, .. } => {
            let manifest = ingest_external(&images, &masks, &pattern, Split::parse(&split)?)?;
            let dir = common.out_dir(".")?;
            let path = dir.join(format!("{split}.csv"));
            manifest.write(&path)?;
            println!("{} records {}", path.display(), manifest.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
