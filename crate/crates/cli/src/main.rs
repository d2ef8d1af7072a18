//! `arclab`: train, fuse, verify, count and inspect ARC adapters.
//!
//! Exit codes: 0 success, 1 I/O or checkpoint error, 2 configuration error,
//! 3 numerical abort, 4 a check ran and failed.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use arclab::accounting::{self, Knobs, MethodSpec, ScalingRow};
use arclab::analysis::{rank_sweep, write_summary_csv, write_sweep};
use arclab::arc::{AdapterBank, ArcConfig};
use arclab::checkpoint::{Checkpoint, LoadedModel};
use arclab::reparam::{fuse, FUSION_TOL};
use arclab::trainer::{self, make_task, SyntheticTask, TrainConfig};
use arclab::vit::{BackboneConfig, BackboneWeights, Image};
use arclab::Rng;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK: u8 = 4;

const EFFECTIVE_CONFIG: &str = "effective_config.json";
const CHECKPOINT: &str = "model.arcl";
const LOSS_CSV: &str = "loss.csv";
const GRADCHECK_H: f64 = 1e-5;
const GRADCHECK_SAMPLES: usize = 2;

/// Offsets from `io.seed` for the independent init streams.
const TASK_SEED_OFFSET: u64 = 100;
const BANK_SEED_OFFSET: u64 = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct IoConfig {
    out_dir: PathBuf,
    seed: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    backbone: BackboneConfig,
    arc: ArcConfig,
    train: TrainConfig,
    task: SyntheticTask,
    io: IoConfig,
}

impl RunConfig {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.backbone.validate()?;
        cfg.arc.validate(&cfg.backbone)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser)]
#[command(name = "arclab", version, about = "Adapter re-composing lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Layers,
    Backbones,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters on the synthetic task; writes model.arcl, loss.csv and effective_config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to io.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold the adapters of a checkpoint into the backbone.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Effective config; defaults to effective_config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare adapted and fused logits on random images.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 32)]
        trials: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trainable and inference-time parameter counts.
    Count {
        #[arg(long)]
        method: String,
        #[arg(long = "D")]
        d: Option<u64>,
        #[arg(long = "L")]
        l: Option<u64>,
        #[arg(long = "Dprime")]
        dprime: Option<u64>,
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        w: Option<u64>,
        #[arg(long)]
        o: Option<u64>,
        /// `layers` sweeps 1..=L at width D; `backbones` covers ViT-B/L/H.
        #[arg(long, value_enum)]
        sweep: Option<Sweep>,
        #[arg(long)]
        csv: bool,
    },
    /// Singular-value spectra of full-rank adaptation matrices.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = arclab::analysis::DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the adapter gradients for a config.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Fuse { checkpoint, out, config } => cmd_fuse(&checkpoint, &out, config),
        Command::Verify {
            checkpoint,
            fused,
            trials,
            config,
        } => cmd_verify(&checkpoint, &fused, trials, config),
        Command::Count {
            method,
            d,
            l,
            dprime,
            m,
            w,
            o,
            sweep,
            csv,
        } => {
            let knobs = Knobs {
                bottleneck: dprime,
                prompts: m,
                matrices: w,
                operations: o,
            };
            cmd_count(&method, d, l, knobs, sweep, csv)
        }
        Command::Spectrum {
            checkpoint,
            bins,
            out,
            config,
        } => cmd_spectrum(&checkpoint, bins, &out, config),
        Command::Gradcheck { config, tol } => cmd_gradcheck(&config, tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CheckFailed>() {
            return EXIT_CHECK;
        }
        if let Some(err) = cause.downcast_ref::<arclab::Error>() {
            return match err {
                arclab::Error::Config(_) | arclab::Error::Contract(_) | arclab::Error::Dimension { .. } => EXIT_CONFIG,
                arclab::Error::NonFiniteLoss { .. } | arclab::Error::NoConvergence { .. } => EXIT_NUMERIC,
                arclab::Error::Checkpoint { .. } | arclab::Error::Io(_) => EXIT_IO,
            };
        }
    }
    EXIT_IO
}

fn config_for(checkpoint: &Path, explicit: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let path = explicit.unwrap_or_else(|| checkpoint.with_file_name(EFFECTIVE_CONFIG));
    RunConfig::load(&path)
}

fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<LoadedModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.into_model(&cfg.backbone, &cfg.arc)?)
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = out {
        cfg.io.out_dir = out;
    }
    let dir = cfg.io.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let seed = cfg.io.seed;
    let weights = BackboneWeights::random(&cfg.backbone, &mut Rng::new(seed))?;
    let data = make_task(&cfg.task, &cfg.backbone, &mut Rng::new(seed + TASK_SEED_OFFSET))?;
    let bank = AdapterBank::init(&cfg.arc, &cfg.backbone, &mut Rng::new(seed + BANK_SEED_OFFSET))?;

    // echo first so an aborted run is still reproducible
    fs::write(dir.join(EFFECTIVE_CONFIG), cfg.echo())?;
    let out = trainer::train(&weights, Some(bank), weights.head.clone(), &data, &cfg.train)?;
    let bank = out.bank.expect("bank was supplied");
    let trained = weights.with_head(out.head);

    let mut csv = io::BufWriter::new(fs::File::create(dir.join(LOSS_CSV))?);
    trainer::write_loss_csv(&out.curve, &mut csv)?;
    csv.flush()?;
    Checkpoint::from_model(&trained, Some(&bank), &cfg.arc).save(dir.join(CHECKPOINT))?;

    let acc = trainer::evaluate(&trained, Some(&bank), &trained.head, &data.eval)?;
    let (first, last) = (out.curve[0].loss, out.curve[out.curve.len() - 1].loss);
    println!("steps\tloss_first\tloss_last\teval_accuracy\tparams");
    println!("{}\t{first:.6}\t{last:.6}\t{acc:.4}\t{}", out.curve.len(), bank.parameter_count());
    Ok(())
}

fn cmd_fuse(checkpoint: &Path, out: &Path, config: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = config_for(checkpoint, config)?;
    let (weights, bank) = match load_model(checkpoint, &cfg)? {
        LoadedModel::Adapted { weights, bank } => (weights, bank),
        LoadedModel::Fused(_) => bail!(ConfigError(format!("{} is already fused", checkpoint.display()))),
    };
    let fused = fuse(&weights, &bank, &checkpoint.display().to_string())?;
    Checkpoint::from_model(&fused.weights, None, &cfg.arc).save(out)?;
    // the fused file needs the same config to load
    let sibling = out.with_file_name(EFFECTIVE_CONFIG);
    if !sibling.exists() {
        fs::write(&sibling, cfg.echo())?;
    }
    println!("wrote {} (digest {})", out.display(), arclab::checkpoint::hex(&fused.provenance.config_digest));
    Ok(())
}

fn cmd_verify(checkpoint: &Path, fused: &Path, trials: usize, config: Option<PathBuf>) -> anyhow::Result<()> {
    if trials == 0 {
        bail!(ConfigError("--trials must be positive".into()));
    }
    let cfg = config_for(checkpoint, config)?;
    let adapted = load_model(checkpoint, &cfg)?;
    let plain = load_model(fused, &cfg)?;
    if plain.bank().is_some() {
        bail!(ConfigError(format!("{} is not a fused checkpoint", fused.display())));
    }
    let mut rng = Rng::new(cfg.io.seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let img = Image::random(&cfg.backbone, &mut rng);
        worst = worst.max(adapted.forward(&img)?.max_abs_diff(&plain.forward(&img)?)?);
    }
    println!("max_deviation\t{worst:e}");
    if worst <= FUSION_TOL {
        Ok(())
    } else {
        Err(CheckFailed(format!("deviation {worst:e} exceeds {FUSION_TOL:e}")).into())
    }
}

fn cmd_count(method: &str, d: Option<u64>, l: Option<u64>, knobs: Knobs, sweep: Option<Sweep>, csv: bool) -> anyhow::Result<()> {
    let spec = MethodSpec::from_knobs(method, knobs)?;
    let need = |v: Option<u64>, flag: &str| v.ok_or_else(|| ConfigError(format!("--{flag} is required")));
    let rows: Vec<ScalingRow> = match sweep {
        Some(Sweep::Backbones) => accounting::scaling_backbones(&spec)?,
        Some(Sweep::Layers) => accounting::scaling_layers(&spec, need(d, "D")?, 1..=need(l, "L")?)?,
        None => {
            let (d, l) = (need(d, "D")?, need(l, "L")?);
            vec![ScalingRow {
                label: spec.name().to_string(),
                d,
                l,
                finetune: accounting::count_finetune(&spec, d, l)?,
                inference: accounting::count_inference(&spec, d, l)?,
            }]
        }
    };
    let mut out = io::stdout().lock();
    if csv {
        writeln!(out, "label,D,L,finetune,inference")?;
        for r in &rows {
            writeln!(out, "{},{},{},{},{}", r.label, r.d, r.l, r.finetune, r.inference)?;
        }
    } else {
        writeln!(out, "{:<10} {:>6} {:>4} {:>12} {:>12}", "label", "D", "L", "finetune", "inference")?;
        for r in &rows {
            writeln!(out, "{:<10} {:>6} {:>4} {:>12} {:>12}", r.label, r.d, r.l, r.finetune, r.inference)?;
        }
    }
    Ok(())
}

fn cmd_spectrum(checkpoint: &Path, bins: usize, out: &Path, config: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = config_for(checkpoint, config)?;
    let model = load_model(checkpoint, &cfg)?;
    let bank = model
        .bank()
        .ok_or_else(|| ConfigError(format!("{} has no adapters to analyse", checkpoint.display())))?;
    let sweep = rank_sweep(bank, bins)?;
    fs::create_dir_all(out)?;
    write_sweep(out, &sweep)?;
    write_summary_csv(&sweep, io::stdout().lock())?;
    Ok(())
}

fn cmd_gradcheck(config: &Path, tol: f64) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.io.seed;
    let weights = BackboneWeights::random(&cfg.backbone, &mut Rng::new(seed))?;
    let data = make_task(&cfg.task, &cfg.backbone, &mut Rng::new(seed + TASK_SEED_OFFSET))?;
    let mut bank = AdapterBank::init(&cfg.arc, &cfg.backbone, &mut Rng::new(seed + BANK_SEED_OFFSET))?;
    bank.set_training(true);
    let n = GRADCHECK_SAMPLES.min(data.train.len());
    let report = trainer::bank_gradcheck(&weights, &bank, &data.train[..n], seed, GRADCHECK_H, tol)?;
    println!("param\tmax_abs_grad\tmax_rel_error");
    for p in &report.params {
        println!("{}\t{:e}\t{:e}", p.name, p.max_abs_analytic, p.max_rel_error);
    }
    println!("overall\t-\t{:e}", report.max_rel_error);
    if report.passed {
        Ok(())
    } else {
        Err(CheckFailed(format!("max relative error {:e} exceeds {tol:e}", report.max_rel_error)).into())
    }
}
