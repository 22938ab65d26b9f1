//! Run configuration with three layers: command-line flags override a TOML
//! config file, which overrides built-in defaults. Every run echoes its
//! fully resolved configuration to `reports/<command>_config.toml`, which is
//! sufficient to replay the run.

use std::env;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "AEROFUSE_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root (default: $AEROFUSE_OUT or ./runs)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Benchmark kind: smooth or shock
    #[arg(long)]
    pub kind: Option<String>,
    /// Low-fidelity grid size
    #[arg(long)]
    pub n_lf: Option<usize>,
    /// High-fidelity grid size
    #[arg(long)]
    pub n_hf: Option<usize>,
    /// Gaussian noise sigma added to the high-fidelity response
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct AlignArgs {
    /// Low-fidelity CSV (with .schema.csv sidecar)
    #[arg(long)]
    pub lf: Option<PathBuf>,
    /// High-fidelity CSV
    #[arg(long)]
    pub hf: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Aligned training CSV (states, <r>_lf, <r>_delta)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate aligned CSV evaluated as the held-out split
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Hold out every K-th row as the test split (0 = no split)
    #[arg(long)]
    pub holdout_every: Option<usize>,
    /// Leave-half-out split, written `column=value`
    #[arg(long)]
    pub split_case: Option<String>,
    /// Mach-block split, written `column:jump:train_parts:test_parts`
    #[arg(long)]
    pub split_mach: Option<String>,
    /// Encoder channel widths, lowest stage first, e.g. 8,16,32,64,128
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Rows per window
    #[arg(long)]
    pub window: Option<usize>,
    /// Offset between consecutive training windows
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Dropout probability on the attention weights
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Disjoint padded chunks instead of overlapping windows
    #[arg(long)]
    pub no_sliding_window: bool,
    /// Drop the bottleneck self-attention
    #[arg(long)]
    pub no_attention: bool,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Windows per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stagnant epochs before the learning rate halves
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    /// Checkpoint path (default: <out>/checkpoints/model.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Input CSV with the model's state columns and low-fidelity responses
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Prediction CSV
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Truth CSV; rows must line up with the prediction table
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Explicit prediction column (default: `<r>_fused`, then `<r>`)
    #[arg(long)]
    pub pred_col: Option<String>,
    /// Explicit truth column (default: every response column)
    #[arg(long)]
    pub truth_col: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct UqArgs {
    /// Raw high-fidelity CSV
    #[arg(long)]
    pub hf: Option<PathBuf>,
    /// Fused database CSV produced by `infer`
    #[arg(long)]
    pub fused: Option<PathBuf>,
    /// Confidence level is 1 - alpha
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Inducing-point count for the fused surface (default: exact inference)
    #[arg(long)]
    pub inducing: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Per-command tables of the TOML config file; every key mirrors the flag of
/// the same name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthFile,
    #[serde(default)]
    pub align: AlignFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub infer: InferFile,
    #[serde(default)]
    pub evaluate: EvaluateFile,
    #[serde(default)]
    pub uq: UqFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub kind: Option<String>,
    pub n_lf: Option<usize>,
    pub n_hf: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignFile {
    pub lf: Option<PathBuf>,
    pub hf: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub holdout_every: Option<usize>,
    pub split_case: Option<String>,
    pub split_mach: Option<String>,
    pub channels: Option<Vec<usize>>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub sliding_window: Option<bool>,
    pub attention: Option<bool>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub patience: Option<usize>,
    pub decay_factor: Option<f64>,
    pub min_delta: Option<f64>,
    pub min_lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferFile {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub pred_col: Option<String>,
    pub truth_col: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqFile {
    pub hf: Option<PathBuf>,
    pub fused: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub inducing: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthConfig {
    pub kind: String,
    pub n_lf: usize,
    pub n_hf: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignConfig {
    pub lf: PathBuf,
    pub hf: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainCliConfig {
    pub data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_data: Option<PathBuf>,
    pub holdout_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_case: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_mach: Option<String>,
    pub channels: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    pub heads: usize,
    pub dropout: f64,
    pub sliding_window: bool,
    pub attention: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub patience: usize,
    pub decay_factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateConfig {
    pub pred: PathBuf,
    pub truth: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_col: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_col: Option<String>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct UqConfig {
    pub hf: PathBuf,
    pub fused: PathBuf,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inducing: Option<usize>,
    pub out: PathBuf,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("malformed config {}", p.display()))
        }
    }
}

fn resolve_out(flag: &Option<PathBuf>, file: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| file.clone())
        .or_else(|| env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn require<T>(name: &str, flag: Option<T>, file: Option<T>) -> Result<T> {
    flag.or(file)
        .with_context(|| format!("--{name} is required (flag or config file)"))
}

pub fn resolve_synth(args: &SynthArgs, file: &FileConfig) -> Result<SynthConfig> {
    Ok(SynthConfig {
        kind: require("kind", args.kind.clone(), file.synth.kind.clone())?,
        n_lf: require("n-lf", args.n_lf, file.synth.n_lf)?,
        n_hf: require("n-hf", args.n_hf, file.synth.n_hf)?,
        noise: args.noise.or(file.synth.noise).unwrap_or(0.0),
        seed: args.seed.or(file.synth.seed).unwrap_or(42),
        out: resolve_out(&args.common.out, &file.out),
    })
}

pub fn resolve_align(args: &AlignArgs, file: &FileConfig) -> Result<AlignConfig> {
    Ok(AlignConfig {
        lf: require("lf", args.lf.clone(), file.align.lf.clone())?,
        hf: require("hf", args.hf.clone(), file.align.hf.clone())?,
        out: resolve_out(&args.common.out, &file.out),
    })
}

pub fn resolve_train(args: &TrainArgs, file: &FileConfig) -> Result<TrainCliConfig> {
    let f = &file.train;
    Ok(TrainCliConfig {
        data: require("data", args.data.clone(), f.data.clone())?,
        test_data: args.test_data.clone().or_else(|| f.test_data.clone()),
        holdout_every: args.holdout_every.or(f.holdout_every).unwrap_or(0),
        split_case: args.split_case.clone().or_else(|| f.split_case.clone()),
        split_mach: args.split_mach.clone().or_else(|| f.split_mach.clone()),
        channels: args
            .channels
            .clone()
            .or_else(|| f.channels.clone())
            .unwrap_or_else(|| vec![8, 16, 32, 64, 128]),
        window: args.window.or(f.window).unwrap_or(112),
        stride: args.stride.or(f.stride).unwrap_or(14),
        heads: args.heads.or(f.heads).unwrap_or(1),
        dropout: args.dropout.or(f.dropout).unwrap_or(0.1),
        sliding_window: if args.no_sliding_window {
            false
        } else {
            f.sliding_window.unwrap_or(true)
        },
        attention: if args.no_attention {
            false
        } else {
            f.attention.unwrap_or(true)
        },
        lr: args.lr.or(f.lr).unwrap_or(5e-4),
        epochs: args.epochs.or(f.epochs).unwrap_or(500),
        batch: args.batch.or(f.batch).unwrap_or(64),
        seed: args.seed.or(f.seed).unwrap_or(42),
        patience: args.patience.or(f.patience).unwrap_or(15),
        decay_factor: args.decay_factor.or(f.decay_factor).unwrap_or(0.5),
        min_delta: args.min_delta.or(f.min_delta).unwrap_or(1e-6),
        min_lr: args.min_lr.or(f.min_lr).unwrap_or(1e-6),
        out: resolve_out(&args.common.out, &file.out),
    })
}

pub fn resolve_infer(args: &InferArgs, file: &FileConfig) -> Result<InferConfig> {
    let out = resolve_out(&args.common.out, &file.out);
    Ok(InferConfig {
        model: args
            .model
            .clone()
            .or_else(|| file.infer.model.clone())
            .unwrap_or_else(|| out.join("checkpoints").join("model.json")),
        data: require("data", args.data.clone(), file.infer.data.clone())?,
        out,
    })
}

pub fn resolve_evaluate(args: &EvaluateArgs, file: &FileConfig) -> Result<EvaluateConfig> {
    let f = &file.evaluate;
    Ok(EvaluateConfig {
        pred: require("pred", args.pred.clone(), f.pred.clone())?,
        truth: require("truth", args.truth.clone(), f.truth.clone())?,
        pred_col: args.pred_col.clone().or_else(|| f.pred_col.clone()),
        truth_col: args.truth_col.clone().or_else(|| f.truth_col.clone()),
        out: resolve_out(&args.common.out, &file.out),
    })
}

pub fn resolve_uq(args: &UqArgs, file: &FileConfig) -> Result<UqConfig> {
    let f = &file.uq;
    Ok(UqConfig {
        hf: require("hf", args.hf.clone(), f.hf.clone())?,
        fused: require("fused", args.fused.clone(), f.fused.clone())?,
        alpha: args.alpha.or(f.alpha).unwrap_or(0.05),
        inducing: args.inducing.or(f.inducing),
        out: resolve_out(&args.common.out, &file.out),
    })
}

/// Writes the resolved configuration next to the run's other reports. The
/// file is a replayable record, so it carries no timestamps.
pub fn write_echo<T: Serialize>(out: &Path, command: &str, cfg: &T) -> Result<()> {
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    let body = toml::to_string_pretty(cfg).context("serialize resolved config")?;
    let path = dir.join(format!("{command}_config.toml"));
    fs::write(&path, format!("command = \"{command}\"\n{body}"))
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Appends the wall time to the run log. Timing lives only here so every
/// other artifact stays byte-reproducible.
pub fn log_run(out: &Path, command: &str, wall_secs: f64) -> Result<()> {
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    writeln!(f, "{command} wall_time_s={wall_secs:.3}")?;
    Ok(())
}
