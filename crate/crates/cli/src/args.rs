use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use avloc::synthdata::SynthConfig;
use avloc::trainer::{Mode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "avloc", version, about = "Sound source localization with hard-positive mining")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Run stage 1, mining and stage 2.
    Train(TrainArgs),
    /// Mine hard positives from a checkpoint or a feature file.
    Mine(MineArgs),
    /// Score a checkpoint with cIoU / AUC.
    Eval(EvalArgs),
    /// Sweep K from a shared stage-1 checkpoint.
    AblateK(AblateArgs),
    /// Compare training modes from a shared stage-1 checkpoint.
    Compare(CompareArgs),
    /// Write response maps as PGM images.
    ExportMaps(ExportArgs),
    /// Compare analytic and finite-difference gradients on tiny instances.
    GradCheck(GradCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Mine(_) => "mine",
            Command::Eval(_) => "eval",
            Command::AblateK(_) => "ablate-k",
            Command::Compare(_) => "compare",
            Command::ExportMaps(_) => "export-maps",
            Command::GradCheck(_) => "grad-check",
        }
    }
}

/// Only listed so that `--help` shows it; the file is expanded before parsing.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// File of `key=value` lines, one per flag; command-line flags win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Number of latent classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub image_height: usize,
    #[arg(long, default_value_t = 32)]
    pub image_width: usize,
    #[arg(long, default_value_t = 8)]
    pub audio_height: usize,
    #[arg(long, default_value_t = 8)]
    pub audio_width: usize,
    /// Side of the square object, in pixels.
    #[arg(long, default_value_t = 16)]
    pub object_size: usize,
    /// Silent objects of other classes per image.
    #[arg(long, default_value_t = 1)]
    pub distractors: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            n_samples: self.n,
            n_classes: self.classes,
            image_size: (self.image_height, self.image_width),
            audio_size: (self.audio_height, self.audio_width),
            object_size: self.object_size,
            distractors: self.distractors,
            noise_std: self.noise,
            seed: self.seed,
        }
    }
}

/// Training hyperparameters shared by every command that trains.
#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 30)]
    pub epochs_stage1: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs_stage2: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Pseudo-mask threshold.
    #[arg(long, default_value_t = 0.65)]
    pub epsilon: f64,
    /// Pseudo-mask temperature.
    #[arg(long, default_value_t = 0.03)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Treat the pseudo masks as constants in the gradient.
    #[arg(long)]
    pub stop_grad_mask: bool,
    /// Re-mine every this many stage-2 epochs (0 = mine once).
    #[arg(long, default_value_t = 0)]
    pub remine_every: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Vision patch size.
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
}

impl TrainOpts {
    pub fn to_config(&self, mode: Mode, k: usize) -> TrainConfig {
        TrainConfig {
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            epsilon: self.epsilon,
            tau: self.tau,
            k,
            seed: self.seed,
            stop_grad_mask: self.stop_grad_mask,
            remine_every: self.remine_every,
            mode,
            channels: self.channels,
            patch: self.patch,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write encoded features using this checkpoint.
    #[arg(long, value_name = "PARAMS")]
    pub features_from: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = Mode::Hp)]
    pub mode: Mode,
    /// Mined positives per modality.
    #[arg(long, default_value_t = 19)]
    pub k: usize,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Checkpoint to encode `--data` with.
    #[arg(long, requires = "data", conflicts_with = "features")]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Precomputed feature file.
    #[arg(long, required_unless_present = "params")]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = 19)]
    pub k: usize,
    /// Index CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset directory; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// K values to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,19,60,150")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = Mode::Hp)]
    pub mode: Mode,
    /// Sweep CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,hp,random_hp")]
    pub modes: Vec<Mode>,
    #[arg(long, default_value_t = 19)]
    pub k: usize,
    /// Comparison CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `audio_id:image_id` pairs; defaults to every sample with its own audio.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pub pairs: Vec<(usize, usize)>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Seed or inclusive range `a..b`.
    #[arg(long, default_value = "1..20", value_parser = parse_seed_range)]
    pub seed: (u64, u64),
    #[arg(long)]
    pub stop_grad_mask: bool,
    /// Fail when the maximum relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    pub config: ConfigArg,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected audio_id:image_id, got {s:?}"))?;
    let id = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad sample id {t:?}"));
    Ok((id(a)?, id(b)?))
}

pub fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed {t:?}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok((lo, hi))
}
