use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use defectlab_core::active_learning::{CheckpointRetention, FineTuneScope, Strategy};
use defectlab_core::classifier::{BackboneSpec, ModelConfig, OptimizerKind};
use defectlab_core::dataset::{Layout, Split};

#[derive(Debug, Parser)]
#[command(name = "defectlab", version, about = "Active-learning workbench for binary image defect classification")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON file supplying any flag by name; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from a dataset directory.
    Scan(ScanArgs),
    /// Train on the train split and evaluate on validation.
    Train(TrainArgs),
    /// Grid search over optimizer hyperparameters.
    Sweep(SweepArgs),
    /// Run an active-learning session.
    Al(AlArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Machine-label a split with a trained checkpoint.
    Autolabel(AutolabelArgs),
    /// Generate a synthetic two-class dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LayoutArg {
    SplitDirs,
    Flat,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::SplitDirs => Layout::SplitDirs,
            LayoutArg::Flat => Layout::Flat,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
    Rmsprop,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Rmsprop => OptimizerKind::Rmsprop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Uncertainty,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uncertainty => Strategy::Uncertainty,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Cumulative,
    BatchOnly,
}

impl From<ScopeArg> for FineTuneScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Cumulative => FineTuneScope::Cumulative,
            ScopeArg::BatchOnly => FineTuneScope::BatchOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RetentionArg {
    All,
    Last,
    Final,
}

impl From<RetentionArg> for CheckpointRetention {
    fn from(r: RetentionArg) -> Self {
        match r {
            RetentionArg::All => CheckpointRetention::All,
            RetentionArg::Last => CheckpointRetention::Last,
            RetentionArg::Final => CheckpointRetention::Final,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    /// ImageNet VGG16; weights from --weights or DEFECTLAB_VGG16_WEIGHTS.
    Vgg16,
    /// Narrow VGG16 with fixed generated filters, for desk-scale runs.
    Compact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Oracle,
    Serve,
}

fn parse_widths(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated widths, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("width `{v}` is not a positive integer"))
    };
    Ok((parse(a)?, parse(b)?))
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = BackboneArg::Vgg16)]
    pub backbone: BackboneArg,
    /// Safetensors file with torchvision VGG16 feature weights.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Channel width of the first compact block.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub base_width: u64,
    #[arg(long, default_value_t = 0)]
    pub backbone_seed: u64,
    /// Square input side; defaults to 224 for vgg16 and 32 for compact.
    #[arg(long, value_parser = clap::value_parser!(u64).range(32..))]
    pub input_side: Option<u64>,
    /// Hidden layer widths of the classification head.
    #[arg(long, default_value = "256,64", value_parser = parse_widths)]
    pub head: (usize, usize),
    /// Train the convolutional layers too.
    #[arg(long)]
    pub unfreeze: bool,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        let (backbone, side) = match self.backbone {
            BackboneArg::Vgg16 => (
                BackboneSpec::Vgg16Imagenet {
                    weights: self.weights.clone(),
                },
                224,
            ),
            BackboneArg::Compact => (BackboneSpec::compact(self.base_width as usize, self.backbone_seed), 32),
        };
        ModelConfig {
            backbone,
            freeze_backbone: !self.unfreeze,
            head_widths: self.head,
            l2_lambda: self.l2,
            input_side: self.input_side.map_or(side, |s| s as usize),
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_enum, default_value_t = LayoutArg::SplitDirs)]
    pub layout: LayoutArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON; defaults to the checkpoint path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON grid; the full default grid when omitted.
    #[arg(long, value_name = "FILE")]
    pub grid: Option<PathBuf>,
    /// Parallel cells; 0 means one per core.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Completed cells are cached here and skipped on rerun.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Report CSV; a .txt table and a per-cell CSV are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Oracle)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub query_size: u64,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_queries: u64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Uncertainty)]
    pub strategy: StrategyArg,
    /// Session directory; an existing session there is resumed.
    #[arg(long)]
    pub session_dir: PathBuf,
    /// Stop when the last N validation accuracies span at most --stop-eps.
    #[arg(long, requires = "stop_eps", value_parser = clap::value_parser!(u64).range(1..))]
    pub stop_window: Option<u64>,
    #[arg(long, requires = "stop_window")]
    pub stop_eps: Option<f64>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub fine_tune_epochs: u64,
    #[arg(long, value_enum, default_value_t = ScopeArg::Cumulative)]
    pub scope: ScopeArg,
    /// Ids labeled from ground truth before the first query.
    #[arg(long, default_value_t = 0)]
    pub seed_size: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Logical timestamps, making session files byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_enum, default_value_t = RetentionArg::All)]
    pub retention: RetentionArg,
    /// History plot; defaults to history.svg in the session directory.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Also run the other strategy and compare labels needed to reach --target.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value_t = 0.95)]
    pub target: f64,
    /// Seeds averaged in --compare runs, starting at --seed.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Shared token required in the x-api-token header.
    #[arg(long)]
    pub token: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AutolabelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Labeled manifest CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Report JSON; defaults to the output path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 150)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub side: u32,
    #[arg(long, default_value_t = 0.05)]
    pub margin: f64,
    #[arg(long, default_value_t = 6.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also scan the result into this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
