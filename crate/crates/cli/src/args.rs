use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ttvprune", version, about = "Visual-token pruning driven by token transition variation")]
pub struct Cli {
    /// Directory for report files.
    #[arg(long, global = true, env = "TTVPRUNE_OUT_DIR", default_value = "ttvprune-out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the toy transformer with a pruning schedule and write stage reports.
    Simulate(SimulateArgs),
    /// Histogram retained positions over a batch of samples.
    BiasStats(BiasArgs),
    /// Analytical FLOPs of a schedule on a model preset.
    Flops(FlopsArgs),
    /// Compare selections across an ablation grid.
    Ablate(AblateArgs),
    /// Replay a schedule on a recorded trace.
    Score(ScoreArgs),
    /// Print a trace's manifest without reading its payload.
    Inspect(InspectArgs),
    /// Record an unpruned toy forward pass as a trace file.
    ExportToy(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    /// Schedule preset: transprune-high or transprune-low.
    #[arg(long, default_value = "transprune-high")]
    pub preset: String,
    /// TOML schedule file; overrides --preset.
    #[arg(long)]
    pub schedule_file: Option<PathBuf>,
    /// Retained ratios per stage, comma separated. A single value applies to every stage.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// ttv_and_iga, ttv_only, iga_only, magnitude_only or direction_only.
    #[arg(long)]
    pub mode: Option<String>,
    /// unit_sum, none or softmax.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Use only each pruning layer's own TTV.
    #[arg(long)]
    pub no_accumulate: bool,
    /// Read TTV this many layers below each accumulation layer.
    #[arg(long)]
    pub accumulation_shift: Option<usize>,
    /// mean or max.
    #[arg(long)]
    pub head_reduction: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    pub system_tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub image_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub instruction_tokens: usize,
    #[arg(long, default_value_t = 14)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 176)]
    pub d_ffn: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Seed for weights and token ids.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// float32 or float64.
    #[arg(long, default_value = "float32")]
    pub dtype: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Also write SVG heatmaps of the transition statistics.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasSource {
    /// Content-permuted synthetic traces.
    Synthetic,
    /// Toy runtime with random token ids per sample.
    Toy,
    /// Trace files given with --trace.
    Traces,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Content,
    EndHeavy,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// ttv, iga or combined.
    #[arg(long, default_value = "ttv")]
    pub criterion: String,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub source: BiasSource,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image tokens per synthetic or toy sample.
    #[arg(long, default_value_t = 32)]
    pub image_tokens: usize,
    /// Instruction-attention pattern of synthetic samples.
    #[arg(long, value_enum, default_value = "content")]
    pub profile: Profile,
    /// End weighting of the end-heavy profile.
    #[arg(long, default_value_t = 4.0)]
    pub strength: f64,
    /// Width of the reported null band in binomial standard deviations.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// llava15-7b or llava-next-7b.
    #[arg(long, default_value = "llava15-7b")]
    pub preset: String,
    /// transprune-high, transprune-low, none, or a TOML schedule file.
    #[arg(long, default_value = "transprune-high")]
    pub schedule: String,
    /// Text tokens processed alongside the image block.
    #[arg(long, default_value_t = 0)]
    pub text_tokens: usize,
    /// mac (one FLOP per multiply-accumulate) or doubled_mac.
    #[arg(long, default_value = "mac")]
    pub convention: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// accumulation, ttv-components, layer-window or alpha.
    #[arg(long)]
    pub suite: String,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Toy sequences to run (ignored with --trace).
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Trace file (.ttvt binary or .json mirror).
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Load the whole trace into memory instead of reading layer by layer.
    #[arg(long)]
    pub whole_file: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub trace: PathBuf,
    /// Print the manifest as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaptureSet {
    /// Every layer, every sub-block, attention slices everywhere.
    All,
    /// Only what the schedule reads.
    Minimal,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub toy: ToyArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub capture: CaptureSet,
    /// float16 or float32.
    #[arg(long, default_value = "float32")]
    pub storage: String,
    /// Output file; defaults to <out-dir>/toy.ttvt.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the JSON mirror instead of the binary container.
    #[arg(long)]
    pub json: bool,
}
