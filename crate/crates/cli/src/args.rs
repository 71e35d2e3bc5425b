use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "abm", version, about = "Handwritten math expression recognizer with mutually distilled inverse decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset (images/, labels.txt, vocab.txt).
    GenData(GenDataArgs),
    /// Train one model, or one per setting when given comma lists.
    Train(TrainArgs),
    /// Decode a labelled dataset and print the evaluation report.
    Eval(EvalArgs),
    /// Recognize one image and print its token string.
    Infer(InferArgs),
    /// Write the attention map of every decoding step.
    DumpAttention(DumpAttentionArgs),
    /// Write teacher-forced pre-classifier features as CSV.
    DumpFeatures(DumpFeaturesArgs),
    /// Finite-difference check of every parameter of a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub max_depth: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation dataset; otherwise `val_fraction` of --data is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Output directory for checkpoints, logs and results.
    #[arg(long)]
    pub out: PathBuf,
    /// File of `key=value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub variant: Option<String>,
    /// One value or a comma list (sweep).
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long = "temp")]
    pub temperature: Option<f64>,
    /// Small coverage kernel size(s), paired with --kl-kernel.
    #[arg(long)]
    pub ks: Option<String>,
    /// Large coverage kernel size(s); 0 means single scale.
    #[arg(long = "kl-kernel")]
    pub kl_kernel: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Branch to decode with; defaults to the inference branch.
    #[arg(long)]
    pub branch: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Also write the report as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write `id<TAB>prediction` lines here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub branch: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DumpAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub branch: Option<String>,
    /// Also write a PGM heatmap per step.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DumpFeaturesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub branch: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `key=value` file; variant, lambda, temperature and seed are honoured,
    /// the model itself is always the tiny double-precision one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check every coordinate instead of sampling large tensors.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Negative control: corrupt the tanh derivative.
    #[arg(long, hide = true)]
    pub sabotage_tanh: bool,
}
