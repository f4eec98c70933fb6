use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rockseg::config::ExperimentConfig;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rockseg", version, about = "Segmentation and classification of micro-CT rock slices")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key after parsing, e.g. `--set finetune.train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory (config key `output`).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// More logging; repeat for debug output.
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert raw TIFF scans into per-slice array files.
    #[command(after_help = ExperimentConfig::keys_help(&[]))]
    Convert(ConvertArgs),
    /// Contrast normalization, NL-means denoising and optional BFE features.
    #[command(after_help = ExperimentConfig::keys_help(&["preprocess"]))]
    Preprocess(PreprocessArgs),
    /// Training-free segmentation (multiclass Otsu, K-means, fuzzy C-means).
    #[command(after_help = ExperimentConfig::keys_help(&["segment"]))]
    Segment(SegmentArgs),
    /// Per-pixel feature maps from BFE or a transformer backbone.
    #[command(after_help = ExperimentConfig::keys_help(&["extract"]))]
    Extract(ExtractArgs),
    /// kNN or linear probe on frozen features over a catalog split.
    #[command(after_help = ExperimentConfig::keys_help(&["split", "probe"]))]
    Probe(ProbeArgs),
    /// Train a segmentation model on a catalog split and evaluate it.
    #[command(after_help = ExperimentConfig::keys_help(&["split", "finetune"]))]
    Finetune(FinetuneArgs),
    /// Evaluate a saved checkpoint on the test sample.
    #[command(after_help = ExperimentConfig::keys_help(&["split", "visualize"]))]
    Evaluate(EvaluateArgs),
    /// Repeated-seed experiments: data regimes, ablation, probing, classical, classification.
    #[command(after_help = ExperimentConfig::keys_help(&["split", "segment", "sweep", "ablation", "probing", "classification"]))]
    Sweep(SweepArgs),
    /// Figures: t-SNE, PCA, confusion matrices, mask galleries, sweep curves.
    #[command(after_help = ExperimentConfig::keys_help(&["visualize", "extract"]))]
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Directory of TIFF files (multi-page or one page per file).
    #[arg(long)]
    input: PathBuf,
    /// Treat pixel values as class labels instead of intensities.
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// A slice (.npy) or a directory of slices.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    no_denoise: bool,
    /// Also write BFE feature maps.
    #[arg(long)]
    bfe: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = ["otsu", "kmeans", "fcm"])]
    method: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    /// GT masks with the same file names; enables report.json scoring.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// carbonates, sandstones or indexed (default).
    #[arg(long, default_value = "indexed")]
    palette: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Head {
    Linear,
    Conv,
    Knn,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    /// bfe or dinov2-{small,base,large}.
    #[arg(long)]
    features: Option<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// bfe or dinov2-{small,base,large}.
    #[arg(long)]
    features: Option<String>,
    #[arg(long, value_enum)]
    head: Option<Head>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// vit (default), unet-small, unet-large or resnet152.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_parser = ["small", "base", "large"])]
    backbone: Option<String>,
    #[arg(long, value_enum)]
    head: Option<Head>,
    /// LoRA rank; 0 freezes the backbone.
    #[arg(long)]
    lora_r: Option<usize>,
    #[arg(long, value_parser = ["4bit", "none"])]
    quant: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    DataRegime,
    Ablation,
    Probing,
    Classical,
    Classification,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "data-regime")]
    kind: SweepKind,
    /// Reuse stored runs with matching config hashes.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FigureKind {
    Tsne,
    Pca,
    Confusion,
    Gallery,
    Sweep,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long, value_enum)]
    kind: FigureKind,
    /// report.json for `confusion`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Slice (.npy) for `pca`; image directory for `gallery`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// GT mask directory for `gallery`.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Prediction mask directories for `gallery` (repeatable).
    #[arg(long)]
    pred: Vec<PathBuf>,
    /// Column captions for `gallery`, comma separated.
    #[arg(long)]
    captions: Option<String>,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value = "carbonates")]
    palette: String,
    /// Run store for `sweep` (defaults to the output directory).
    #[arg(long)]
    runs: Option<PathBuf>,
}

fn error_json(kind: &str, message: &str, code: u8) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim(), 2));
            return ExitCode::from(2);
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_usage() { 2 } else { 1 };
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            ExitCode::from(code)
        }
    }
}
