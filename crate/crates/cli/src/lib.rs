//! `planksynth` command-line front end.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;

use clap::{Args, Parser, Subcommand};

pub use config::{GenerateConfig, PoolSource};

/// Exit status for a bad invocation or invalid configuration.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for unreadable, inconsistent or failing data.
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "planksynth", version, about = "Pseudo community image synthesis and instance-segmentation evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labeled PCI dataset.
    Generate(GenerateArgs),
    /// Cut an image into overlapping tiles.
    Tile(TileArgs),
    /// Lift per-tile detections into the full frame and merge duplicates.
    Merge(MergeArgs),
    /// Score detections against ground truth (COCO-style mask AP).
    Evaluate(EvaluateArgs),
    /// Draw ground truth or detections over an image.
    Render(RenderArgs),
    /// Check encoder patch / pyramid / MAE geometry.
    Encgeom(EncgeomArgs),
    /// Summarize a manifest.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// JSON run configuration (`pci`, `pools`, `taxonomy`, `count`).
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Number of images; overrides the config.
    #[arg(long)]
    count: Option<u64>,
    /// Overrides `pci.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TileArgs {
    #[arg(long)]
    image: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 1000)]
    tile: u32,
    #[arg(long, default_value_t = 200)]
    overlap: u32,
    /// Also write each tile's share of this manifest's ground truth as
    /// detections (score 1).
    #[arg(long, requires = "image_id")]
    gt: Option<std::path::PathBuf>,
    /// Image id of `--image` in `--gt`.
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct MergeArgs {
    /// `tiles.json` written by `tile`.
    #[arg(long)]
    tiles: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Image id for the merged detections; defaults to the one in tiles.json.
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    iou_merge: f64,
    /// Containment threshold, or `off` for IoU-only merging.
    #[arg(long, default_value = "0.9")]
    containment: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    gt: std::path::PathBuf,
    #[arg(long)]
    dt: std::path::PathBuf,
    /// JSON EvalConfig; flags below override it.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// `start:step:stop` (inclusive), a single value, or a comma list.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    max_dets: Option<usize>,
    /// Write the full result (including matched pairs) here as JSON.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    image: std::path::PathBuf,
    #[arg(long)]
    gt: std::path::PathBuf,
    #[arg(long)]
    dt: Option<std::path::PathBuf>,
    /// Defaults to the manifest image whose file name matches `--image`.
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long)]
    out: std::path::PathBuf,
    /// JSON OverlayStyle; flags below override it.
    #[arg(long)]
    style: Option<std::path::PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_contours: bool,
    #[arg(long)]
    no_labels: bool,
}

#[derive(Args, Debug)]
struct EncgeomArgs {
    /// Run the full geometry suite; exit 2 if any check fails.
    #[arg(long)]
    check: bool,
    /// JSON EncoderSpec.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    manifest: std::path::PathBuf,
    #[arg(long)]
    json: bool,
}

/// A failed command: exit status plus the error chain.
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.code == EXIT_USAGE { "usage" } else { "data" };
        let chain: Vec<String> = self.error.chain().map(|e| e.to_string()).collect();
        // One line, whatever the messages contain.
        write!(f, "error[{kind}]: {}", chain.join(": ").replace(['\n', '\r'], " "))
    }
}

pub(crate) trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_USAGE,
            error: e.into(),
        })
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_DATA,
            error: e.into(),
        })
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Tile(a) => commands::tile(a),
        Command::Merge(a) => commands::merge(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Render(a) => commands::render(a),
        Command::Encgeom(a) => commands::encgeom(a),
        Command::Stats(a) => commands::stats(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code
        }
    }
}
