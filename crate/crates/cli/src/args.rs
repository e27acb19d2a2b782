use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faps_core::search::SearchMode;

#[derive(Debug, Parser)]
#[command(name = "faps", version, about = "Face alignment policy search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to every omitted block.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `search.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scheduler; overrides `search.mode`.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Seq,
    Async,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Seq => SearchMode::Sequential,
            ModeArg::Async => SearchMode::Async,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the candidate count, then one CSV row per policy.
    Space,
    /// Align one image to one policy's template.
    Align(AlignArgs),
    /// Run the population search; writes events.jsonl and result.json.
    Search,
    /// Train every candidate; writes grid.csv and result.json.
    Grid,
    /// Convert an event log into a per-epoch trajectory CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignPath {
    Direct,
    Canvas,
    Both,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Binary PGM or PPM.
    #[arg(long)]
    pub image: PathBuf,
    /// CSV rows `index,x,y`, one per template landmark.
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Policy as `m,delta`.
    #[arg(long, allow_hyphen_values = true)]
    pub policy: String,
    #[arg(long, value_enum, default_value = "canvas")]
    pub path: AlignPath,
    /// With `--path both`, print the max and mean pixel difference.
    #[arg(long)]
    pub report: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Event log written by `faps search`.
    #[arg(long)]
    pub log: PathBuf,
}
