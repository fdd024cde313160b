use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tuberel", version, about = "Video relation detection over tubelet pairs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the defaults, `--config` or a checkpoint's
/// stored configuration.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Embedding size D.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Number of primitives K.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Encoding variant: literal, aggregate or avgpool.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Stage-1 window size.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Frames sampled per span in stage 2 and search.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets.
    Gen {
        /// separable, compositional, duration or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Custom scenario file (JSON) instead of a fixed suite.
        #[arg(long, conflicts_with = "suite")]
        scenario: Option<PathBuf>,
    },
    /// Train the interactivity model.
    TrainStage1 {
        #[arg(long)]
        train: PathBuf,
        /// External feature files (one JSON object per video and channel)
        /// or directories of them.
        #[arg(long, num_args = 1..)]
        externals: Vec<PathBuf>,
    },
    /// Score every pair and write interaction proposals.
    Propose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        /// External feature files (one JSON object per video and channel)
        /// or directories of them.
        #[arg(long, num_args = 1..)]
        externals: Vec<PathBuf>,
    },
    /// Train the predicate model on top of a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        train: PathBuf,
        /// Proposals on the training split; GT spans are always used.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
        /// Train the head only.
        #[arg(long)]
        freeze_trunk: bool,
        /// External feature files (one JSON object per video and channel)
        /// or directories of them.
        #[arg(long, num_args = 1..)]
        externals: Vec<PathBuf>,
    },
    /// Assemble scored relation triplets from proposals.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Predicates kept per proposal.
        #[arg(long)]
        top_p: Option<usize>,
        /// External feature files (one JSON object per video and channel)
        /// or directories of them.
        #[arg(long, num_args = 1..)]
        externals: Vec<PathBuf>,
    },
    /// Tagging and detection metrics for a detection dump.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Also write the duration breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rank proposals by the mass they put on query primitives.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Stage-1 or stage-2 checkpoint supplying the primitives.
        #[arg(long)]
        model: PathBuf,
        /// JSON list of example frames.
        #[arg(long, required_unless_present = "primitives")]
        query: Option<PathBuf>,
        /// Comma-separated primitive indices.
        #[arg(long, value_delimiter = ',', conflicts_with = "query")]
        primitives: Option<Vec<usize>>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// External feature files (one JSON object per video and channel)
        /// or directories of them.
        #[arg(long, num_args = 1..)]
        externals: Vec<PathBuf>,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        /// Random configurations per variant and head type.
        #[arg(long, default_value_t = 20)]
        configs: u64,
    },
    /// Sweep the number of primitives.
    AblateK {
        #[command(flatten)]
        data: SuiteData,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Compare avgpool, literal and aggregate encodings.
    AblateVariant {
        #[command(flatten)]
        data: SuiteData,
    },
    /// Detection mAP per relation-duration bucket.
    DurationReport {
        #[command(flatten)]
        data: SuiteData,
        /// Evaluate an existing dump against --test instead of training.
        #[arg(long, requires = "test")]
        detections: Option<PathBuf>,
    },
}

/// Datasets for the experiment commands: explicit files, or a generated
/// suite.
#[derive(Debug, Args)]
pub struct SuiteData {
    #[arg(long)]
    pub suite: Option<String>,
    /// Seed for suite generation (defaults to --seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}
