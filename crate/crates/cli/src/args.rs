use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use datadesign_core::familiarity::TailSide;
use datadesign_core::monitor::IngestMode;
use datadesign_core::resample::StrategyKind;

#[derive(Debug, Parser)]
#[command(name = "datadesign", version, about = "Plan, monitor and audit a dataset as it is collected")]
pub struct Cli {
    /// Project directory.
    #[arg(long, global = true, env = crate::PROJECT_ENV, default_value = ".")]
    pub project: PathBuf,
    /// Seed for every random stream (mixture init, training, splits, draws).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with default settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write the command's result as a JSON document.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create and edit the dataset plan.
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Screen a record file against the plan and append the valid records.
    Ingest(IngestArgs),
    /// Compare collected metadata with the plan.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Familiarity models, scores and review.
    #[command(subcommand)]
    Fam(FamCmd),
    /// Build and apply dataset edits.
    #[command(subcommand)]
    Resample(ResampleCmd),
    /// Reference model training and accuracy experiments.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Run the local HTTP service.
    Serve(ServeArgs),
    /// Write a static bundle of tables and chart series.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PlanCmd {
    /// Create the project (if needed) and its first plan.
    Init {
        #[arg(long)]
        name: String,
        /// JSON list of dimension drafts.
        #[arg(long)]
        dims: PathBuf,
    },
    /// Change the current plan.
    Edit {
        /// JSON list of dimension drafts to add or replace.
        #[arg(long)]
        dims: Option<PathBuf>,
        /// Dimension to remove; repeatable.
        #[arg(long)]
        remove: Vec<String>,
        #[arg(long)]
        rename: Option<String>,
        /// Plan version the edit is based on; defaults to the current one.
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Check the current plan, or a plan document.
    Validate {
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Record questionnaire answers and the team's self-reported groups.
    Reflect {
        /// JSON `{ "answers": {prompt: text}, "team": {dimension: [group]} }`.
        #[arg(long)]
        answers: Option<PathBuf>,
        /// Reference taxonomy (JSON); a built-in one is used otherwise.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Questionnaire (JSON); a built-in one is used otherwise.
        #[arg(long)]
        questionnaire: Option<PathBuf>,
        /// Ask each prompt on the terminal.
        #[arg(long)]
        interactive: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PerRecord,
    AllOrNothing,
}

impl From<ModeArg> for IngestMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerRecord => IngestMode::PerRecord,
            ModeArg::AllOrNothing => IngestMode::AllOrNothing,
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// CSV with `id,wave[,session],<dimension>...`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum, default_value = "per-record")]
    pub mode: ModeArg,
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Per-dimension counts and proportions.
    Snapshot {
        #[arg(long)]
        wave: Option<u32>,
    },
    /// Distance between observed and expected distributions.
    Divergence {
        #[arg(long)]
        wave: Option<u32>,
        #[arg(long)]
        tv: Option<f64>,
        /// EMD threshold in bin spacings.
        #[arg(long)]
        emd_spacings: Option<f64>,
    },
    /// Under-sampled intersections.
    Gaps {
        /// Comma-separated dimensions; all plan dimensions by default.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<String>,
        #[arg(long)]
        wave: Option<u32>,
        #[arg(long)]
        min_count: Option<usize>,
        #[arg(long)]
        min_ratio: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Least,
    Most,
}

impl From<SideArg> for TailSide {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Least => TailSide::Least,
            SideArg::Most => TailSide::Most,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum FamCmd {
    /// Fit a familiarity model and score the fitted rows.
    Fit {
        /// Activations: CSV, or the JSON descriptor of the binary format.
        #[arg(long)]
        activations: PathBuf,
        #[arg(long, default_value = "penultimate")]
        layer_tag: String,
        /// PCA dimension (default min(50, M, N-1)).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Fit only; keep the previous scores.
        #[arg(long)]
        no_score: bool,
    },
    /// Score activations with the current model and make them current.
    Score {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long, default_value = "penultimate")]
        layer_tag: String,
        /// Also export the scores as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Ids in one tail of the current scores, most extreme first.
    Tail {
        #[arg(long, default_value_t = 0.001)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "least")]
        side: SideArg,
    },
    /// Open or update the review queue of least familiar samples.
    Review {
        #[arg(long, default_value_t = 0.001)]
        fraction: f64,
        /// CSV `id,verdict` or JSON `{id: verdict}`; verdicts are noisy, rare, ok, undecided.
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Ask for each undecided entry on the terminal.
        #[arg(long)]
        interactive: bool,
        /// Remove the entries marked noisy from the training set.
        #[arg(long)]
        apply: bool,
    },
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Metadata dimensions to match on (default: all plan dimensions).
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<String>,
    /// Per-dimension mismatch weight, `dim=weight`; repeatable.
    #[arg(long)]
    pub weight: Vec<String>,
    /// Candidate records (CSV); defaults to ingested records outside the training set.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ResampleCmd {
    /// Build a substitution plan and save it as pending.
    Build {
        #[arg(long, default_value = "topk_swap")]
        strategy: StrategyKind,
        #[arg(long, default_value_t = 0.001)]
        fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        window: f64,
        #[command(flatten)]
        matching: MatchArgs,
    },
    /// Apply the pending plan, or a plan document, as a new dataset version.
    Apply {
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Write one plan per strategy and fraction.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0.005)]
        window: f64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        matching: MatchArgs,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Feature matrix CSV `id,a0,...`.
    #[arg(long)]
    pub features: PathBuf,
    /// Label CSV `id,label`.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// `SEEDSxRUNS`, e.g. `3x3`; a single run by default.
    #[arg(long)]
    pub repeats: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Train a reference model.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Train on this dataset version instead of every labelled row.
        #[arg(long)]
        dataset: Option<u64>,
        #[arg(long)]
        model_out: PathBuf,
        /// Write penultimate activations of every feature row (CSV).
        #[arg(long)]
        activations_out: Option<PathBuf>,
    },
    /// Leave-one-group-out training and the per-group accuracy matrix.
    Loo {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Grouping dimension.
        #[arg(long)]
        category: String,
        /// Matrix rows; defaults to the grouping dimension.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<String>,
        /// Experiment name (default `loo-<category>`).
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Per-group accuracy of saved models on a test set.
    Matrix {
        #[command(flatten)]
        data: DataArgs,
        /// `name=model.json`; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Newline-separated test ids; every labelled row outside the latest dataset by default.
        #[arg(long)]
        test_ids: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<String>,
        /// Record the matrix as an experiment.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Cell-wise difference between two recorded experiments.
    Delta {
        #[arg(long)]
        before: String,
        #[arg(long)]
        after: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: SocketAddr,
    /// Require `Authorization: Bearer <token>`.
    #[arg(long)]
    pub token: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Serve a built dashboard from this directory.
    #[arg(long)]
    pub with_ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Score histogram bins.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}
