mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Rationale data pipeline, reward scoring and numerical labs.
#[derive(Debug, Parser)]
#[command(name = "parrot", version)]
pub struct Cli {
    /// TOML config file. Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate inputs and print planned model calls without making any.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Log filter for standard error, e.g. `warn` or `parrot_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Anchored rationale generation for labelled comparisons.
    Rationalize(RationalizeArgs),
    /// Label-free consistency check; keeps rationales that recover the label.
    Filter(FilterArgs),
    /// Per-image pointwise assessments for retained rationales.
    Project(ProjectArgs),
    /// Pairwise and pointwise training files from filtered samples.
    EmitSft(EmitSftArgs),
    /// Aggregate aspect scores and normalize them per prompt group.
    Score(ScoreArgs),
    /// Accuracy of pairwise verdicts against gold labels.
    BenchPairwise(BenchArgs),
    /// Flow fine-tuning on the 2-D toy task.
    NftTrain(NftArgs),
    /// Brute-force check of the evidence lower bound on random discrete models.
    ElboCheck(ElboArgs),
    /// Generate, critique and refine a single request.
    Gcr(GcrArgs),
    /// Scripted chat and image endpoint for offline runs.
    MockServe(MockArgs),
}

#[derive(Debug, Args)]
pub struct RationalizeArgs {
    /// Labelled comparisons, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Records for comparisons that produced no sample.
    #[arg(long)]
    pub failures_out: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_pair: Option<usize>,
    /// Endpoint section to use instead of `pipeline.teacher`.
    #[arg(long)]
    pub teacher: Option<String>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Output of `rationalize`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Output of `filter`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub failures_out: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmitSftArgs {
    /// Output of `filter`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Output of `project`.
    #[arg(long)]
    pub projections: PathBuf,
    /// Defaults to `paths.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One line per prompt group with its keep or skip decision.
    #[arg(long)]
    pub groups_out: Option<PathBuf>,
    /// Prompt ids whose mean raw reward is below `reward.selection_threshold`.
    #[arg(long)]
    pub selected_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Lines with `id` and `label`; pipeline input files work as is.
    #[arg(long)]
    pub gold: PathBuf,
    /// Lines with `id` and either `verdict` or a free-text `answer`.
    #[arg(long)]
    pub verdicts: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NftArgs {
    #[arg(long)]
    pub metrics_out: PathBuf,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Start from this checkpoint instead of pretraining.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ElboArgs {
    #[arg(long, default_value_t = 200)]
    pub models: usize,
    /// Largest residual still counted as a pass.
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GcrArgs {
    #[arg(long)]
    pub request: String,
    /// Source image path or URL; switches to editing.
    #[arg(long)]
    pub source: Option<String>,
    /// Step log. The final image is written beside it.
    #[arg(long)]
    pub trace_out: PathBuf,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    /// JSON mock script.
    #[arg(long)]
    pub script: PathBuf,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub addr: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_target(false)
        .init();
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
