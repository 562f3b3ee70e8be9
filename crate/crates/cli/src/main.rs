use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod exit;

#[derive(Parser, Debug)]
#[command(
    name = "alacarte",
    version,
    about = "Per-source prompt tuning with composition at inference time"
)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed: the training seed for single runs, the only
    /// seed for scenario runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Run in 64-bit floating point.
    #[arg(long, global = true)]
    f64: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a backbone on the synthetic proxy task and save it.
    Pretrain {
        /// Override the number of pretraining epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one source's prompt and add it to a pool.
    TrainPrompt(TrainPromptArgs),
    /// Print the composed class distribution for one image.
    Compose(ComposeArgs),
    /// Accuracy of a composition on the test split.
    Eval(EvalArgs),
    /// Accuracy against the number of shards.
    ShardSweep(ScenarioArgs),
    /// Remove sources one at a time and re-evaluate.
    ForgetCurve(ScenarioArgs),
    /// Class-incremental episodes.
    Cil(ScenarioArgs),
    /// Domain-incremental episodes.
    Dil(ScenarioArgs),
    /// Cost of composition against naive concatenation and ensembling.
    Bench(ScenarioArgs),
    /// Inspect or edit a prompt pool.
    Pool {
        #[command(subcommand)]
        action: PoolAction,
    },
}

#[derive(Args, Debug)]
struct Data {
    /// CIFAR-10 binary batch used as the training split instead of the
    /// synthetic corpus.
    #[arg(long)]
    train_data: Option<PathBuf>,

    /// CIFAR-10 binary batch used as the test split.
    #[arg(long)]
    test_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainPromptArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Pool directory; created when missing.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    source: String,
    /// Train on shard `shard` of `of` uniform shards.
    #[arg(long, requires = "of", conflicts_with = "episode")]
    shard: Option<usize>,
    /// Train on class episode `episode` of `of`.
    #[arg(long, requires = "of")]
    episode: Option<usize>,
    #[arg(long)]
    of: Option<usize>,
    /// Also build K-means prototypes with this many centroids.
    #[arg(long)]
    prototypes: Option<usize>,
    #[command(flatten)]
    data: Data,
}

#[derive(Args, Debug)]
struct Selection {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    /// Comma-separated source ids; every source when absent.
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
    #[arg(long, value_enum, default_value_t = Method::Apt)]
    method: Method,
    /// APT-W inverse temperature.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[command(flatten)]
    selection: Selection,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    data: Data,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    selection: Selection,
    #[command(flatten)]
    data: Data,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Saved backbone; one is pretrained from the config when absent.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PoolAction {
    /// Copy a source from another pool.
    Add {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        source: String,
    },
    /// Forget a source and delete its files.
    Rm {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        source: String,
    },
    /// List the sources.
    Ls {
        #[arg(long)]
        pool: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    /// Mean of per-source distributions.
    Apt,
    /// Mean of per-source logits.
    AptLogits,
    Majority,
    /// Scatter of class-disjoint logits.
    Cil,
    AptWCil,
    AptWDil,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
