use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cavmf::{ScheduleRule, SgdSchedule, SolverConfig, SolverKind};

#[derive(Debug, Parser)]
#[command(name = "cavmf", version, about = "Sparse low-rank matrix completion")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads for protocol runs; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// File of `key=value` lines, one per flag; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic instance and write `<out>.triples`, `<out>.truth`, `<out>.meta`.
    Generate(GenerateArgs),
    /// Fit one solver and write the factors and a per-sweep trace.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    Benchmark {
        #[command(subcommand)]
        protocol: Protocol,
    },
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub rank: usize,
    /// Mean observations per column.
    #[arg(long)]
    pub c: f64,
    #[arg(long, default_value_t = cavmf::datagen::REFERENCE_NOISE_VAR)]
    pub noise_var: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// `::` in the first line means double_colon, a `userId` header means
    /// comma_header, anything else is triples.
    Auto,
    /// `row col value`, zero-based.
    Triples,
    #[value(name = "double_colon", alias = "double-colon")]
    DoubleColon,
    #[value(name = "comma_header", alias = "comma-header")]
    CommaHeader,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub solver: SolverKind,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    pub format: InputFormat,
    /// `.meta` file of the synthetic instance behind a triples input; adds
    /// rRMSE against the full ground truth to the trace.
    #[arg(long, value_name = "PATH")]
    pub truth_meta: Option<PathBuf>,
    /// Output prefix; defaults to `<input>.<solver>`.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub solver_args: SolverArgs,
}

#[derive(Debug, Subcommand)]
pub enum Protocol {
    /// Success rate of low-rank reconstruction over synthetic instances.
    Synthetic(SyntheticArgs),
    /// k-fold cross-validated RMSE on a rating file.
    Movielens(MovielensArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SyntheticArgs {
    #[arg(long, value_delimiter = ',', default_value = "als,sgd,cbmf,acbmf")]
    pub solver: Vec<SolverKind>,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,60")]
    pub c_list: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = cavmf::datagen::REFERENCE_NOISE_VAR)]
    pub noise_var: f64,
    /// rRMSE at or below which a run counts as a success.
    #[arg(long, default_value_t = cavmf::eval::SUCCESS_THRESHOLD)]
    pub threshold: f64,
    /// Seed of the instance draws; `--seed` seeds nothing here.
    #[arg(long, default_value_t = 0)]
    pub instance_seed: u64,
    #[arg(long, value_name = "PREFIX", default_value = "synthetic")]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver_args: SolverArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct MovielensArgs {
    #[arg(long, value_delimiter = ',', default_value = "als,sgd,cbmf,acbmf")]
    pub solver: Vec<SolverKind>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    pub format: InputFormat,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_name = "PREFIX", default_value = "movielens")]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver_args: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    /// Repeats of each half-sweep block (cbmf, acbmf).
    #[arg(long, default_value_t = 1)]
    pub inner_iterations: usize,
    #[arg(long, default_value_t = 200)]
    pub max_sweeps: usize,
    /// Relative factor change that ends a run.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the initial factors; defaults to 1/sqrt(rank).
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// SGD initial learning rate.
    #[arg(long)]
    pub eta0: Option<f64>,
    /// SGD decay in `eta0 / (1 + decay * epoch)`.
    #[arg(long)]
    pub decay: Option<f64>,
    /// SGD schedule: constant or inverse_time.
    #[arg(long)]
    pub schedule: Option<ScheduleRule>,
}

impl SolverArgs {
    pub fn config(&self) -> SolverConfig {
        let sgd = (self.eta0.is_some() || self.decay.is_some() || self.schedule.is_some()).then(|| {
            let d = SgdSchedule::default();
            SgdSchedule {
                eta0: self.eta0.unwrap_or(d.eta0),
                decay: self.decay.unwrap_or(d.decay),
                rule: self.schedule.unwrap_or(d.rule),
            }
        });
        SolverConfig {
            rank: self.rank,
            lambda: self.lambda,
            max_sweeps: self.max_sweeps,
            convergence_tol: self.tol,
            seed: self.seed,
            inner_iterations: self.inner_iterations,
            init_scale: self.init_scale,
            sgd,
        }
    }
}
