mod args;
mod config_file;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use cavmf::datagen::{read_meta, with_suffix};
use cavmf::eval::{self, ReconstructionSettings};
use cavmf::ingest::{self, IndexMap, RatingFormat, RatingRecord, RatingSet};
use cavmf::solver::Metric;
use cavmf::{factors::write_factors, generate, solve, ObservedMatrix, SolverConfig, SolverKind};

use args::{Cli, Command, GenerateArgs, InputFormat, MovielensArgs, Protocol, SyntheticArgs, TrainArgs};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Raised after all outputs are written when some protocol run diverged.
#[derive(Debug)]
struct RunsDiverged(usize);

impl std::fmt::Display for RunsDiverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} run(s) diverged", self.0)
    }
}

impl std::error::Error for RunsDiverged {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<RunsDiverged>().is_some() {
        return EXIT_DIVERGED;
    }
    match e.downcast_ref::<cavmf::Error>() {
        Some(cavmf::Error::Usage(_)) => EXIT_USAGE,
        Some(cavmf::Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(cavmf::Error::Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Benchmark { protocol: Protocol::Synthetic(a) } => cmd_synthetic(&a),
        Command::Benchmark { protocol: Protocol::Movielens(a) } => cmd_movielens(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let config = cavmf::SyntheticConfig {
        n_rows: a.n,
        n_cols: a.m,
        rank: a.rank,
        c: a.c,
        noise_var: a.noise_var,
        seed: a.seed,
    };
    let inst = generate(&config)?;
    inst.export(&a.out)?;
    println!(
        "|Ω| = {} ({}x{}, c·M = {:.0}, R(N+M) = {})",
        inst.observed.len(),
        a.n,
        a.m,
        config.expected_observations(),
        config.degrees_of_freedom()
    );
    Ok(())
}

fn resolve_format(path: &Path, format: InputFormat) -> Result<InputFormat> {
    if format != InputFormat::Auto {
        return Ok(format);
    }
    let text = std::fs::read_to_string(path).map_err(|e| cavmf::Error::Io { path: path.into(), source: e })?;
    let first = text.lines().next().unwrap_or("");
    Ok(if first.contains("::") {
        InputFormat::DoubleColon
    } else if first.trim_start().starts_with("userId") {
        InputFormat::CommaHeader
    } else {
        InputFormat::Triples
    })
}

fn read_ratings(path: &Path, format: InputFormat) -> Result<Vec<RatingRecord>> {
    let (format, set) = match resolve_format(path, format)? {
        InputFormat::DoubleColon => (RatingFormat::DoubleColon, RatingSet::Integer1To5),
        InputFormat::CommaHeader => (RatingFormat::CommaHeader, RatingSet::HalfStep0_5To5),
        InputFormat::Triples => bail!(cavmf::Error::Usage(format!(
            "{} is a triples file; rating formats are double_colon and comma_header",
            path.display()
        ))),
        InputFormat::Auto => unreachable!(),
    };
    let records = ingest::parse_ratings(path, format)?;
    set.validate(&records)?;
    log::info!("read {} ratings from {}", records.len(), path.display());
    Ok(records)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = a.solver_args.config();
    let truth = a
        .truth_meta
        .as_deref()
        .map(|p| -> Result<_> { Ok(generate(&read_meta(p)?)?) })
        .transpose()?;

    let observed = match resolve_format(&a.input, a.format)? {
        InputFormat::Triples => {
            let triples = ingest::read_triples(&a.input)?;
            let (n, m) = match &truth {
                Some(t) => (t.config.n_rows, t.config.n_cols),
                None => (
                    triples.iter().map(|t| t.0 + 1).max().unwrap_or(0),
                    triples.iter().map(|t| t.1 + 1).max().unwrap_or(0),
                ),
            };
            ObservedMatrix::from_triples(n, m, triples)?
        }
        other => {
            if truth.is_some() {
                bail!(cavmf::Error::Usage("--truth-meta applies to triples input only".into()));
            }
            let records = read_ratings(&a.input, other)?;
            let all: Vec<usize> = (0..records.len()).collect();
            IndexMap::from_records(&records).observed(&records, &all)?
        }
    };
    log::info!(
        "training {} on {}x{} with {} observations",
        a.solver,
        observed.n_rows(),
        observed.n_cols(),
        observed.len()
    );

    let metric = |f: &cavmf::FactorPair| match &truth {
        Some(t) => eval::rrmse(f, t).unwrap_or(f64::NAN),
        None => f64::NAN,
    };
    let outcome = solve(
        a.solver,
        &observed,
        &config,
        truth.as_ref().map(|_| &metric as Metric<'_>),
    )?;

    let prefix = a
        .out
        .clone()
        .unwrap_or_else(|| with_suffix(&a.input, a.solver.as_str()));
    let factors_path = with_suffix(&prefix, "factors");
    let trace_path = with_suffix(&prefix, "trace.csv");
    write_factors(&factors_path, &outcome.factors)?;
    eval::write_trace_csv(&trace_path, &outcome.trace)?;

    let last = outcome.trace.last().expect("at least one sweep");
    println!(
        "{} sweeps={} converged={} objective={:.6} train_rmse={:.6}{}",
        a.solver,
        outcome.sweeps(),
        outcome.converged,
        last.objective,
        last.train_rmse,
        last.test_metric.map(|r| format!(" rrmse={r:.6}")).unwrap_or_default()
    );
    log::info!("wrote {} and {}", factors_path.display(), trace_path.display());
    Ok(())
}

fn output(prefix: &Path, solver: SolverKind, ext: &str) -> PathBuf {
    with_suffix(prefix, &format!("{solver}.{ext}"))
}

fn cmd_synthetic(a: &SyntheticArgs) -> Result<()> {
    let settings = ReconstructionSettings {
        n_rows: a.n,
        n_cols: a.m,
        noise_var: a.noise_var,
        c_values: a.c_list.clone(),
        samples: a.samples,
        restarts: a.restarts,
        threshold: a.threshold,
        seed: a.instance_seed,
        record_traces: false,
    };
    let config: SolverConfig = a.solver_args.config();
    let mut diverged = 0;
    println!("solver,c,successes,samples,rate,mean_min_rrmse,diverged_runs");
    for &kind in &a.solver {
        let result = eval::reconstruction_protocol(&settings, kind, &config)?;
        eval::write_reconstruction_csv(&output(&a.out, kind, "csv"), &result)?;
        eval::write_reconstruction_runs_csv(&output(&a.out, kind, "runs.csv"), &result)?;
        for row in &result.rows {
            println!(
                "{},{},{},{},{:.3},{:.6},{}",
                kind, row.c, row.successes, row.samples, row.rate, row.mean_min_rrmse, row.diverged_runs
            );
            diverged += row.diverged_runs;
        }
    }
    if diverged > 0 {
        return Err(RunsDiverged(diverged).into());
    }
    Ok(())
}

fn cmd_movielens(a: &MovielensArgs) -> Result<()> {
    let records = read_ratings(&a.input, a.format)?;
    let config = a.solver_args.config();
    let mut diverged = 0;
    println!("solver,mean_rmse,diverged_folds");
    for &kind in &a.solver {
        let result = eval::movielens_protocol(&records, a.folds, a.split_seed, kind, &config)?;
        eval::write_cross_validation_csv(&output(&a.out, kind, "csv"), &result)?;
        for fold in &result.folds {
            eval::write_trace_csv(&output(&a.out, kind, &format!("fold{}.trace.csv", fold.fold)), &fold.trace)?;
            if let Some(e) = &fold.error {
                log::warn!("{kind} fold {}: {e}", fold.fold);
            }
        }
        println!("{},{:.6},{}", kind, result.mean_rmse(), result.diverged_folds());
        diverged += result.diverged_folds();
    }
    if diverged > 0 {
        return Err(RunsDiverged(diverged).into());
    }
    Ok(())
}
