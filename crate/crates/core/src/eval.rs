//! Metrics, the synthetic reconstruction and k-fold rating protocols, and CSV output.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{SolverConfig, SolverKind};
use crate::datagen::{generate, SyntheticConfig, SyntheticInstance, REFERENCE_NOISE_VAR};
use crate::error::{Error, Result};
use crate::factors::FactorPair;
use crate::ingest::{kfold_split, IndexMap, RatingRecord};
use crate::seed::derive_seed;
use crate::solver::{solve, TraceRecord};

/// rRMSE at or below this counts as a successful reconstruction.
pub const SUCCESS_THRESHOLD: f64 = 0.15;

/// `√(mean (y − u·v)²)` over `holdout`.
pub fn rmse(factors: &FactorPair, holdout: &[(usize, usize, f64)]) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::usage("rmse of an empty holdout"));
    }
    let mut sse = 0.0;
    for &(row, col, y) in holdout {
        if row >= factors.n_rows() || col >= factors.n_cols() {
            return Err(Error::usage(format!(
                "holdout position ({row}, {col}) outside {}x{}",
                factors.n_rows(),
                factors.n_cols()
            )));
        }
        let r = y - factors.predict_unchecked(row, col);
        sse += r * r;
    }
    Ok((sse / holdout.len() as f64).sqrt())
}

/// Squared reconstruction error and squared norm of the ground truth, summed
/// over every position of the instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthErrors {
    pub sse: f64,
    pub truth_sq: f64,
    pub positions: usize,
}

impl TruthErrors {
    pub fn rrmse(&self) -> Result<f64> {
        if self.truth_sq == 0.0 {
            return Err(Error::usage("ground truth has zero norm"));
        }
        Ok((self.sse / self.truth_sq).sqrt())
    }

    pub fn rmse(&self) -> f64 {
        (self.sse / self.positions as f64).sqrt()
    }
}

pub fn truth_errors(factors: &FactorPair, instance: &SyntheticInstance) -> Result<TruthErrors> {
    factors.check_shape(&instance.observed)?;
    let mut sse = 0.0;
    let mut truth_sq = 0.0;
    instance.for_each_truth_row(|row, ys| {
        let u = factors.u.row(row);
        for (col, &y) in ys.iter().enumerate() {
            let r = y - crate::factors::dot(u, factors.v.row(col));
            sse += r * r;
            truth_sq += y * y;
        }
    });
    Ok(TruthErrors {
        sse,
        truth_sq,
        positions: instance.config.n_rows * instance.config.n_cols,
    })
}

/// Relative Frobenius error against the full ground-truth matrix.
pub fn rrmse(factors: &FactorPair, instance: &SyntheticInstance) -> Result<f64> {
    truth_errors(factors, instance)?.rrmse()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSettings {
    pub n_rows: usize,
    pub n_cols: usize,
    pub noise_var: f64,
    pub c_values: Vec<f64>,
    pub samples: usize,
    pub restarts: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Keep per-sweep traces (with rRMSE as the test metric) for every run.
    pub record_traces: bool,
}

impl Default for ReconstructionSettings {
    fn default() -> Self {
        Self {
            n_rows: 500,
            n_cols: 1000,
            noise_var: REFERENCE_NOISE_VAR,
            c_values: vec![10.0, 20.0, 30.0, 40.0, 60.0],
            samples: 10,
            restarts: 5,
            threshold: SUCCESS_THRESHOLD,
            seed: 0,
            record_traces: false,
        }
    }
}

impl ReconstructionSettings {
    /// Seed of instance `sample` at mean column degree `c`; independent of the
    /// position of `c` in the sweep.
    pub fn instance_seed(&self, c: f64, sample: usize) -> u64 {
        derive_seed(self.seed, &[c.to_bits(), sample as u64])
    }

    pub fn instance_config(&self, c: f64, sample: usize, rank: usize) -> SyntheticConfig {
        SyntheticConfig {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            rank,
            c,
            noise_var: self.noise_var,
            seed: self.instance_seed(c, sample),
        }
    }
}

/// Initialization seed of restart `restart` on the instance seeded with `instance_seed`.
pub fn restart_seed(instance_seed: u64, restart: usize) -> u64 {
    derive_seed(instance_seed, &[0x5245_5354, restart as u64])
}

#[derive(Debug, Clone)]
pub struct ReconstructionRun {
    pub solver: SolverKind,
    pub c: f64,
    pub sample: usize,
    pub restart: usize,
    pub instance_seed: u64,
    pub init_seed: u64,
    /// Observed entries in the instance.
    pub observed: usize,
    /// `None` when the solver diverged.
    pub rrmse: Option<f64>,
    /// RMSE against the ground truth over all positions.
    pub full_rmse: Option<f64>,
    /// rRMSE of the true factors; the noise floor of this instance.
    pub truth_rrmse: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub seconds: f64,
    pub error: Option<String>,
    pub trace: Vec<TraceRecord>,
}

impl ReconstructionRun {
    pub fn succeeded(&self, threshold: f64) -> bool {
        self.rrmse.is_some_and(|r| r <= threshold)
    }
}

/// Aggregate over the samples of one `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionRow {
    pub solver: SolverKind,
    pub c: f64,
    pub samples: usize,
    pub restarts: usize,
    /// Instances where at least one restart succeeded.
    pub successes: usize,
    pub rate: f64,
    /// Mean over instances of the best restart's rRMSE (diverged restarts excluded).
    pub mean_min_rrmse: f64,
    pub successful_runs: usize,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub threshold: f64,
    pub rows: Vec<ReconstructionRow>,
    pub runs: Vec<ReconstructionRun>,
}

impl ReconstructionResult {
    pub fn row(&self, c: f64) -> Option<&ReconstructionRow> {
        self.rows.iter().find(|r| r.c == c)
    }

    pub fn runs_at(&self, c: f64) -> impl Iterator<Item = &ReconstructionRun> {
        self.runs.iter().filter(move |r| r.c == c)
    }
}

fn reconstruction_run(
    kind: SolverKind,
    instance: &SyntheticInstance,
    truth_rrmse: f64,
    sample: usize,
    restart: usize,
    config: &SolverConfig,
    record_traces: bool,
) -> ReconstructionRun {
    let init_seed = restart_seed(instance.config.seed, restart);
    let config = SolverConfig { seed: init_seed, ..config.clone() };
    let metric = |f: &FactorPair| rrmse(f, instance).unwrap_or(f64::NAN);
    let start = Instant::now();
    let outcome = solve(
        kind,
        &instance.observed,
        &config,
        record_traces.then_some(&metric as &(dyn Fn(&FactorPair) -> f64 + Sync)),
    );
    let seconds = start.elapsed().as_secs_f64();
    let mut run = ReconstructionRun {
        solver: kind,
        c: instance.config.c,
        sample,
        restart,
        instance_seed: instance.config.seed,
        init_seed,
        observed: instance.observed.len(),
        rrmse: None,
        full_rmse: None,
        truth_rrmse,
        sweeps: 0,
        converged: false,
        seconds,
        error: None,
        trace: Vec::new(),
    };
    match outcome.and_then(|o| truth_errors(&o.factors, instance).map(|t| (o, t))) {
        Ok((outcome, errors)) => {
            run.rrmse = errors.rrmse().ok().filter(|r| r.is_finite());
            run.full_rmse = Some(errors.rmse()).filter(|r| r.is_finite());
            run.sweeps = outcome.sweeps();
            run.converged = outcome.converged;
            run.trace = outcome.trace;
        }
        Err(e) => {
            log::warn!(
                "{kind} diverged on c={} sample {sample} restart {restart}: {e}",
                instance.config.c
            );
            run.error = Some(e.to_string());
        }
    }
    run
}

/// Reconstruction rate and rRMSE statistics over a sweep of `c` values.
///
/// Every `(c, sample)` pair gets its own instance and every restart its own
/// initialization; a diverging restart counts as a failure.
pub fn reconstruction_protocol(
    settings: &ReconstructionSettings,
    kind: SolverKind,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    if settings.samples == 0 || settings.restarts == 0 {
        return Err(Error::usage("samples and restarts must be at least 1"));
    }
    if settings.c_values.is_empty() {
        return Err(Error::usage("no c values given"));
    }
    config.validate()?;
    for &c in &settings.c_values {
        settings.instance_config(c, 0, config.rank).validate()?;
    }

    let jobs: Vec<(f64, usize)> = settings
        .c_values
        .iter()
        .flat_map(|&c| (0..settings.samples).map(move |s| (c, s)))
        .collect();
    let per_instance: Vec<Vec<ReconstructionRun>> = jobs
        .par_iter()
        .map(|&(c, sample)| -> Result<Vec<ReconstructionRun>> {
            let instance = generate(&settings.instance_config(c, sample, config.rank))?;
            let truth_rrmse = rrmse(&instance.truth, &instance)?;
            Ok((0..settings.restarts)
                .into_par_iter()
                .map(|restart| {
                    reconstruction_run(
                        kind,
                        &instance,
                        truth_rrmse,
                        sample,
                        restart,
                        config,
                        settings.record_traces,
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let rows = settings
        .c_values
        .iter()
        .map(|&c| {
            let groups: Vec<&Vec<ReconstructionRun>> = per_instance
                .iter()
                .filter(|runs| runs[0].c == c)
                .collect();
            aggregate_reconstruction(kind, c, settings, &groups)
        })
        .collect();
    Ok(ReconstructionResult {
        threshold: settings.threshold,
        rows,
        runs: per_instance.into_iter().flatten().collect(),
    })
}

fn aggregate_reconstruction(
    kind: SolverKind,
    c: f64,
    settings: &ReconstructionSettings,
    groups: &[&Vec<ReconstructionRun>],
) -> ReconstructionRow {
    let successes = groups
        .iter()
        .filter(|runs| runs.iter().any(|r| r.succeeded(settings.threshold)))
        .count();
    let minima: Vec<f64> = groups
        .iter()
        .filter_map(|runs| runs.iter().filter_map(|r| r.rrmse).reduce(f64::min))
        .collect();
    let mean_min_rrmse = if minima.is_empty() {
        f64::NAN
    } else {
        minima.iter().sum::<f64>() / minima.len() as f64
    };
    let all = groups.iter().flat_map(|runs| runs.iter());
    ReconstructionRow {
        solver: kind,
        c,
        samples: groups.len(),
        restarts: settings.restarts,
        successes,
        rate: successes as f64 / groups.len() as f64,
        mean_min_rrmse,
        successful_runs: all.clone().filter(|r| r.succeeded(settings.threshold)).count(),
        diverged_runs: all.filter(|r| r.rrmse.is_none()).count(),
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Test entries whose user or item never occurs in the training folds.
    pub cold_test_entries: usize,
    /// `None` when the solver diverged.
    pub test_rmse: Option<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub error: Option<String>,
    /// Per-sweep records with the held-out RMSE as the test metric.
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct CrossValidationResult {
    pub solver: SolverKind,
    pub folds: Vec<FoldResult>,
}

impl CrossValidationResult {
    /// Mean held-out RMSE over the folds that did not diverge.
    pub fn mean_rmse(&self) -> f64 {
        let ok: Vec<f64> = self.folds.iter().filter_map(|f| f.test_rmse).collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }

    pub fn diverged_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.test_rmse.is_none()).count()
    }
}

/// First sweep after which the test metric moves by less than `tol`, if any.
pub fn metric_settled_at(trace: &[TraceRecord], tol: f64) -> Option<usize> {
    trace.windows(2).find_map(|w| match (w[0].test_metric, w[1].test_metric) {
        (Some(a), Some(b)) if (a - b).abs() < tol => Some(w[1].sweep),
        _ => None,
    })
}

/// k-fold cross-validation: train on `k − 1` folds, report RMSE on the held-out one.
///
/// Indices span every user and item in `records`, so held-out entries of users
/// or items absent from training are predicted from whatever factor the solver
/// leaves there and still count.
pub fn movielens_protocol(
    records: &[RatingRecord],
    k: usize,
    split_seed: u64,
    kind: SolverKind,
    config: &SolverConfig,
) -> Result<CrossValidationResult> {
    config.validate()?;
    let folds = kfold_split(records, k, split_seed)?;
    let index = IndexMap::from_records(records);
    let mut fold_of = vec![0usize; records.len()];
    for (f, members) in folds.iter().enumerate() {
        for &i in members {
            fold_of[i] = f;
        }
    }

    let results = (0..k)
        .into_par_iter()
        .map(|fold| -> Result<FoldResult> {
            let train_idx: Vec<usize> = (0..records.len()).filter(|&i| fold_of[i] != fold).collect();
            let train = index.observed(records, &train_idx)?;
            let test: Vec<(usize, usize, f64)> = folds[fold]
                .iter()
                .map(|&i| index.triple(&records[i]))
                .collect::<Result<_>>()?;
            let cold_test_entries = test
                .iter()
                .filter(|&&(r, c, _)| train.row_degree(r) == 0 || train.col_degree(c) == 0)
                .count();
            let metric = |f: &FactorPair| rmse(f, &test).unwrap_or(f64::NAN);
            let fold_config = SolverConfig {
                seed: derive_seed(config.seed, &[fold as u64]),
                ..config.clone()
            };
            let mut result = FoldResult {
                fold,
                train_size: train.len(),
                test_size: test.len(),
                cold_test_entries,
                test_rmse: None,
                sweeps: 0,
                converged: false,
                error: None,
                trace: Vec::new(),
            };
            match solve(kind, &train, &fold_config, Some(&metric)) {
                Ok(outcome) => {
                    result.test_rmse = Some(rmse(&outcome.factors, &test)?).filter(|r| r.is_finite());
                    result.sweeps = outcome.sweeps();
                    result.converged = outcome.converged;
                    result.trace = outcome.trace;
                }
                Err(e @ Error::Divergence { .. }) => {
                    log::warn!("{kind} diverged on fold {fold}: {e}");
                    result.error = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValidationResult {
        solver: kind,
        folds: results,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

/// Column order of trace files.
pub const TRACE_COLUMNS: [&str; 7] = [
    "algorithm",
    "sweep",
    "objective",
    "train_rmse",
    "test_metric",
    "relative_change",
    "seconds",
];

pub fn write_trace_csv_to<W: Write>(w: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(TRACE_COLUMNS)?;
    for t in trace {
        w.write_record([
            t.algorithm.as_str().to_string(),
            t.sweep.to_string(),
            format!("{:?}", t.objective),
            format!("{:?}", t.train_rmse),
            opt(t.test_metric),
            format!("{:?}", t.relative_change),
            format!("{:?}", t.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv_to(file, trace)
}

pub const RECONSTRUCTION_COLUMNS: [&str; 10] = [
    "algorithm",
    "c",
    "samples",
    "restarts",
    "threshold",
    "successes",
    "rate",
    "mean_min_rrmse",
    "successful_runs",
    "diverged_runs",
];

pub fn write_reconstruction_csv(path: &Path, result: &ReconstructionResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RECONSTRUCTION_COLUMNS)?;
    for r in &result.rows {
        w.write_record([
            r.solver.as_str().to_string(),
            format!("{:?}", r.c),
            r.samples.to_string(),
            r.restarts.to_string(),
            format!("{:?}", result.threshold),
            r.successes.to_string(),
            format!("{:?}", r.rate),
            format!("{:?}", r.mean_min_rrmse),
            r.successful_runs.to_string(),
            r.diverged_runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RECONSTRUCTION_RUN_COLUMNS: [&str; 13] = [
    "algorithm",
    "c",
    "sample",
    "restart",
    "instance_seed",
    "init_seed",
    "observed",
    "rrmse",
    "full_rmse",
    "truth_rrmse",
    "sweeps",
    "converged",
    "seconds",
];

pub fn write_reconstruction_runs_csv(path: &Path, result: &ReconstructionResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RECONSTRUCTION_RUN_COLUMNS)?;
    for r in &result.runs {
        w.write_record([
            r.solver.as_str().to_string(),
            format!("{:?}", r.c),
            r.sample.to_string(),
            r.restart.to_string(),
            r.instance_seed.to_string(),
            r.init_seed.to_string(),
            r.observed.to_string(),
            opt(r.rrmse),
            opt(r.full_rmse),
            format!("{:?}", r.truth_rrmse),
            r.sweeps.to_string(),
            r.converged.to_string(),
            format!("{:?}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const FOLD_COLUMNS: [&str; 9] = [
    "algorithm",
    "fold",
    "train_size",
    "test_size",
    "cold_test_entries",
    "test_rmse",
    "sweeps",
    "converged",
    "diverged",
];

/// One row per fold followed by a `mean` row.
pub fn write_cross_validation_csv(path: &Path, result: &CrossValidationResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(FOLD_COLUMNS)?;
    let tag = result.solver.as_str();
    for f in &result.folds {
        w.write_record([
            tag.to_string(),
            f.fold.to_string(),
            f.train_size.to_string(),
            f.test_size.to_string(),
            f.cold_test_entries.to_string(),
            opt(f.test_rmse),
            f.sweeps.to_string(),
            f.converged.to_string(),
            f.error.is_some().to_string(),
        ])?;
    }
    w.write_record([
        tag.to_string(),
        "mean".to_string(),
        String::new(),
        String::new(),
        String::new(),
        format!("{:?}", result.mean_rmse()),
        String::new(),
        String::new(),
        result.diverged_folds().to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{init_factors, FactorMatrix};
    use rand::Rng;

    fn pair(u: Vec<f64>, v: Vec<f64>, rank: usize) -> FactorPair {
        let n = u.len() / rank;
        let m = v.len() / rank;
        FactorPair::new(
            FactorMatrix::from_vec(n, rank, u).unwrap(),
            FactorMatrix::from_vec(m, rank, v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rmse_trivial_cases() {
        let f = pair(vec![1.0, 2.0], vec![3.0], 1);
        assert_eq!(rmse(&f, &[(0, 0, 3.0), (1, 0, 6.0)]).unwrap(), 0.0);
        assert_eq!(rmse(&f, &[(0, 0, 4.0), (1, 0, 5.0)]).unwrap(), 1.0);
        assert!(matches!(rmse(&f, &[]), Err(Error::Usage(_))));
        assert!(matches!(rmse(&f, &[(2, 0, 1.0)]), Err(Error::Usage(_))));
    }

    #[test]
    fn rmse_matches_naive_loop() {
        let f = init_factors(7, 9, 3, 4, 1.0).unwrap();
        let mut rng = crate::seed::rng_from_seed(11);
        let holdout: Vec<(usize, usize, f64)> = (0..40)
            .map(|_| (rng.random_range(0..7), rng.random_range(0..9), rng.random::<f64>() * 5.0))
            .collect();
        let mut sse = 0.0;
        for &(r, c, y) in &holdout {
            let mut p = 0.0;
            for k in 0..3 {
                p += f.u.get(r, k) * f.v.get(c, k);
            }
            sse += (y - p).powi(2);
        }
        let naive = (sse / 40.0).sqrt();
        assert!((rmse(&f, &holdout).unwrap() - naive).abs() < 1e-12);
    }

    fn instance(noise_var: f64, c: f64) -> SyntheticInstance {
        generate(&SyntheticConfig { n_rows: 12, n_cols: 15, rank: 2, c, noise_var, seed: 5 }).unwrap()
    }

    #[test]
    fn rrmse_of_truth_and_zero() {
        let inst = instance(0.0, 4.0);
        assert_eq!(rrmse(&inst.truth, &inst).unwrap(), 0.0);
        let zero = FactorPair::zeros(12, 15, 2);
        assert!((rrmse(&zero, &inst).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rrmse_agrees_with_rmse_on_full_observation() {
        let inst = instance(0.09, 12.0);
        assert_eq!(inst.observed.len(), 12 * 15);
        let f = init_factors(12, 15, 2, 3, 1.0).unwrap();
        let holdout = inst.observed.triples();
        let norm: f64 = holdout.iter().map(|t| t.2 * t.2).sum::<f64>().sqrt();
        let scaled = rmse(&f, &holdout).unwrap() * (holdout.len() as f64).sqrt() / norm;
        assert!((scaled - rrmse(&f, &inst).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_is_a_usage_error() {
        let e = TruthErrors { sse: 1.0, truth_sq: 0.0, positions: 4 };
        assert!(matches!(e.rrmse(), Err(Error::Usage(_))));
    }

    fn small_settings() -> ReconstructionSettings {
        ReconstructionSettings {
            n_rows: 20,
            n_cols: 30,
            noise_var: 0.0,
            c_values: vec![20.0],
            samples: 2,
            restarts: 2,
            threshold: SUCCESS_THRESHOLD,
            seed: 3,
            record_traces: false,
        }
    }

    #[test]
    fn fully_observed_noiseless_als_always_reconstructs() {
        let config = SolverConfig { rank: 2, lambda: 1e-3, max_sweeps: 300, ..Default::default() };
        let result = reconstruction_protocol(&small_settings(), SolverKind::Als, &config).unwrap();
        assert_eq!(result.rows[0].rate, 1.0);
        assert_eq!(result.runs.len(), 4);
    }

    #[test]
    fn tighter_threshold_never_raises_the_rate() {
        let config = SolverConfig { rank: 2, lambda: 1e-2, max_sweeps: 50, ..Default::default() };
        let settings = ReconstructionSettings { c_values: vec![6.0], noise_var: 0.09, ..small_settings() };
        let result = reconstruction_protocol(&settings, SolverKind::Als, &config).unwrap();
        let per_instance: Vec<Vec<ReconstructionRun>> = result
            .runs
            .chunks(settings.restarts)
            .map(<[ReconstructionRun]>::to_vec)
            .collect();
        let refs: Vec<&Vec<ReconstructionRun>> = per_instance.iter().collect();
        let loose = aggregate_reconstruction(SolverKind::Als, 6.0, &settings, &refs);
        let tight = aggregate_reconstruction(
            SolverKind::Als,
            6.0,
            &ReconstructionSettings { threshold: 0.10, ..settings.clone() },
            &refs,
        );
        assert!(tight.rate <= loose.rate);
        assert_eq!(loose, result.rows[0]);
    }

    #[test]
    fn aggregation_ignores_sample_order() {
        let config = SolverConfig { rank: 2, max_sweeps: 20, ..Default::default() };
        let settings = ReconstructionSettings { samples: 3, noise_var: 0.09, c_values: vec![5.0], ..small_settings() };
        let result = reconstruction_protocol(&settings, SolverKind::Cbmf, &config).unwrap();
        let mut per_instance: Vec<Vec<ReconstructionRun>> = result
            .runs
            .chunks(settings.restarts)
            .map(<[ReconstructionRun]>::to_vec)
            .collect();
        per_instance.reverse();
        let refs: Vec<&Vec<ReconstructionRun>> = per_instance.iter().collect();
        let shuffled = aggregate_reconstruction(SolverKind::Cbmf, 5.0, &settings, &refs);
        assert_eq!(shuffled.successes, result.rows[0].successes);
        assert!((shuffled.mean_min_rrmse - result.rows[0].mean_min_rrmse).abs() < 1e-15);
    }

    #[test]
    fn protocol_rejects_zero_counts() {
        let settings = ReconstructionSettings { samples: 0, ..small_settings() };
        assert!(matches!(
            reconstruction_protocol(&settings, SolverKind::Als, &SolverConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn divergence_is_a_failed_restart() {
        let config = SolverConfig {
            rank: 2,
            max_sweeps: 20,
            sgd: Some(crate::config::SgdSchedule {
                eta0: 50.0,
                decay: 0.0,
                rule: crate::config::ScheduleRule::Constant,
            }),
            ..Default::default()
        };
        let settings = ReconstructionSettings { noise_var: 0.09, ..small_settings() };
        let result = reconstruction_protocol(&settings, SolverKind::Sgd, &config).unwrap();
        assert_eq!(result.rows[0].diverged_runs, 4);
        assert_eq!(result.rows[0].rate, 0.0);
        assert!(result.rows[0].mean_min_rrmse.is_nan());
    }

    fn synthetic_ratings(n_users: u64, n_items: u64, per_user: u64) -> Vec<RatingRecord> {
        let mut out = Vec::new();
        for u in 0..n_users {
            for j in 0..per_user {
                let item = (u * 7 + j * 3) % n_items;
                let rating = 1.0 + ((u + item) % 5) as f64;
                out.push(RatingRecord { user: u + 1, item: item + 100, rating, timestamp: 0 });
            }
        }
        out.sort_by_key(|r| (r.user, r.item));
        out.dedup_by_key(|r| (r.user, r.item));
        out
    }

    #[test]
    fn cross_validation_is_deterministic_and_complete() {
        let records = synthetic_ratings(30, 25, 8);
        let config = SolverConfig { rank: 2, lambda: 3.0, max_sweeps: 15, ..Default::default() };
        let a = movielens_protocol(&records, 5, 1, SolverKind::Als, &config).unwrap();
        let b = movielens_protocol(&records, 5, 1, SolverKind::Als, &config).unwrap();
        assert_eq!(a.folds.len(), 5);
        let tested: usize = a.folds.iter().map(|f| f.test_size).sum();
        assert_eq!(tested, records.len());
        for (x, y) in a.folds.iter().zip(&b.folds) {
            assert_eq!(x.test_rmse, y.test_rmse);
            assert_eq!(x.trace.len(), y.trace.len());
        }
        let last = a.folds[0].trace.last().unwrap();
        assert_eq!(last.test_metric, a.folds[0].test_rmse);
    }

    #[test]
    fn settled_sweep_from_trace() {
        let rec = |sweep, m| TraceRecord {
            algorithm: SolverKind::Als,
            sweep,
            objective: 0.0,
            train_rmse: 0.0,
            test_metric: Some(m),
            relative_change: 0.0,
            seconds: 0.0,
        };
        let trace = [rec(1, 1.0), rec(2, 0.9), rec(3, 0.89995), rec(4, 0.8999)];
        assert_eq!(metric_settled_at(&trace, 1e-4), Some(3));
        assert_eq!(metric_settled_at(&trace[..2], 1e-4), None);
    }

    #[test]
    fn trace_csv_column_order() {
        let trace = vec![TraceRecord {
            algorithm: SolverKind::Cbmf,
            sweep: 1,
            objective: 2.5,
            train_rmse: 0.5,
            test_metric: None,
            relative_change: 0.1,
            seconds: 0.0,
        }];
        let mut buf = Vec::new();
        write_trace_csv_to(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "cbmf,1,2.5,0.5,,0.1,0.0");
    }
}
