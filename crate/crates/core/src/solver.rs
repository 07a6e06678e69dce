//! Shared sweep loop: convergence test, divergence reporting and per-sweep traces.

use std::time::Instant;

use crate::acbmf::AcbmfState;
use crate::als::AlsState;
use crate::cbmf::CavityState;
use crate::config::{SolverConfig, SolverKind};
use crate::error::{Error, Result};
use crate::factors::{init_factors, objective, train_rmse, FactorPair};
use crate::observed::ObservedMatrix;
use crate::sgd::SgdState;

/// One iteration of an iterative solver. A sweep updates every variable at least
/// once: both half-sweeps for ALS/CBMF/ACBMF, one epoch for SGD.
pub trait Solver {
    fn kind(&self) -> SolverKind;

    /// Runs sweep number `sweep` (1-based).
    fn sweep(&mut self, observed: &ObservedMatrix, sweep: usize) -> Result<()>;

    fn factors(&self) -> &FactorPair;

    fn into_factors(self) -> FactorPair;
}

/// Convergence metrics recorded after each sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub algorithm: SolverKind,
    pub sweep: usize,
    pub objective: f64,
    pub train_rmse: f64,
    /// Held-out RMSE or rRMSE, when a metric was supplied.
    pub test_metric: Option<f64>,
    pub relative_change: f64,
    /// Cumulative wall-clock seconds since the solve started.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub factors: FactorPair,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
}

impl SolveOutcome {
    pub fn sweeps(&self) -> usize {
        self.trace.last().map_or(0, |t| t.sweep)
    }
}

/// Evaluates factors on something other than the training data.
pub type Metric<'a> = &'a (dyn Fn(&FactorPair) -> f64 + Sync);

/// Drives `solver` until the relative factor change falls below
/// `config.convergence_tol` or `config.max_sweeps` is reached.
pub fn run<S: Solver>(
    mut solver: S,
    observed: &ObservedMatrix,
    config: &SolverConfig,
    metric: Option<Metric<'_>>,
) -> Result<SolveOutcome> {
    config.validate()?;
    solver.factors().check_shape(observed)?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut previous = solver.factors().clone();
    for sweep in 1..=config.max_sweeps {
        solver.sweep(observed, sweep)?;
        let current = solver.factors();
        if !current.is_finite() {
            return Err(Error::Divergence {
                sweep,
                detail: format!("{} produced non-finite factors", solver.kind()),
            });
        }
        let change = previous.relative_change(current);
        trace.push(TraceRecord {
            algorithm: solver.kind(),
            sweep,
            objective: objective(current, observed, config.lambda)?,
            train_rmse: train_rmse(current, observed),
            test_metric: metric.map(|m| m(current)),
            relative_change: change,
            seconds: start.elapsed().as_secs_f64(),
        });
        if change < config.convergence_tol {
            converged = true;
            break;
        }
        previous.clone_from(current);
    }
    Ok(SolveOutcome {
        factors: solver.into_factors(),
        trace,
        converged,
    })
}

/// Initializes factors from `config.seed` and runs the selected algorithm.
pub fn solve(
    kind: SolverKind,
    observed: &ObservedMatrix,
    config: &SolverConfig,
    metric: Option<Metric<'_>>,
) -> Result<SolveOutcome> {
    config.validate()?;
    let init = init_factors(
        observed.n_rows(),
        observed.n_cols(),
        config.rank,
        config.seed,
        config.init_scale(),
    )?;
    solve_from(kind, observed, config, init, metric)
}

/// Runs the selected algorithm from explicit initial factors.
pub fn solve_from(
    kind: SolverKind,
    observed: &ObservedMatrix,
    config: &SolverConfig,
    init: FactorPair,
    metric: Option<Metric<'_>>,
) -> Result<SolveOutcome> {
    config.validate()?;
    match kind {
        SolverKind::Als => run(AlsState::new(init, config.lambda), observed, config, metric),
        SolverKind::Sgd => run(SgdState::new(init, config)?, observed, config, metric),
        SolverKind::Cbmf => run(
            CavityState::new(observed, init, config.lambda, config.inner_iterations)?,
            observed,
            config,
            metric,
        ),
        SolverKind::Acbmf => run(
            AcbmfState::new(observed, init, config.lambda, config.inner_iterations)?,
            observed,
            config,
            metric,
        ),
    }
}
