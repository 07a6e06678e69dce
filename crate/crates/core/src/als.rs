//! Alternating least squares: each row of `U` is the exact regularized
//! least-squares fit against the current `V`, then each row of `V` against the new `U`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::SolverKind;
use crate::error::{Error, Result};
use crate::factors::{FactorMatrix, FactorPair};
use crate::observed::{Neighbor, ObservedMatrix};
use crate::solver::Solver;

/// `(Σ v vᵀ + λI)⁻¹ Σ y v` over `neighbors = [(index into fixed, y)]`.
pub fn als_row_update(
    fixed: &FactorMatrix,
    neighbors: &[(usize, f64)],
    lambda: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; fixed.rank()];
    solve_row(fixed, neighbors.iter().copied(), lambda, &mut out)?;
    Ok(out)
}

/// Normal-equation system for one row, written into `out`.
pub(crate) fn solve_row<I>(fixed: &FactorMatrix, neighbors: I, lambda: f64, out: &mut [f64]) -> Result<()>
where
    I: Iterator<Item = (usize, f64)>,
{
    let rank = fixed.rank();
    let mut gram = DMatrix::<f64>::zeros(rank, rank);
    let mut rhs = DVector::<f64>::zeros(rank);
    let mut any = false;
    for (j, y) in neighbors {
        any = true;
        let v = fixed.row(j);
        for a in 0..rank {
            rhs[a] += y * v[a];
            for b in 0..=a {
                gram[(a, b)] += v[a] * v[b];
            }
        }
    }
    if !any && lambda > 0.0 {
        out.fill(0.0);
        return Ok(());
    }
    for a in 0..rank {
        gram[(a, a)] += lambda;
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let scale = (0..rank).map(|a| gram[(a, a)]).fold(0.0, f64::max);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("row Gram matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().min();
    if !(min_pivot > 1e-10 * scale.sqrt()) {
        return Err(Error::Numerical(format!(
            "row Gram matrix is singular (pivot {min_pivot:e})"
        )));
    }
    let sol = chol.solve(&rhs);
    out.copy_from_slice(sol.as_slice());
    Ok(())
}

fn half_sweep<'a, F>(target: &mut FactorMatrix, fixed: &FactorMatrix, lambda: f64, neighbors: F) -> Result<()>
where
    F: Fn(usize) -> Box<dyn Iterator<Item = Neighbor> + 'a> + Sync,
{
    let rank = target.rank();
    let results: Vec<Result<()>> = target
        .as_mut_slice()
        .par_chunks_mut(rank)
        .enumerate()
        .map(|(i, row)| {
            solve_row(fixed, neighbors(i).map(|nb| (nb.index, nb.value)), lambda, row)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("row {i}: {msg}")),
                    other => other,
                })
        })
        .collect();
    results.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct AlsState {
    pub factors: FactorPair,
    pub lambda: f64,
    pub sweep_count: usize,
}

impl AlsState {
    pub fn new(factors: FactorPair, lambda: f64) -> Self {
        Self {
            factors,
            lambda,
            sweep_count: 0,
        }
    }

    /// Refits every row of `U` against the current `V`.
    pub fn half_sweep_u(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let FactorPair { u, v } = &mut self.factors;
        half_sweep(u, v, self.lambda, |i| Box::new(observed.row(i)))
    }

    /// Refits every row of `V` against the current `U`.
    pub fn half_sweep_v(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let FactorPair { u, v } = &mut self.factors;
        half_sweep(v, u, self.lambda, |i| Box::new(observed.col(i)))
    }
}

/// One full ALS sweep: `U` from `V`, then `V` from the new `U`.
pub fn als_sweep(state: &mut AlsState, observed: &ObservedMatrix) -> Result<()> {
    state.factors.check_shape(observed)?;
    state.half_sweep_u(observed)?;
    state.half_sweep_v(observed)?;
    state.sweep_count += 1;
    Ok(())
}

impl Solver for AlsState {
    fn kind(&self) -> SolverKind {
        SolverKind::Als
    }

    fn sweep(&mut self, observed: &ObservedMatrix, _sweep: usize) -> Result<()> {
        als_sweep(self, observed)
    }

    fn factors(&self) -> &FactorPair {
        &self.factors
    }

    fn into_factors(self) -> FactorPair {
        self.factors
    }
}
