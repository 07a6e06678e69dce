//! Approximate cavity-based matrix factorization (ACBMF).
//!
//! Edge messages of CBMF are replaced by node quantities `(a, b)` per `u_{μr}`
//! and `(c, d)` per `v_{ir}`, plus one residual-like scalar per observation
//! (`φ` on the U side, `ψ` on the V side) with its aggregate `χ` (`η`).
//! Memory is `2(N+M)R + 4|Ω|` scalars. For one row `μ` with `V` fixed:
//!
//! ```text
//! χ_(μi) = Σ_s v_is² / (a_μs + λ)
//! φ_(μi) = (y_μi − u_μ·v_i + φ_(μi) χ_(μi)) / (1 + χ_(μi))
//! a_μr   = Σ_i v_ir² / (1 + χ_(μi))
//! b_μr   = Σ_i φ_(μi) v_ir + u_μr a_μr
//! u_μr   = b_μr / (a_μr + λ)
//! ```
//!
//! At a fixed point `φ = y − u·v` and `λ u_μ = Σ_i (y_μi − u_μ·v_i) v_i`, the
//! ALS normal equations; [`verify_stationarity`] measures the distance to them.

use rayon::prelude::*;

use crate::als::solve_row;
use crate::cbmf::DIVERGENCE_LIMIT;
use crate::config::SolverKind;
use crate::error::{Error, Result};
use crate::factors::{dot, FactorMatrix, FactorPair};
use crate::observed::ObservedMatrix;
use crate::par::split_ragged;
use crate::solver::Solver;

#[derive(Debug, Clone)]
pub struct AcbmfState {
    lambda: f64,
    inner_iterations: usize,
    pub a: FactorMatrix,
    pub b: FactorMatrix,
    pub c: FactorMatrix,
    pub d: FactorMatrix,
    /// Per entry.
    pub chi: Vec<f64>,
    /// Per entry.
    pub phi: Vec<f64>,
    /// Per column slot.
    pub eta_obs: Vec<f64>,
    /// Per column slot.
    pub psi: Vec<f64>,
    pub factors: FactorPair,
    sweeps: usize,
}

struct Block<'a> {
    index: usize,
    agg: &'a mut [f64],
    resid: &'a mut [f64],
    prec: &'a mut [f64],
    lin: &'a mut [f64],
    x: &'a mut [f64],
}

fn update_block(
    blk: &mut Block<'_>,
    others: &[usize],
    ys: &[f64],
    fixed: &FactorMatrix,
    lambda: f64,
    repeats: usize,
    scratch: &mut Vec<f64>,
) -> std::result::Result<(), (usize, String)> {
    let rank = fixed.rank();
    scratch.clear();
    scratch.resize(2 * rank, 0.0);
    let (prec_new, phi_sum) = scratch.split_at_mut(rank);
    for _ in 0..repeats {
        prec_new.fill(0.0);
        phi_sum.fill(0.0);
        for (k, (&j, &y)) in others.iter().zip(ys).enumerate() {
            let w = fixed.row(j);
            let chi: f64 = (0..rank).map(|s| w[s] * w[s] / (blk.prec[s] + lambda)).sum();
            let phi = (y - dot(blk.x, w) + blk.resid[k] * chi) / (1.0 + chi);
            blk.agg[k] = chi;
            blk.resid[k] = phi;
            let inv = 1.0 / (1.0 + chi);
            for r in 0..rank {
                prec_new[r] += w[r] * w[r] * inv;
                phi_sum[r] += phi * w[r];
            }
        }
        for r in 0..rank {
            blk.prec[r] = prec_new[r];
            blk.lin[r] = phi_sum[r] + blk.x[r] * prec_new[r];
            blk.x[r] = blk.lin[r] / (blk.prec[r] + lambda);
        }
    }
    for r in 0..rank {
        let (p, l) = (blk.prec[r], blk.lin[r]);
        if !(p.is_finite() && l.is_finite() && p.abs() <= DIVERGENCE_LIMIT && l.abs() <= DIVERGENCE_LIMIT) {
            return Err((blk.index, format!("rank {r}: node message (precision={p:e}, linear={l:e})")));
        }
    }
    if let Some(bad) = blk.resid.iter().find(|x| !(x.is_finite() && x.abs() <= DIVERGENCE_LIMIT)) {
        return Err((blk.index, format!("observation term {bad:e}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn half_sweep<'n>(
    offsets: &[usize],
    neighbors: impl Fn(usize) -> (&'n [usize], &'n [f64]) + Sync,
    agg: &mut [f64],
    resid: &mut [f64],
    prec: &mut FactorMatrix,
    lin: &mut FactorMatrix,
    target: &mut FactorMatrix,
    fixed: &FactorMatrix,
    lambda: f64,
    repeats: usize,
) -> std::result::Result<(), (usize, String)> {
    let rank = fixed.rank();
    let blocks: Vec<Block<'_>> = split_ragged(agg, offsets, 1)
        .into_iter()
        .zip(split_ragged(resid, offsets, 1))
        .zip(prec.as_mut_slice().chunks_mut(rank))
        .zip(lin.as_mut_slice().chunks_mut(rank))
        .zip(target.as_mut_slice().chunks_mut(rank))
        .enumerate()
        .map(|(index, ((((agg, resid), prec), lin), x))| Block {
            index,
            agg,
            resid,
            prec,
            lin,
            x,
        })
        .collect();
    let failures: Vec<(usize, String)> = blocks
        .into_par_iter()
        .map_init(Vec::new, |scratch, mut blk| {
            let (others, ys) = neighbors(blk.index);
            update_block(&mut blk, others, ys, fixed, lambda, repeats, scratch).err()
        })
        .flatten()
        .collect();
    match failures.into_iter().min_by_key(|f| f.0) {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

impl AcbmfState {
    /// Node messages and observation terms start at zero; factors start at `init`.
    pub fn new(
        observed: &ObservedMatrix,
        init: FactorPair,
        lambda: f64,
        inner_iterations: usize,
    ) -> Result<Self> {
        init.check_shape(observed)?;
        if !(lambda > 0.0) {
            return Err(Error::usage(format!(
                "cavity solvers need lambda > 0 (zero messages give infinite χ), got {lambda}"
            )));
        }
        if inner_iterations == 0 {
            return Err(Error::usage("inner_iterations must be at least 1"));
        }
        let rank = init.rank();
        let (n, m, nnz) = (observed.n_rows(), observed.n_cols(), observed.len());
        Ok(Self {
            lambda,
            inner_iterations,
            a: FactorMatrix::zeros(n, rank),
            b: FactorMatrix::zeros(n, rank),
            c: FactorMatrix::zeros(m, rank),
            d: FactorMatrix::zeros(m, rank),
            chi: vec![0.0; nnz],
            phi: vec![0.0; nnz],
            eta_obs: vec![0.0; nnz],
            psi: vec![0.0; nnz],
            factors: init,
            sweeps: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of allocated message slots (`2(N+M)R + 4|Ω|`).
    pub fn message_slots(&self) -> usize {
        [&self.a, &self.b, &self.c, &self.d]
            .iter()
            .map(|m| m.as_slice().len())
            .sum::<usize>()
            + self.chi.len()
            + self.phi.len()
            + self.eta_obs.len()
            + self.psi.len()
    }

    pub fn half_sweep_u(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let sweep = self.sweeps + 1;
        half_sweep(
            observed.row_offsets(),
            |i| observed.row_slices(i),
            &mut self.chi,
            &mut self.phi,
            &mut self.a,
            &mut self.b,
            &mut self.factors.u,
            &self.factors.v,
            self.lambda,
            self.inner_iterations,
        )
        .map_err(|(i, detail)| Error::Divergence {
            sweep,
            detail: format!("acbmf U half-sweep, row {i}: {detail}"),
        })
    }

    pub fn half_sweep_v(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let sweep = self.sweeps + 1;
        half_sweep(
            observed.col_offsets(),
            |i| observed.col_slices(i),
            &mut self.eta_obs,
            &mut self.psi,
            &mut self.c,
            &mut self.d,
            &mut self.factors.v,
            &self.factors.u,
            self.lambda,
            self.inner_iterations,
        )
        .map_err(|(i, detail)| Error::Divergence {
            sweep,
            detail: format!("acbmf V half-sweep, column {i}: {detail}"),
        })
    }
}

impl Solver for AcbmfState {
    fn kind(&self) -> SolverKind {
        SolverKind::Acbmf
    }

    fn sweep(&mut self, observed: &ObservedMatrix, _sweep: usize) -> Result<()> {
        self.half_sweep_u(observed)?;
        self.half_sweep_v(observed)?;
        self.sweeps += 1;
        Ok(())
    }

    fn factors(&self) -> &FactorPair {
        &self.factors
    }

    fn into_factors(self) -> FactorPair {
        self.factors
    }
}

/// Largest `‖u_μ − u*_μ‖_∞` over rows and `‖v_i − v*_i‖_∞` over columns, where
/// `u*_μ` is the exact regularized least-squares row fit against the current `V`
/// (and `v*_i` against the current `U`).
pub fn verify_stationarity(factors: &FactorPair, observed: &ObservedMatrix, lambda: f64) -> Result<f64> {
    factors.check_shape(observed)?;
    let rank = factors.rank();
    let side = |target: &FactorMatrix, fixed: &FactorMatrix, by_rows: bool| -> Result<f64> {
        (0..target.n_rows())
            .into_par_iter()
            .map_init(
                || vec![0.0; rank],
                |star, i| {
                    let (others, ys) = if by_rows {
                        observed.row_slices(i)
                    } else {
                        observed.col_slices(i)
                    };
                    solve_row(fixed, others.iter().copied().zip(ys.iter().copied()), lambda, star)?;
                    Ok(target
                        .row(i)
                        .iter()
                        .zip(star.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max))
                },
            )
            .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
    };
    let ru = side(&factors.u, &factors.v, true)?;
    let rv = side(&factors.v, &factors.u, false)?;
    Ok(ru.max(rv))
}
