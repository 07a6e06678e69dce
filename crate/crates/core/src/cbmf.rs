//! Cavity-based matrix factorization (CBMF).
//!
//! Every observation `(μ,i)` carries, for each rank index `r`, a cavity message
//! `(a, b)` towards `u_{μr}` and `(c, d)` towards `v_{ir}`. The message is the
//! quadratic `½ a x² − b x` summarizing all other observations of that row
//! (column), so `b/(a+λ)` is the cavity estimate of the variable with the
//! observation removed.
//!
//! A U half-sweep visits each row `μ` with `V` held fixed:
//!
//! 1. `χ = Σ_r v_r²/(a_r+λ)` and `Δ = Σ_r u^cav_r v_r` per observation,
//! 2. factor-to-variable coefficients
//!    `â_r = v_r²/(1+χ−v_r²/(a_r+λ))`, `b̂_r = (y−Δ+u^cav_r v_r) v_r/(same)`,
//! 3. node totals `a_node = Σ â`, `b_node = Σ b̂`,
//! 4. cavity messages `a = a_node − â`, `b = b_node − b̂`,
//! 5. `u_r = b_node/(a_node+λ)`.
//!
//! The V half-sweep mirrors this per column using the freshly updated `U`.
//! Rows (columns) touch disjoint state, so each half-sweep runs them in parallel.

use rayon::prelude::*;

use crate::config::SolverKind;
use crate::error::{Error, Result};
use crate::factors::{FactorMatrix, FactorPair};
use crate::observed::ObservedMatrix;
use crate::par::split_ragged;
use crate::solver::Solver;

/// Messages larger than this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct CavityState {
    lambda: f64,
    inner_iterations: usize,
    rank: usize,
    /// `a_{μr→(μi)}`, indexed `entry * R + r`.
    pub a_edge: Vec<f64>,
    /// `b_{μr→(μi)}`, indexed `entry * R + r`.
    pub b_edge: Vec<f64>,
    /// `c_{ir→(μi)}`, indexed `col_slot * R + r`.
    pub c_edge: Vec<f64>,
    /// `d_{ir→(μi)}`, indexed `col_slot * R + r`.
    pub d_edge: Vec<f64>,
    pub a_node: FactorMatrix,
    pub b_node: FactorMatrix,
    pub c_node: FactorMatrix,
    pub d_node: FactorMatrix,
    /// Per entry.
    pub chi: Vec<f64>,
    /// Per entry.
    pub delta: Vec<f64>,
    /// Per column slot.
    pub eta_obs: Vec<f64>,
    /// Per column slot.
    pub theta: Vec<f64>,
    pub factors: FactorPair,
    sweeps: usize,
}

/// Mutable view of one row's (or column's) share of the state.
struct Block<'a> {
    index: usize,
    msg_a: &'a mut [f64],
    msg_b: &'a mut [f64],
    agg_chi: &'a mut [f64],
    agg_delta: &'a mut [f64],
    node_a: &'a mut [f64],
    node_b: &'a mut [f64],
    x: &'a mut [f64],
}

struct BlockFailure {
    index: usize,
    detail: String,
}

/// Runs `repeats` cavity updates for one variable block against the fixed
/// vectors `fixed.row(others[k])`, observation values `ys[k]`.
fn update_block(
    b: &mut Block<'_>,
    others: &[usize],
    ys: &[f64],
    fixed: &FactorMatrix,
    lambda: f64,
    repeats: usize,
    scratch: &mut Vec<f64>,
) -> std::result::Result<(), BlockFailure> {
    let rank = fixed.rank();
    let deg = others.len();
    scratch.clear();
    scratch.resize(2 * deg * rank, 0.0);
    let (hat_a, hat_b) = scratch.split_at_mut(deg * rank);

    for _ in 0..repeats {
        for (k, (&j, &y)) in others.iter().zip(ys).enumerate() {
            let w = fixed.row(j);
            let a = &b.msg_a[k * rank..(k + 1) * rank];
            let bb = &b.msg_b[k * rank..(k + 1) * rank];
            let mut chi = 0.0;
            let mut delta = 0.0;
            for r in 0..rank {
                let prec = a[r] + lambda;
                chi += w[r] * w[r] / prec;
                delta += bb[r] / prec * w[r];
            }
            b.agg_chi[k] = chi;
            b.agg_delta[k] = delta;
            for r in 0..rank {
                let prec = a[r] + lambda;
                let w2 = w[r] * w[r];
                // 1 + Σ_{s≠r} w_s²/(a_s+λ), which is ≥ 1
                let denom = (1.0 + chi - w2 / prec).max(1.0);
                let cavity = bb[r] / prec;
                hat_a[k * rank + r] = w2 / denom;
                hat_b[k * rank + r] = (y - delta + cavity * w[r]) * w[r] / denom;
            }
        }
        b.node_a.fill(0.0);
        b.node_b.fill(0.0);
        for k in 0..deg {
            for r in 0..rank {
                b.node_a[r] += hat_a[k * rank + r];
                b.node_b[r] += hat_b[k * rank + r];
            }
        }
        for k in 0..deg {
            for r in 0..rank {
                let idx = k * rank + r;
                b.msg_a[idx] = (b.node_a[r] - hat_a[idx]).max(0.0);
                b.msg_b[idx] = b.node_b[r] - hat_b[idx];
            }
        }
        for r in 0..rank {
            b.x[r] = b.node_b[r] / (b.node_a[r] + lambda);
        }
    }

    for r in 0..rank {
        let (na, nb) = (b.node_a[r], b.node_b[r]);
        if !(na.is_finite() && nb.is_finite() && na.abs() <= DIVERGENCE_LIMIT && nb.abs() <= DIVERGENCE_LIMIT)
        {
            return Err(BlockFailure {
                index: b.index,
                detail: format!("rank {r}: node message (a={na:e}, b={nb:e})"),
            });
        }
    }
    if let Some(bad) = b
        .msg_b
        .iter()
        .chain(b.msg_a.iter())
        .find(|m| !(m.is_finite() && m.abs() <= DIVERGENCE_LIMIT))
    {
        return Err(BlockFailure {
            index: b.index,
            detail: format!("edge message {bad:e}"),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn half_sweep<'n>(
    offsets: &[usize],
    neighbors: impl Fn(usize) -> (&'n [usize], &'n [f64]) + Sync,
    rank: usize,
    msg_a: &mut [f64],
    msg_b: &mut [f64],
    agg_chi: &mut [f64],
    agg_delta: &mut [f64],
    node_a: &mut FactorMatrix,
    node_b: &mut FactorMatrix,
    target: &mut FactorMatrix,
    fixed: &FactorMatrix,
    lambda: f64,
    repeats: usize,
) -> std::result::Result<(), BlockFailure> {
    let blocks: Vec<Block<'_>> = split_ragged(msg_a, offsets, rank)
        .into_iter()
        .zip(split_ragged(msg_b, offsets, rank))
        .zip(split_ragged(agg_chi, offsets, 1))
        .zip(split_ragged(agg_delta, offsets, 1))
        .zip(node_a.as_mut_slice().chunks_mut(rank))
        .zip(node_b.as_mut_slice().chunks_mut(rank))
        .zip(target.as_mut_slice().chunks_mut(rank))
        .enumerate()
        .map(
            |(index, ((((((msg_a, msg_b), agg_chi), agg_delta), node_a), node_b), x))| Block {
                index,
                msg_a,
                msg_b,
                agg_chi,
                agg_delta,
                node_a,
                node_b,
                x,
            },
        )
        .collect();
    let failures: Vec<BlockFailure> = blocks
        .into_par_iter()
        .map_init(Vec::new, |scratch, mut block| {
            let (others, ys) = neighbors(block.index);
            update_block(&mut block, others, ys, fixed, lambda, repeats, scratch).err()
        })
        .flatten()
        .collect();
    // lowest index first, independent of scheduling
    match failures.into_iter().min_by_key(|f| f.index) {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

impl CavityState {
    /// Zero messages, `V` taken from `init`, `U = 0` (consistent with `b = 0`),
    /// and the observation aggregates computed from these.
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
        let mut factors = init;
        factors.u = FactorMatrix::zeros(n, rank);
        let mut state = Self {
            lambda,
            inner_iterations,
            rank,
            a_edge: vec![0.0; nnz * rank],
            b_edge: vec![0.0; nnz * rank],
            c_edge: vec![0.0; nnz * rank],
            d_edge: vec![0.0; nnz * rank],
            a_node: FactorMatrix::zeros(n, rank),
            b_node: FactorMatrix::zeros(n, rank),
            c_node: FactorMatrix::zeros(m, rank),
            d_node: FactorMatrix::zeros(m, rank),
            chi: vec![0.0; nnz],
            delta: vec![0.0; nnz],
            eta_obs: vec![0.0; nnz],
            theta: vec![0.0; nnz],
            factors,
            sweeps: 0,
        };
        state.refresh_aggregates(observed);
        Ok(state)
    }

    /// Recomputes χ, Δ (from `V` and the row messages) and η, Θ (from `U` and
    /// the column messages) without touching any message.
    pub fn refresh_aggregates(&mut self, observed: &ObservedMatrix) {
        let (rank, lambda) = (self.rank, self.lambda);
        for e in 0..observed.len() {
            let w = self.factors.v.row(observed.col_of_entry(e));
            let (mut chi, mut delta) = (0.0, 0.0);
            for r in 0..rank {
                let prec = self.a_edge[e * rank + r] + lambda;
                chi += w[r] * w[r] / prec;
                delta += self.b_edge[e * rank + r] / prec * w[r];
            }
            self.chi[e] = chi;
            self.delta[e] = delta;
        }
        for s in 0..observed.len() {
            let w = self.factors.u.row(observed.col_slot_row(s));
            let (mut eta, mut theta) = (0.0, 0.0);
            for r in 0..rank {
                let prec = self.c_edge[s * rank + r] + lambda;
                eta += w[r] * w[r] / prec;
                theta += self.d_edge[s * rank + r] / prec * w[r];
            }
            self.eta_obs[s] = eta;
            self.theta[s] = theta;
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of allocated edge-message slots (`4·|Ω|·R`).
    pub fn message_slots(&self) -> usize {
        self.a_edge.len() + self.b_edge.len() + self.c_edge.len() + self.d_edge.len()
    }

    /// Cavity estimate `u_{μr→(μi)}` for entry `entry`.
    pub fn u_edge(&self, entry: usize, r: usize) -> f64 {
        let k = entry * self.rank + r;
        self.b_edge[k] / (self.a_edge[k] + self.lambda)
    }

    /// Cavity estimate `v_{ir→(μi)}` for column slot `slot`.
    pub fn v_edge(&self, slot: usize, r: usize) -> f64 {
        let k = slot * self.rank + r;
        self.d_edge[k] / (self.c_edge[k] + self.lambda)
    }

    /// Factor-to-variable coefficients `(â, b̂)` of entry `entry`, recovered as
    /// node total minus cavity message.
    pub fn hat_ab(&self, entry: usize, row: usize, r: usize) -> (f64, f64) {
        let k = entry * self.rank + r;
        (
            self.a_node.get(row, r) - self.a_edge[k],
            self.b_node.get(row, r) - self.b_edge[k],
        )
    }

    /// `(ĉ, d̂)` of column slot `slot`.
    pub fn hat_cd(&self, slot: usize, col: usize, r: usize) -> (f64, f64) {
        let k = slot * self.rank + r;
        (
            self.c_node.get(col, r) - self.c_edge[k],
            self.d_node.get(col, r) - self.d_edge[k],
        )
    }

    pub fn half_sweep_u(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let sweep = self.sweeps + 1;
        half_sweep(
            observed.row_offsets(),
            |i| observed.row_slices(i),
            self.rank,
            &mut self.a_edge,
            &mut self.b_edge,
            &mut self.chi,
            &mut self.delta,
            &mut self.a_node,
            &mut self.b_node,
            &mut self.factors.u,
            &self.factors.v,
            self.lambda,
            self.inner_iterations,
        )
        .map_err(|f| Error::Divergence {
            sweep,
            detail: format!("cbmf U half-sweep, row {}: {}", f.index, f.detail),
        })
    }

    pub fn half_sweep_v(&mut self, observed: &ObservedMatrix) -> Result<()> {
        let sweep = self.sweeps + 1;
        half_sweep(
            observed.col_offsets(),
            |i| observed.col_slices(i),
            self.rank,
            &mut self.c_edge,
            &mut self.d_edge,
            &mut self.eta_obs,
            &mut self.theta,
            &mut self.c_node,
            &mut self.d_node,
            &mut self.factors.v,
            &self.factors.u,
            self.lambda,
            self.inner_iterations,
        )
        .map_err(|f| Error::Divergence {
            sweep,
            detail: format!("cbmf V half-sweep, column {}: {}", f.index, f.detail),
        })
    }

    /// Largest violation of `Σ_{edges of a node} a_edge = (deg − 1)·a_node`
    /// (and the same for b, c, d), which holds when every cavity message equals
    /// the node total minus its own coefficient.
    pub fn aggregate_consistency_error(&self, observed: &ObservedMatrix) -> f64 {
        let rank = self.rank;
        let mut worst: f64 = 0.0;
        let mut check = |edges: &[f64], node: &FactorMatrix, offsets: &[usize]| {
            for (i, w) in offsets.windows(2).enumerate() {
                let deg = (w[1] - w[0]) as f64;
                for r in 0..rank {
                    let sum: f64 = (w[0]..w[1]).map(|k| edges[k * rank + r]).sum();
                    let target = (deg - 1.0) * node.get(i, r);
                    let scale = 1.0 + target.abs();
                    worst = worst.max(if deg == 0.0 { 0.0 } else { (sum - target).abs() / scale });
                }
            }
        };
        check(&self.a_edge, &self.a_node, observed.row_offsets());
        check(&self.b_edge, &self.b_node, observed.row_offsets());
        check(&self.c_edge, &self.c_node, observed.col_offsets());
        check(&self.d_edge, &self.d_node, observed.col_offsets());
        worst
    }

    /// Smallest precision-type value (`a`, `c` edges and nodes); nonnegative by construction.
    pub fn min_precision(&self) -> f64 {
        self.a_edge
            .iter()
            .chain(&self.c_edge)
            .chain(self.a_node.as_slice())
            .chain(self.c_node.as_slice())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Zero-message state with `V = v_init`.
pub fn cbmf_init(observed: &ObservedMatrix, v_init: FactorMatrix, lambda: f64) -> Result<CavityState> {
    let u = FactorMatrix::zeros(observed.n_rows(), v_init.rank());
    CavityState::new(observed, FactorPair::new(u, v_init)?, lambda, 1)
}

impl Solver for CavityState {
    fn kind(&self) -> SolverKind {
        SolverKind::Cbmf
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

/// `(diag(γ) + w wᵀ)⁻¹` in closed form. Reference for the cavity update
/// derivation; the sweeps themselves never form this matrix.
pub fn sherman_morrison_inverse(diag: &[f64], w: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
    if diag.len() != w.len() {
        return Err(Error::usage(format!(
            "diagonal has length {} but the rank-one vector has length {}",
            diag.len(),
            w.len()
        )));
    }
    if let Some(k) = diag.iter().position(|&g| !(g > 0.0)) {
        return Err(Error::usage(format!("diagonal entry {k} is {}, must be positive", diag[k])));
    }
    let n = diag.len();
    let g: Vec<f64> = w.iter().zip(diag).map(|(x, d)| x / d).collect();
    let denom = 1.0 + w.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>();
    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let base = if i == j { 1.0 / diag[i] } else { 0.0 };
        base - g[i] * g[j] / denom
    }))
}
