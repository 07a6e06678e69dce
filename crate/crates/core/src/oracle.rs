//! Brute-force references on tiny instances, compiled only with the `oracle`
//! feature. Nothing here is used by the solvers.
//!
//! [`oracle_cavity_messages`] obtains every factor-to-variable message by
//! explicitly minimizing out the other variables of the factor with a dense
//! solve and reading the resulting quadratic off three evaluations.
//! [`oracle_global_min`] is a multi-start descent on the full objective.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factors::{objective, FactorMatrix, FactorPair};
use crate::observed::ObservedMatrix;
use crate::seed::{derive_seed, rng_from_seed};

pub const MAX_NODES: usize = 8;
pub const MAX_RANK: usize = 2;
pub const MAX_ENTRIES: usize = 8;

/// Default restart count of [`oracle_global_min`].
pub const DEFAULT_RESTARTS: usize = 128;

fn check_caps(observed: &ObservedMatrix, rank: usize) -> Result<()> {
    if observed.n_rows() + observed.n_cols() > MAX_NODES || rank > MAX_RANK || rank == 0 || observed.len() > MAX_ENTRIES {
        return Err(Error::usage(format!(
            "oracle instance {}x{}, R={}, |Ω|={} exceeds N+M ≤ {MAX_NODES}, 1 ≤ R ≤ {MAX_RANK}, |Ω| ≤ {MAX_ENTRIES}",
            observed.n_rows(),
            observed.n_cols(),
            rank,
            observed.len()
        )));
    }
    Ok(())
}

struct DisjointSets(Vec<usize>);

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// False if `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// True if the factor graph (one variable per `u_{μr}` and `v_{ir}`, one factor
/// per observation joining its `2R` variables) contains a cycle.
pub fn factor_graph_has_cycle(observed: &ObservedMatrix, rank: usize) -> bool {
    let (n, m) = (observed.n_rows(), observed.n_cols());
    let n_vars = (n + m) * rank;
    let mut sets = DisjointSets::new(n_vars + observed.len());
    for e in observed.entries().enumerate() {
        let (id, e) = e;
        let factor = n_vars + id;
        for r in 0..rank {
            if !sets.union(factor, e.row * rank + r) || !sets.union(factor, (n + e.col) * rank + r) {
                return true;
            }
        }
    }
    false
}

/// An observed matrix with a cycle-free factor graph, within the oracle caps.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeInstance {
    observed: ObservedMatrix,
    rank: usize,
}

impl TreeInstance {
    pub fn new(observed: ObservedMatrix, rank: usize) -> Result<Self> {
        check_caps(&observed, rank)?;
        if factor_graph_has_cycle(&observed, rank) {
            return Err(Error::usage("factor graph contains a cycle"));
        }
        Ok(Self { observed, rank })
    }

    /// Random instance: a bipartite forest for `R = 1`, a matching for `R = 2`
    /// (any row or column of degree two closes a cycle through its two rank components).
    pub fn random(seed: u64, rank: usize) -> Result<Self> {
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::usage(format!("rank must lie in 1..={MAX_RANK}")));
        }
        let mut rng = rng_from_seed(seed);
        let values = Normal::new(0.0, 2.0).expect("valid");
        let n = rng.random_range(1..=4usize);
        let m = rng.random_range(1..=(MAX_NODES - n).min(4));
        let mut triples = Vec::new();
        if rank == 1 {
            let mut candidates: Vec<(usize, usize)> =
                (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).collect();
            candidates.shuffle(&mut rng);
            let target = rng.random_range(1..=(n + m - 1));
            let mut sets = DisjointSets::new(n + m);
            for (r, c) in candidates {
                if triples.len() == target {
                    break;
                }
                if sets.union(r, n + c) {
                    triples.push((r, c, values.sample(&mut rng)));
                }
            }
        } else {
            let mut rows: Vec<usize> = (0..n).collect();
            let mut cols: Vec<usize> = (0..m).collect();
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let k = rng.random_range(1..=n.min(m));
            for (&r, &c) in rows.iter().zip(&cols).take(k) {
                triples.push((r, c, values.sample(&mut rng)));
            }
        }
        Self::new(ObservedMatrix::from_triples(n, m, triples)?, rank)
    }

    pub fn observed(&self) -> &ObservedMatrix {
        &self.observed
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn transpose(&self) -> Self {
        Self {
            observed: self.observed.transpose(),
            rank: self.rank,
        }
    }
}

/// Converged factor-to-variable messages towards the row variables, with the
/// column factors held fixed, and the resulting node minimizers.
#[derive(Debug, Clone)]
pub struct OracleMessages {
    /// `â`, indexed `entry * R + r`.
    pub a_hat: Vec<f64>,
    /// `b̂`, indexed `entry * R + r`.
    pub b_hat: Vec<f64>,
    /// `u_{μr} = Σ b̂ / (Σ â + λ)`.
    pub u: FactorMatrix,
    pub iterations: usize,
}

/// `min_x ½(c − wᵀx)² + Σ_s [½ p_s x_s² − q_s x_s]` by a dense solve.
fn minimize_out(c: f64, w: &[f64], p: &[f64], q: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Ok(0.5 * c * c);
    }
    let wv = DVector::from_column_slice(w);
    let hess = DMatrix::from_diagonal(&DVector::from_column_slice(p)) + &wv * wv.transpose();
    let rhs = &wv * c + DVector::from_column_slice(q);
    let x = hess
        .cholesky()
        .ok_or_else(|| Error::Numerical("cavity Hessian is not positive definite".into()))?
        .solve(&rhs);
    let resid = c - wv.dot(&x);
    let mut h = 0.5 * resid * resid;
    for s in 0..w.len() {
        h += 0.5 * p[s] * x[s] * x[s] - q[s] * x[s];
    }
    Ok(h)
}

/// Messages towards `u` for a tree instance with `V = v_fixed`, iterated from
/// zero until they stop changing.
pub fn oracle_cavity_messages(
    instance: &TreeInstance,
    lambda: f64,
    v_fixed: &FactorMatrix,
) -> Result<OracleMessages> {
    let obs = &instance.observed;
    let rank = instance.rank;
    if v_fixed.n_rows() != obs.n_cols() || v_fixed.rank() != rank {
        return Err(Error::usage("fixed factors do not match the instance"));
    }
    if !(lambda > 0.0) {
        return Err(Error::usage("the cavity oracle needs lambda > 0"));
    }
    let nnz = obs.len();
    let mut a_hat = vec![0.0; nnz * rank];
    let mut b_hat = vec![0.0; nnz * rank];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut next_a = vec![0.0; nnz * rank];
        let mut next_b = vec![0.0; nnz * rank];
        for e in 0..nnz {
            let entry = obs.entry(e);
            let w = v_fixed.row(entry.col);
            // variable-to-factor messages: every other factor on the same row variable
            let incoming = |hat: &[f64], s: usize| -> f64 {
                obs.row_range(entry.row)
                    .filter(|&k| k != e)
                    .map(|k| hat[k * rank + s])
                    .sum()
            };
            for r in 0..rank {
                let others: Vec<usize> = (0..rank).filter(|&s| s != r).collect();
                let ws: Vec<f64> = others.iter().map(|&s| w[s]).collect();
                let p: Vec<f64> = others.iter().map(|&s| incoming(&a_hat, s) + lambda).collect();
                let q: Vec<f64> = others.iter().map(|&s| incoming(&b_hat, s)).collect();
                let h = |u: f64| minimize_out(entry.value - u * w[r], &ws, &p, &q);
                let (hm, h0, hp) = (h(-1.0)?, h(0.0)?, h(1.0)?);
                next_a[e * rank + r] = hp + hm - 2.0 * h0;
                next_b[e * rank + r] = -(hp - hm) / 2.0;
            }
        }
        let change = a_hat
            .iter()
            .zip(&next_a)
            .chain(b_hat.iter().zip(&next_b))
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f64::max);
        a_hat = next_a;
        b_hat = next_b;
        if change == 0.0 || (change < 1e-15 && iterations > 1) {
            break;
        }
        if iterations > 10_000 {
            return Err(Error::Numerical("oracle messages did not settle".into()));
        }
    }
    let mut u = FactorMatrix::zeros(obs.n_rows(), rank);
    for row in 0..obs.n_rows() {
        for r in 0..rank {
            let a: f64 = obs.row_range(row).map(|k| a_hat[k * rank + r]).sum();
            let b: f64 = obs.row_range(row).map(|k| b_hat[k * rank + r]).sum();
            u.row_mut(row)[r] = b / (a + lambda);
        }
    }
    Ok(OracleMessages {
        a_hat,
        b_hat,
        u,
        iterations,
    })
}

fn gradient(theta: &[f64], observed: &ObservedMatrix, rank: usize, lambda: f64, grad: &mut [f64]) {
    let off = observed.n_rows() * rank;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g = lambda * t;
    }
    for e in observed.entries() {
        let (ui, vi) = (e.row * rank, off + e.col * rank);
        let pred: f64 = (0..rank).map(|r| theta[ui + r] * theta[vi + r]).sum();
        let resid = e.value - pred;
        for r in 0..rank {
            grad[ui + r] -= resid * theta[vi + r];
            grad[vi + r] -= resid * theta[ui + r];
        }
    }
}

fn value(theta: &[f64], observed: &ObservedMatrix, rank: usize, lambda: f64) -> f64 {
    let off = observed.n_rows() * rank;
    let loss: f64 = observed
        .entries()
        .map(|e| {
            let pred: f64 = (0..rank)
                .map(|r| theta[e.row * rank + r] * theta[off + e.col * rank + r])
                .sum();
            (e.value - pred).powi(2)
        })
        .sum();
    0.5 * loss + 0.5 * lambda * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Gradient descent with Armijo backtracking from `theta`.
fn descend(theta: &mut [f64], observed: &ObservedMatrix, rank: usize, lambda: f64) -> f64 {
    let mut grad = vec![0.0; theta.len()];
    let mut trial = vec![0.0; theta.len()];
    let mut f = value(theta, observed, rank, lambda);
    let mut step: f64 = 1.0;
    for _ in 0..200_000 {
        gradient(theta, observed, rank, lambda, &mut grad);
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < 1e-13 {
            break;
        }
        step = (step * 2.0).min(1e3);
        loop {
            for ((t, x), g) in trial.iter_mut().zip(theta.iter()).zip(&grad) {
                *t = x - step * g;
            }
            let ft = value(&trial, observed, rank, lambda);
            if ft <= f - 1e-4 * step * gnorm2 {
                theta.copy_from_slice(&trial);
                f = ft;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return f;
            }
        }
    }
    f
}

/// Best local minimum of the regularized objective over [`DEFAULT_RESTARTS`] restarts.
pub fn oracle_global_min(observed: &ObservedMatrix, lambda: f64, rank: usize) -> Result<FactorPair> {
    oracle_global_min_with(observed, lambda, rank, DEFAULT_RESTARTS, 0)
}

/// Multi-start search: restart `k` draws Gaussian factors at a scale taken
/// cyclically from a fixed grid, then descends to a stationary point.
pub fn oracle_global_min_with(
    observed: &ObservedMatrix,
    lambda: f64,
    rank: usize,
    restarts: usize,
    seed: u64,
) -> Result<FactorPair> {
    check_caps(observed, rank)?;
    if restarts == 0 {
        return Err(Error::usage("restarts must be at least 1"));
    }
    const SCALES: [f64; 4] = [0.1, 0.5, 1.5, 4.0];
    let dim = (observed.n_rows() + observed.n_cols()) * rank;
    let best = (0..restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, &[k as u64]));
            let normal = Normal::new(0.0, SCALES[k % SCALES.len()]).expect("valid");
            let mut theta: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let f = descend(&mut theta, observed, rank, lambda);
            (f, k, theta)
        })
        .reduce_with(|a, b| if (b.0, b.1) < (a.0, a.1) { b } else { a })
        .expect("at least one restart");
    let split = observed.n_rows() * rank;
    let pair = FactorPair::new(
        FactorMatrix::from_vec(observed.n_rows(), rank, best.2[..split].to_vec())?,
        FactorMatrix::from_vec(observed.n_cols(), rank, best.2[split..].to_vec())?,
    )?;
    debug_assert!((objective(&pair, observed, lambda)? - best.0).abs() <= 1e-12 * (1.0 + best.0));
    Ok(pair)
}
