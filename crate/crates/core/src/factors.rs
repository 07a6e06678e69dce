//! Dense factor matrices `U` (N×R) and `V` (M×R), the objective, and the
//! plain-text factor file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::observed::ObservedMatrix;
use crate::seed::rng_from_seed;

/// Row-major dense matrix with `rank` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    n_rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(n_rows: usize, rank: usize) -> Self {
        Self {
            n_rows,
            rank,
            data: vec![0.0; n_rows * rank],
        }
    }

    pub fn from_vec(n_rows: usize, rank: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * rank {
            return Err(Error::usage(format!(
                "factor data has {} values, expected {n_rows}x{rank}",
                data.len()
            )));
        }
        Ok(Self { n_rows, rank, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.rank..(i + 1) * self.rank]
    }

    pub fn get(&self, i: usize, r: usize) -> f64 {
        self.data[i * self.rank + r]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Returns a copy whose columns are reordered: new column `k` is old column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.n_rows, self.rank);
        for i in 0..self.n_rows {
            let src = self.row(i);
            for (dst, &p) in out.row_mut(i).iter_mut().zip(perm) {
                *dst = src[p];
            }
        }
        out
    }
}

/// `U` and `V` sharing a common rank.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub u: FactorMatrix,
    pub v: FactorMatrix,
}

impl FactorPair {
    pub fn new(u: FactorMatrix, v: FactorMatrix) -> Result<Self> {
        if u.rank() != v.rank() {
            return Err(Error::usage(format!(
                "rank mismatch: U has {}, V has {}",
                u.rank(),
                v.rank()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(n_rows: usize, n_cols: usize, rank: usize) -> Self {
        Self {
            u: FactorMatrix::zeros(n_rows, rank),
            v: FactorMatrix::zeros(n_cols, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.rank()
    }

    pub fn n_rows(&self) -> usize {
        self.u.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.v.n_rows()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Prediction without bounds checks beyond slice indexing.
    #[inline]
    pub fn predict_unchecked(&self, row: usize, col: usize) -> f64 {
        dot(self.u.row(row), self.v.row(col))
    }

    pub fn check_shape(&self, observed: &ObservedMatrix) -> Result<()> {
        if self.n_rows() != observed.n_rows() || self.n_cols() != observed.n_cols() {
            return Err(Error::usage(format!(
                "factors are {}x{} but the observed matrix is {}x{}",
                self.n_rows(),
                self.n_cols(),
                observed.n_rows(),
                observed.n_cols()
            )));
        }
        Ok(())
    }

    /// Relative change `‖Δ‖_F / ‖self‖_F` over both factors, with `other` as the new iterate.
    pub fn relative_change(&self, other: &FactorPair) -> f64 {
        let diff: f64 = self
            .u
            .as_slice()
            .iter()
            .zip(other.u.as_slice())
            .chain(self.v.as_slice().iter().zip(other.v.as_slice()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let norm = self.u.frobenius_sq() + self.v.frobenius_sq();
        if norm == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (diff / norm).sqrt()
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u_row · v_col`.
pub fn predict(factors: &FactorPair, row: usize, col: usize) -> Result<f64> {
    if row >= factors.n_rows() || col >= factors.n_cols() {
        return Err(Error::usage(format!(
            "({row}, {col}) outside {}x{}",
            factors.n_rows(),
            factors.n_cols()
        )));
    }
    Ok(factors.predict_unchecked(row, col))
}

/// Regularized squared loss
/// `½ Σ_Ω (y − u·v)² + (λ/2)(‖U‖² + ‖V‖²)`.
pub fn objective(factors: &FactorPair, observed: &ObservedMatrix, lambda: f64) -> Result<f64> {
    factors.check_shape(observed)?;
    let loss: f64 = observed
        .entries()
        .map(|e| {
            let r = e.value - factors.predict_unchecked(e.row, e.col);
            r * r
        })
        .sum();
    Ok(0.5 * loss + 0.5 * lambda * (factors.u.frobenius_sq() + factors.v.frobenius_sq()))
}

/// Root mean squared residual over the observed entries.
pub fn train_rmse(factors: &FactorPair, observed: &ObservedMatrix) -> f64 {
    if observed.is_empty() {
        return 0.0;
    }
    let sse: f64 = observed
        .entries()
        .map(|e| {
            let r = e.value - factors.predict_unchecked(e.row, e.col);
            r * r
        })
        .sum();
    (sse / observed.len() as f64).sqrt()
}

pub fn default_init_scale(rank: usize) -> f64 {
    1.0 / (rank as f64).sqrt()
}

/// Gaussian initialization with standard deviation `scale`; `U` is drawn first, then `V`.
pub fn init_factors(
    n_rows: usize,
    n_cols: usize,
    rank: usize,
    seed: u64,
    scale: f64,
) -> Result<FactorPair> {
    if rank == 0 {
        return Err(Error::usage("rank must be at least 1"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::usage(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let normal = Normal::new(0.0, scale).expect("validated scale");
    let mut rng = rng_from_seed(seed);
    let u: Vec<f64> = (0..n_rows * rank).map(|_| normal.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..n_cols * rank).map(|_| normal.sample(&mut rng)).collect();
    Ok(FactorPair {
        u: FactorMatrix::from_vec(n_rows, rank, u)?,
        v: FactorMatrix::from_vec(n_cols, rank, v)?,
    })
}

/// Writes `N M R` then the rows of `U` followed by the rows of `V`, one row per line.
pub fn write_factors(path: &Path, factors: &FactorPair) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_factors_to(&mut w, factors).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_factors_to<W: Write>(w: &mut W, factors: &FactorPair) -> std::io::Result<()> {
    writeln!(
        w,
        "{} {} {}",
        factors.n_rows(),
        factors.n_cols(),
        factors.rank()
    )?;
    for m in [&factors.u, &factors.v] {
        for i in 0..m.n_rows() {
            let mut first = true;
            for x in m.row(i) {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                // `{:?}` prints the shortest representation that round-trips exactly
                write!(w, "{x:?}")?;
            }
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_factors(path: &Path) -> Result<FactorPair> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_factors_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_factors_from<R: BufRead>(reader: R) -> Result<FactorPair> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(Some(1), "missing header"))?;
    let header = header.map_err(|e| Error::io("<factors>", e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::data(Some(1), format!("bad header: {e}")))?;
    let [n, m, r] = dims[..] else {
        return Err(Error::data(Some(1), "header must be `N M R`"));
    };
    let mut data = Vec::with_capacity((n + m) * r);
    for (k, line) in lines {
        let line = line.map_err(|e| Error::io("<factors>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let x: f64 = tok
                .parse()
                .map_err(|e| Error::data(Some(k + 1), format!("bad value {tok:?}: {e}")))?;
            data.push(x);
        }
        if data.len() - before != r {
            return Err(Error::data(
                Some(k + 1),
                format!("expected {r} values, found {}", data.len() - before),
            ));
        }
    }
    if data.len() != (n + m) * r {
        return Err(Error::data(
            None,
            format!("expected {} rows, found {}", n + m, data.len() / r.max(1)),
        ));
    }
    let v = data.split_off(n * r);
    FactorPair::new(
        FactorMatrix::from_vec(n, r, data)?,
        FactorMatrix::from_vec(m, r, v)?,
    )
}
