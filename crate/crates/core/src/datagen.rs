//! Synthetic low-rank instances: `Y⁰ = U⁰(V⁰)ᵀ + Z` with standard-Gaussian
//! factors and i.i.d. Gaussian noise, each position observed with probability `c/N`.
//!
//! Only `U⁰`, `V⁰` and the seed are kept. The noise matrix is a deterministic
//! stream over positions in row-major order and is regenerated on demand, so
//! metrics over all `N·M` positions never need a dense `Y⁰`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::factors::{dot, write_factors, FactorMatrix, FactorPair};
use crate::observed::ObservedMatrix;
use crate::seed::{derive_seed, rng_from_seed};

const FACTOR_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// Noise variance used in the reference synthetic experiments.
pub const REFERENCE_NOISE_VAR: f64 = 0.09;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rank: usize,
    /// Mean number of observations per column.
    pub c: f64,
    pub noise_var: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::usage("matrix dimensions must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::usage("rank must be at least 1"));
        }
        if !(self.c > 0.0 && self.c <= self.n_rows as f64) {
            return Err(Error::usage(format!(
                "c must lie in (0, N = {}], got {}",
                self.n_rows, self.c
            )));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::usage(format!(
                "noise variance must be nonnegative, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    pub fn observation_probability(&self) -> f64 {
        self.c / self.n_rows as f64
    }

    /// `c·M`, the expected |Ω|.
    pub fn expected_observations(&self) -> f64 {
        self.c * self.n_cols as f64
    }

    /// `R(N+M)`, the number of free parameters.
    pub fn degrees_of_freedom(&self) -> usize {
        self.rank * (self.n_rows + self.n_cols)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub config: SyntheticConfig,
    pub truth: FactorPair,
    pub observed: ObservedMatrix,
}

struct NoiseStream {
    rng: rand_chacha::ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl NoiseStream {
    fn new(config: &SyntheticConfig) -> Self {
        let normal = (config.noise_var > 0.0)
            .then(|| Normal::new(0.0, config.noise_var.sqrt()).expect("validated variance"));
        Self {
            rng: rng_from_seed(derive_seed(config.seed, &[NOISE_STREAM])),
            normal,
        }
    }

    fn next(&mut self) -> f64 {
        match &self.normal {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        }
    }
}

/// Draws a synthetic instance; deterministic in `config.seed`.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticInstance> {
    config.validate()?;
    let (n, m, rank) = (config.n_rows, config.n_cols, config.rank);
    if config.expected_observations() < config.degrees_of_freedom() as f64 {
        log::warn!(
            "expected |Ω| = {:.0} is below R(N+M) = {}; the factorization is not identifiable",
            config.expected_observations(),
            config.degrees_of_freedom()
        );
    }

    let mut frng = rng_from_seed(derive_seed(config.seed, &[FACTOR_STREAM]));
    let mut draw = |rows: usize| -> Vec<f64> {
        (0..rows * rank)
            .map(|_| StandardNormal.sample(&mut frng))
            .collect()
    };
    let u0 = FactorMatrix::from_vec(n, rank, draw(n))?;
    let v0 = FactorMatrix::from_vec(m, rank, draw(m))?;
    let truth = FactorPair::new(u0, v0)?;

    let p = config.observation_probability();
    let mut noise = NoiseStream::new(config);
    let mut mask = rng_from_seed(derive_seed(config.seed, &[MASK_STREAM]));
    let mut triples = Vec::with_capacity(config.expected_observations().ceil() as usize);
    for row in 0..n {
        for col in 0..m {
            let z = noise.next();
            let keep = p >= 1.0 || mask.random::<f64>() < p;
            if keep {
                triples.push((row, col, dot(truth.u.row(row), truth.v.row(col)) + z));
            }
        }
    }
    let observed = ObservedMatrix::from_triples(n, m, triples)?;
    Ok(SyntheticInstance {
        config: config.clone(),
        truth,
        observed,
    })
}

impl SyntheticInstance {
    /// Calls `f(row, y⁰_row)` for every row of the full ground-truth matrix.
    pub fn for_each_truth_row(&self, mut f: impl FnMut(usize, &[f64])) {
        let m = self.config.n_cols;
        let mut noise = NoiseStream::new(&self.config);
        let mut buf = vec![0.0; m];
        for row in 0..self.config.n_rows {
            let u = self.truth.u.row(row);
            for (col, y) in buf.iter_mut().enumerate() {
                *y = dot(u, self.truth.v.row(col)) + noise.next();
            }
            f(row, &buf);
        }
    }

    /// Writes `<prefix>.triples`, `<prefix>.truth` and `<prefix>.meta`.
    pub fn export(&self, prefix: &Path) -> Result<()> {
        write_triples(&with_suffix(prefix, "triples"), &self.observed)?;
        write_factors(&with_suffix(prefix, "truth"), &self.truth)?;
        write_meta(&with_suffix(prefix, "meta"), &self.config)
    }
}

pub fn with_suffix(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

/// One `row col value` line per observation, zero-based indices.
pub fn write_triples(path: &Path, observed: &ObservedMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in observed.entries() {
        writeln!(w, "{} {} {:?}", e.row, e.col, e.value).map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_meta(path: &Path, config: &SyntheticConfig) -> Result<()> {
    let text = format!(
        "n_rows={}\nn_cols={}\nrank={}\nc={:?}\nnoise_var={:?}\nseed={}\n",
        config.n_rows, config.n_cols, config.rank, config.c, config.noise_var, config.seed
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<SyntheticConfig> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kv = std::collections::HashMap::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::data(Some(k + 1), format!("expected key=value, got {line:?}")))?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    fn field<T: std::str::FromStr>(kv: &std::collections::HashMap<String, String>, key: &str) -> Result<T> {
        kv.get(key)
            .ok_or_else(|| Error::data(None, format!("meta file lacks {key}")))?
            .parse()
            .map_err(|_| Error::data(None, format!("meta field {key} is malformed")))
    }
    let config = SyntheticConfig {
        n_rows: field(&kv, "n_rows")?,
        n_cols: field(&kv, "n_cols")?,
        rank: field(&kv, "rank")?,
        c: field(&kv, "c")?,
        noise_var: field(&kv, "noise_var")?,
        seed: field(&kv, "seed")?,
    };
    config.validate()?;
    Ok(config)
}
