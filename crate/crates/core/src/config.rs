use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Learning-rate schedule for SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSchedule {
    pub eta0: f64,
    pub decay: f64,
    pub rule: ScheduleRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleRule {
    Constant,
    /// `eta0 / (1 + decay * epoch)`
    InverseTime,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            eta0: 0.05,
            decay: 0.1,
            rule: ScheduleRule::InverseTime,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::usage(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::usage(format!(
                "decay must be nonnegative, got {}",
                self.decay
            )));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn rate(&self, epoch: usize) -> f64 {
        match self.rule {
            ScheduleRule::Constant => self.eta0,
            ScheduleRule::InverseTime => self.eta0 / (1.0 + self.decay * epoch as f64),
        }
    }
}

impl FromStr for ScheduleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "inverse_time" | "inverse-time" => Ok(Self::InverseTime),
            other => Err(Error::usage(format!(
                "unknown schedule {other:?} (expected constant or inverse_time)"
            ))),
        }
    }
}

/// Solver hyperparameters shared by all four algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Stop once the relative factor change of a sweep drops below this.
    pub convergence_tol: f64,
    pub seed: u64,
    /// Repeats of each half-sweep block before switching sides (CBMF/ACBMF).
    pub inner_iterations: usize,
    /// Standard deviation of the initial factors; `None` means `1/√R`.
    pub init_scale: Option<f64>,
    /// SGD schedule; `None` uses [`SgdSchedule::default`].
    pub sgd: Option<SgdSchedule>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            lambda: 1e-2,
            max_sweeps: 200,
            convergence_tol: 1e-6,
            seed: 0,
            inner_iterations: 1,
            init_scale: None,
            sgd: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::usage("rank must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::usage("max_sweeps must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::usage(format!(
                "convergence_tol must be nonnegative, got {}",
                self.convergence_tol
            )));
        }
        if self.inner_iterations == 0 {
            return Err(Error::usage("inner_iterations must be at least 1"));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::usage(format!("init_scale must be positive, got {s}")));
            }
        }
        if let Some(sgd) = &self.sgd {
            sgd.validate()?;
        }
        Ok(())
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| crate::factors::default_init_scale(self.rank))
    }

    pub fn schedule(&self) -> SgdSchedule {
        self.sgd.unwrap_or_default()
    }
}

/// Algorithm tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolverKind {
    Als,
    Sgd,
    Cbmf,
    Acbmf,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [Self::Als, Self::Sgd, Self::Cbmf, Self::Acbmf];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Als => "als",
            Self::Sgd => "sgd",
            Self::Cbmf => "cbmf",
            Self::Acbmf => "acbmf",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown solver {s:?}; valid solvers: als, sgd, cbmf, acbmf"
                ))
            })
    }
}
