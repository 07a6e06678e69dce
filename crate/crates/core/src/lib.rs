//! Sparse low-rank matrix completion.
//!
//! Four solvers minimize the regularized squared loss
//! `½ Σ_Ω (y − u·v)² + (λ/2)(‖U‖² + ‖V‖²)` over observed entries:
//! alternating least squares ([`als`]), stochastic gradient descent ([`sgd`]),
//! cavity-based message passing ([`cbmf`]) and its per-node approximation
//! ([`acbmf`]). [`datagen`] and [`ingest`] produce observed matrices, and
//! [`eval`] runs the reconstruction and cross-validation protocols.

pub mod acbmf;
pub mod als;
pub mod cbmf;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod factors;
pub mod ingest;
pub mod observed;
#[cfg(feature = "oracle")]
pub mod oracle;
mod par;
pub mod seed;
pub mod sgd;
pub mod solver;

pub use acbmf::{verify_stationarity, AcbmfState};
pub use als::{als_row_update, als_sweep, AlsState};
pub use cbmf::{cbmf_init, sherman_morrison_inverse, CavityState};
pub use config::{ScheduleRule, SgdSchedule, SolverConfig, SolverKind};
pub use datagen::{generate, SyntheticConfig, SyntheticInstance};
pub use error::{Error, Result};
pub use factors::{init_factors, objective, predict, train_rmse, FactorMatrix, FactorPair};
pub use observed::{build_observed, Entry, ObservedMatrix};
pub use sgd::{sgd_epoch, sgd_step, SgdState};
pub use solver::{solve, solve_from, Solver, SolveOutcome, TraceRecord};
