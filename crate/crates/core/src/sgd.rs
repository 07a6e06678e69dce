//! Stochastic gradient descent over observed entries.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{SgdSchedule, SolverConfig, SolverKind};
use crate::error::{Error, Result};
use crate::factors::{dot, FactorPair};
use crate::observed::ObservedMatrix;
use crate::seed::{derive_seed, rng_from_seed};
use crate::solver::Solver;

/// One gradient step on `½e² + (λ/2)(‖u‖² + ‖v‖²)` with `e = y − u·v`.
///
/// The residual is taken from the incoming vectors and both updates use the old
/// values, so this is a true gradient step on the per-entry loss.
pub fn sgd_step(u: &mut [f64], v: &mut [f64], y: f64, eta: f64, lambda: f64) {
    let e = y - dot(u, v);
    for (ur, vr) in u.iter_mut().zip(v.iter_mut()) {
        let (u0, v0) = (*ur, *vr);
        *ur = u0 - eta * (lambda * u0 - e * v0);
        *vr = v0 - eta * (lambda * v0 - e * u0);
    }
}

#[derive(Debug, Clone)]
pub struct SgdState {
    pub factors: FactorPair,
    pub epoch: usize,
    lambda: f64,
    schedule: SgdSchedule,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    steps: usize,
}

impl SgdState {
    pub fn new(factors: FactorPair, config: &SolverConfig) -> Result<Self> {
        let schedule = config.schedule();
        schedule.validate()?;
        Ok(Self {
            factors,
            epoch: 0,
            lambda: config.lambda,
            schedule,
            rng: rng_from_seed(derive_seed(config.seed, &[0x5D6D])),
            order: Vec::new(),
            steps: 0,
        })
    }

    /// Total number of `sgd_step` calls so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_rate(&self) -> f64 {
        self.schedule.rate(self.epoch)
    }
}

/// Visits every observed entry once in a fresh random order.
pub fn sgd_epoch(state: &mut SgdState, observed: &ObservedMatrix) -> Result<()> {
    state.factors.check_shape(observed)?;
    let eta = state.schedule.rate(state.epoch);
    if state.order.len() != observed.len() {
        state.order = (0..observed.len()).collect();
    }
    state.order.shuffle(&mut state.rng);
    let rank = state.factors.rank();
    let FactorPair { u, v } = &mut state.factors;
    let (us, vs) = (u.as_mut_slice(), v.as_mut_slice());
    for &e in &state.order {
        let entry = observed.entry(e);
        let ur = &mut us[entry.row * rank..(entry.row + 1) * rank];
        let vr = &mut vs[entry.col * rank..(entry.col + 1) * rank];
        sgd_step(ur, vr, entry.value, eta, state.lambda);
    }
    state.steps += observed.len();
    state.epoch += 1;
    if !state.factors.is_finite() {
        return Err(Error::Divergence {
            sweep: state.epoch,
            detail: format!("sgd factors became non-finite (eta = {eta})"),
        });
    }
    Ok(())
}

impl Solver for SgdState {
    fn kind(&self) -> SolverKind {
        SolverKind::Sgd
    }

    fn sweep(&mut self, observed: &ObservedMatrix, _sweep: usize) -> Result<()> {
        sgd_epoch(self, observed)
    }

    fn factors(&self) -> &FactorPair {
        &self.factors
    }

    fn into_factors(self) -> FactorPair {
        self.factors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleRule;
    use crate::datagen::{generate, SyntheticConfig};
    use crate::factors::{init_factors, objective};
    use rand::Rng;

    fn local_loss(u: &[f64], v: &[f64], y: f64, lambda: f64) -> f64 {
        let e = y - dot(u, v);
        0.5 * e * e + 0.5 * lambda * (dot(u, u) + dot(v, v))
    }

    #[test]
    fn textbook_step() {
        let (mut u, mut v) = (vec![0.0], vec![1.0]);
        sgd_step(&mut u, &mut v, 1.0, 0.5, 0.0);
        assert_eq!(u, vec![0.5]);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut u, mut v) = (vec![1.0, 2.0], vec![0.5, 0.25]);
        sgd_step(&mut u, &mut v, 1.0, 0.3, 0.0);
        assert_eq!(u, vec![1.0, 2.0]);
        assert_eq!(v, vec![0.5, 0.25]);
    }

    #[test]
    fn small_step_does_not_increase_local_loss() {
        let mut rng = rng_from_seed(17);
        for _ in 0..200 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(-3.0..3.0);
            let lambda = rng.random_range(0.0..1.0);
            let before = local_loss(&u, &v, y, lambda);
            let (mut u2, mut v2) = (u.clone(), v.clone());
            sgd_step(&mut u2, &mut v2, y, 1e-4, lambda);
            assert!(local_loss(&u2, &v2, y, lambda) <= before + 1e-15);
        }
    }

    fn tiny() -> crate::datagen::SyntheticInstance {
        generate(&SyntheticConfig {
            n_rows: 20,
            n_cols: 25,
            rank: 2,
            c: 8.0,
            noise_var: 0.01,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn epoch_visits_every_entry_once() {
        let inst = tiny();
        let cfg = SolverConfig { rank: 2, ..Default::default() };
        let mut s = SgdState::new(init_factors(20, 25, 2, 1, 0.5).unwrap(), &cfg).unwrap();
        sgd_epoch(&mut s, &inst.observed).unwrap();
        assert_eq!(s.steps(), inst.observed.len());
        sgd_epoch(&mut s, &inst.observed).unwrap();
        assert_eq!(s.steps(), 2 * inst.observed.len());
    }

    #[test]
    fn same_seed_same_factors() {
        let inst = tiny();
        let cfg = SolverConfig { rank: 2, seed: 9, ..Default::default() };
        let run = || {
            let mut s = SgdState::new(init_factors(20, 25, 2, 9, 0.5).unwrap(), &cfg).unwrap();
            for _ in 0..5 {
                sgd_epoch(&mut s, &inst.observed).unwrap();
            }
            s.factors
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_rate_epoch_descends_for_most_seeds() {
        let inst = tiny();
        let lambda = 0.05;
        let descents = (0..10u64)
            .filter(|&seed| {
                let cfg = SolverConfig {
                    rank: 2,
                    lambda,
                    seed,
                    sgd: Some(SgdSchedule { eta0: 0.01, decay: 0.0, rule: ScheduleRule::Constant }),
                    ..Default::default()
                };
                let mut s = SgdState::new(init_factors(20, 25, 2, seed, 0.5).unwrap(), &cfg).unwrap();
                let before = objective(&s.factors, &inst.observed, lambda).unwrap();
                sgd_epoch(&mut s, &inst.observed).unwrap();
                objective(&s.factors, &inst.observed, lambda).unwrap() < before
            })
            .count();
        assert!(descents >= 9, "{descents} of 10");
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let inst = tiny();
        let cfg = SolverConfig {
            rank: 2,
            sgd: Some(SgdSchedule { eta0: 50.0, decay: 0.0, rule: ScheduleRule::Constant }),
            ..Default::default()
        };
        let mut s = SgdState::new(init_factors(20, 25, 2, 1, 1.0).unwrap(), &cfg).unwrap();
        let err = (0..20).find_map(|_| sgd_epoch(&mut s, &inst.observed).err());
        assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
    }
}
