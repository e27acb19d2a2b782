//! The trainer contract the search drives, a synthetic trainer for
//! desk-scale runs, and the exhaustive grid oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::{enumerate_space, AlignmentPolicy, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrainerError {
    #[error("trainer failed: {0}")]
    Failed(String),
    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),
}

/// Identifies the population slot (or grid candidate) that owns a state.
pub type MemberId = usize;

/// What the search needs from a model trainer.
///
/// States are single-owner values. `clone_state` must return a state whose
/// further evolution is independent of the original, and `eval` must not
/// mutate anything.
pub trait Trainer: Sync {
    type State: Send;

    /// Fresh, untrained state for `owner`.
    fn init_state(&self, owner: MemberId) -> Result<Self::State, TrainerError>;

    /// Trains one epoch on images aligned with `policy`.
    fn step(&self, state: &mut Self::State, policy: AlignmentPolicy) -> Result<(), TrainerError>;

    /// Validation accuracy in `[0, 1]`.
    fn eval(&self, state: &Self::State, policy: AlignmentPolicy) -> Result<f64, TrainerError>;

    /// Independent copy of `state` handed to `new_owner`.
    fn clone_state(&self, state: &Self::State, new_owner: MemberId) -> Self::State;

    /// Called whenever a member's policy changes, e.g. to recompute
    /// normalization statistics.
    fn on_policy_change(
        &self,
        _state: &mut Self::State,
        _old: AlignmentPolicy,
        _new: AlignmentPolicy,
    ) -> Result<(), TrainerError> {
        Ok(())
    }
}

/// Parameters of the synthetic accuracy surface
/// `(1 - exp(-t/tau)) * (peak - c_m*|dm|/s_m - c_delta*|dd|/s_delta) + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTrainerConfig {
    pub optimum: AlignmentPolicy,
    pub peak_acc: f64,
    pub tau: f64,
    pub c_m: f64,
    pub c_delta: f64,
    pub noise_sigma: f64,
    /// Fault injection: `step` fails once a state has taken this many steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fail_after_steps: Option<u64>,
}

impl Default for SyntheticTrainerConfig {
    fn default() -> Self {
        Self {
            optimum: AlignmentPolicy::new(192, 4),
            peak_acc: 0.9,
            tau: 4.0,
            c_m: 0.01,
            c_delta: 0.01,
            noise_sigma: 0.0,
            fail_after_steps: None,
        }
    }
}

impl SyntheticTrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.into()));
        if !(self.peak_acc > 0.0 && self.peak_acc <= 1.0) {
            return bad("peak_acc must be in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.c_m >= 0.0 && self.c_delta >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Training progress plus the noise substream key of its owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticState {
    pub t: u64,
    stream: u64,
}

/// Deterministic stand-in for a face-recognition trainer.
///
/// Progress `t` counts epochs and survives policy changes, so cloning a
/// well-trained state helps the way copying weights does. Noise is a pure
/// function of `(seed, owner, t)`.
#[derive(Debug, Clone)]
pub struct SyntheticTrainer {
    cfg: SyntheticTrainerConfig,
    s_m: i64,
    s_delta: i64,
    seed: u64,
}

impl SyntheticTrainer {
    pub fn new(cfg: SyntheticTrainerConfig, space: &SearchSpace, seed: u64) -> Result<Self, TrainerError> {
        cfg.validate()?;
        Ok(Self { cfg, s_m: space.s_m, s_delta: space.s_delta, seed })
    }

    pub fn config(&self) -> &SyntheticTrainerConfig {
        &self.cfg
    }

    /// Noise-free accuracy after `t` epochs under `policy`.
    pub fn expected_accuracy(&self, t: f64, policy: AlignmentPolicy) -> f64 {
        let c = &self.cfg;
        let dm = (policy.m - c.optimum.m).abs() as f64 / self.s_m as f64;
        let dd = (policy.delta - c.optimum.delta).abs() as f64 / self.s_delta as f64;
        let quality = c.peak_acc - c.c_m * dm - c.c_delta * dd;
        (1.0 - (-t / c.tau).exp()) * quality
    }

    fn stream_key(&self, owner: MemberId) -> u64 {
        splitmix64(self.seed ^ splitmix64(owner as u64 + 1))
    }

    fn noise(&self, state: &SyntheticState) -> f64 {
        if self.cfg.noise_sigma == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(state.stream ^ splitmix64(state.t)));
        Normal::new(0.0, self.cfg.noise_sigma).expect("sigma validated").sample(&mut rng)
    }
}

impl Trainer for SyntheticTrainer {
    type State = SyntheticState;

    fn init_state(&self, owner: MemberId) -> Result<SyntheticState, TrainerError> {
        Ok(SyntheticState { t: 0, stream: self.stream_key(owner) })
    }

    fn step(&self, state: &mut SyntheticState, _policy: AlignmentPolicy) -> Result<(), TrainerError> {
        if let Some(limit) = self.cfg.fail_after_steps {
            if state.t >= limit {
                return Err(TrainerError::Failed(format!("injected failure after {limit} steps")));
            }
        }
        state.t += 1;
        Ok(())
    }

    fn eval(&self, state: &SyntheticState, policy: AlignmentPolicy) -> Result<f64, TrainerError> {
        let v = self.expected_accuracy(state.t as f64, policy) + self.noise(state);
        Ok(v.clamp(0.0, 1.0))
    }

    fn clone_state(&self, state: &SyntheticState, new_owner: MemberId) -> SyntheticState {
        SyntheticState { t: state.t, stream: self.stream_key(new_owner) }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEntry {
    pub policy: AlignmentPolicy,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub best_policy: AlignmentPolicy,
    pub best_accuracy: f64,
    /// One entry per candidate, in enumeration order.
    pub table: Vec<GridEntry>,
    pub trainer_steps: u64,
}

/// Trains every candidate from scratch for `epochs` and evaluates it.
/// Accuracy ties go to the earlier candidate.
pub fn run_grid<T: Trainer>(space: &SearchSpace, trainer: &T, epochs: u32) -> Result<GridResult, TrainerError> {
    run_grid_with(Execution::default(), space, trainer, epochs)
}

pub fn run_grid_with<T: Trainer>(
    exec: Execution,
    space: &SearchSpace,
    trainer: &T,
    epochs: u32,
) -> Result<GridResult, TrainerError> {
    let candidates: Vec<(usize, AlignmentPolicy)> = enumerate_space(space).into_iter().enumerate().collect();
    let rows = exec.map(&candidates, |&(i, p)| -> Result<GridEntry, TrainerError> {
        let mut state = trainer.init_state(i)?;
        for _ in 0..epochs {
            trainer.step(&mut state, p)?;
        }
        Ok(GridEntry { policy: p, accuracy: trainer.eval(&state, p)? })
    });
    let table = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = table
        .iter()
        .fold(None::<&GridEntry>, |best, e| match best {
            Some(b) if b.accuracy >= e.accuracy => Some(b),
            _ => Some(e),
        })
        .ok_or_else(|| TrainerError::InvalidConfig("search space is empty".into()))?;
    Ok(GridResult {
        best_policy: best.policy,
        best_accuracy: best.accuracy,
        trainer_steps: table.len() as u64 * epochs as u64,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer(cfg: SyntheticTrainerConfig) -> SyntheticTrainer {
        SyntheticTrainer::new(cfg, &SearchSpace::default(), 1234).unwrap()
    }

    #[test]
    fn steps_count_epochs() {
        let tr = trainer(SyntheticTrainerConfig::default());
        let p = AlignmentPolicy::new(232, 0);
        let mut s = tr.init_state(0).unwrap();
        tr.step(&mut s, p).unwrap();
        assert_eq!(s.t, 1);
        for _ in 0..29 {
            tr.step(&mut s, p).unwrap();
        }
        assert_eq!(s.t, 30);
    }

    #[test]
    fn clones_evolve_independently() {
        let tr = trainer(SyntheticTrainerConfig { noise_sigma: 0.01, ..Default::default() });
        let p = AlignmentPolicy::new(200, 0);
        let mut s = tr.init_state(3).unwrap();
        for _ in 0..5 {
            tr.step(&mut s, p).unwrap();
        }
        let mut c = tr.clone_state(&s, 4);
        let before = tr.eval(&s, p).unwrap();
        tr.step(&mut c, p).unwrap();
        assert_eq!((s.t, c.t), (5, 6));
        assert_eq!(tr.eval(&s, p).unwrap(), before);
    }

    #[test]
    fn closed_form_values() {
        let tr = trainer(SyntheticTrainerConfig::default());
        let star = AlignmentPolicy::new(192, 4);
        assert!((tr.expected_accuracy(1e6, star) - 0.9).abs() < 1e-12);
        let tau = tr.config().tau;
        assert!((tr.expected_accuracy(tau, star) - 0.9 * (1.0 - (-1f64).exp())).abs() < 1e-12);
        assert!((tr.expected_accuracy(tau, star) - 0.568_908_5).abs() < 1e-6);
        assert!((tr.expected_accuracy(1e6, AlignmentPolicy::new(200, 4)) - 0.89).abs() < 1e-12);
    }

    #[test]
    fn eval_clamps_into_unit_interval() {
        let tr = trainer(SyntheticTrainerConfig { peak_acc: 0.05, c_m: 0.5, c_delta: 0.5, ..Default::default() });
        let mut s = tr.init_state(0).unwrap();
        tr.step(&mut s, AlignmentPolicy::new(232, 0)).unwrap();
        assert_eq!(tr.eval(&s, AlignmentPolicy::new(160, -32)).unwrap(), 0.0);
    }

    #[test]
    fn noise_depends_only_on_owner_and_progress() {
        let tr = trainer(SyntheticTrainerConfig { noise_sigma: 0.05, ..Default::default() });
        let p = AlignmentPolicy::new(200, 0);
        let run = |owner| {
            let mut s = tr.init_state(owner).unwrap();
            (0..10)
                .map(|_| {
                    tr.step(&mut s, p).unwrap();
                    tr.eval(&s, p).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(2), run(2));
        assert_ne!(run(2), run(3));
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            SyntheticTrainerConfig { peak_acc: 0.0, ..Default::default() },
            SyntheticTrainerConfig { tau: 0.0, ..Default::default() },
            SyntheticTrainerConfig { c_m: -1.0, ..Default::default() },
            SyntheticTrainerConfig { noise_sigma: f64::NAN, ..Default::default() },
        ] {
            assert!(SyntheticTrainer::new(cfg, &SearchSpace::default(), 0).is_err());
        }
    }

    #[test]
    fn injected_failure() {
        let tr = trainer(SyntheticTrainerConfig { fail_after_steps: Some(2), ..Default::default() });
        let p = AlignmentPolicy::new(232, 0);
        let mut s = tr.init_state(0).unwrap();
        tr.step(&mut s, p).unwrap();
        tr.step(&mut s, p).unwrap();
        assert!(tr.step(&mut s, p).is_err());
    }

    #[test]
    fn grid_finds_planted_optimum() {
        let space = SearchSpace::default();
        let tr = trainer(SyntheticTrainerConfig::default());
        let g = run_grid(&space, &tr, 30).unwrap();
        assert_eq!(g.best_policy, AlignmentPolicy::new(192, 4));
        assert_eq!(g.table.len(), 93);
        assert_eq!(g.trainer_steps, 93 * 30);
        let seq = run_grid_with(Execution::Sequential, &space, &tr, 30).unwrap();
        assert_eq!(seq, g);
    }
}
