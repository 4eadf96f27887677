//! Bayesian experiment planner over the discretized design grid.

pub mod acquisition;
pub mod gp;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{DesignAxes, DomainGrid};
use crate::exec::{argmax, Execution};
pub use acquisition::{
    acq_ei, acq_thompson, acq_ttei, acq_ucb, expected_improvement, upper_confidence_bound, AcquisitionError,
    AcquisitionKind,
};
pub use gp::{fit_gp, gp_predict, FitOptions, GpError, GpPosterior, Hyperparameters, ObservationSet, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("every grid point has been measured")]
    Exhausted,
    #[error("steps are numbered from 1")]
    StepZero,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub init_count: usize,
    pub random_period: usize,
    pub ucb_beta: f64,
    pub cycle: Vec<AcquisitionKind>,
    pub seed: u64,
    pub budget: usize,
    pub hyper_starts: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            init_count: 5,
            random_period: 5,
            ucb_beta: 2.0,
            cycle: vec![
                AcquisitionKind::ThompsonSampling,
                AcquisitionKind::ExpectedImprovement,
                AcquisitionKind::TopTwoEi,
                AcquisitionKind::Ucb,
            ],
            seed: 0,
            budget: 40,
            hyper_starts: 16,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let fail = |m: &str| Err(PlannerError::Config(m.to_string()));
        if self.init_count < 1 {
            return fail("init_count must be at least 1");
        }
        if self.random_period < 2 {
            return fail("random_period must be at least 2");
        }
        if self.budget < self.init_count {
            return fail("budget must be at least init_count");
        }
        if self.cycle.is_empty() {
            return fail("acquisition cycle is empty");
        }
        if !(self.ucb_beta.is_finite() && self.ucb_beta >= 0.0) {
            return fail("ucb_beta must be finite and non-negative");
        }
        if self.hyper_starts < 1 {
            return fail("hyper_starts must be at least 1");
        }
        Ok(())
    }

    /// Scheduled acquisition for a 1-based step.
    ///
    /// After the initial design, every `random_period`-th step is random and
    /// the others walk the cycle in order, so the cycle position does not skip
    /// past the random slots.
    pub fn kind_for_step(&self, step: usize) -> Result<AcquisitionKind, PlannerError> {
        if step == 0 {
            return Err(PlannerError::StepZero);
        }
        if step <= self.init_count {
            return Ok(AcquisitionKind::Random);
        }
        let k = step - self.init_count;
        if k.is_multiple_of(self.random_period) {
            return Ok(AcquisitionKind::Random);
        }
        let slot = k - 1 - k / self.random_period;
        Ok(self.cycle[slot % self.cycle.len()])
    }
}

/// Grid points already measured (successfully or not) and their outcomes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    measured: BTreeSet<usize>,
    observations: Vec<(usize, f64)>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `index` as used; `value` is `None` when the measurement failed.
    pub fn record(&mut self, index: usize, value: Option<f64>) {
        if self.measured.insert(index) {
            if let Some(v) = value.filter(|v| v.is_finite()) {
                self.observations.push((index, v));
            }
        }
    }

    pub fn is_measured(&self, index: usize) -> bool {
        self.measured.contains(&index)
    }

    pub fn measured_count(&self) -> usize {
        self.measured.len()
    }

    pub fn observations(&self) -> &[(usize, f64)] {
        &self.observations
    }

    pub fn best(&self) -> Option<f64> {
        self.observations.iter().map(|o| o.1).reduce(f64::max)
    }

    pub fn observation_set(&self, grid: &DomainGrid) -> ObservationSet {
        self.observations.iter().map(|&(i, y)| (grid.normalized(i), y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub index: usize,
    pub axes: DesignAxes,
    /// The acquisition that actually chose the point.
    pub kind: AcquisitionKind,
    /// Hyperparameters of the surrogate, when one was fitted.
    pub hyperparameters: Option<Hyperparameters>,
}

/// Random stream for one planner step; independent of every other step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Latin-hypercube draw over grid levels for the initial design, shared by
/// all initialization steps of a campaign.
fn initial_design(grid: &DomainGrid, cfg: &PlannerConfig) -> Vec<[usize; 3]> {
    let mut rng = step_rng(cfg.seed, 0);
    let n = cfg.init_count;
    let levels = grid.spec().levels;
    let mut cols: Vec<Vec<usize>> = Vec::with_capacity(3);
    for &l in &levels {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        cols.push(
            strata
                .into_iter()
                .map(|s| {
                    let lo = (s * l).div_ceil(n);
                    let hi = ((s + 1) * l).div_ceil(n);
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        // Fewer levels than strata: several strata share a level.
                        (s * l / n).min(l - 1)
                    }
                })
                .collect(),
        );
    }
    (0..n).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect()
}

fn nearest_unmeasured(grid: &DomainGrid, history: &History, target: [f64; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in (0..grid.len()).filter(|i| !history.is_measured(*i)) {
        let p = grid.normalized(i);
        let d: f64 = (0..3).map(|k| (p[k] - target[k]).powi(2)).sum();
        match best {
            Some((_, b)) if d >= b => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|b| b.0)
}

/// Chooses the next grid point to measure.
pub fn next_point<R: Rng + ?Sized>(
    history: &History,
    grid: &DomainGrid,
    cfg: &PlannerConfig,
    step: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<Proposal, PlannerError> {
    cfg.validate()?;
    let scheduled = cfg.kind_for_step(step)?;
    let candidates: Vec<usize> = (0..grid.len()).filter(|i| !history.is_measured(*i)).collect();
    if candidates.is_empty() {
        return Err(PlannerError::Exhausted);
    }
    let proposal = |index: usize, kind, hyperparameters| Proposal {
        index,
        axes: grid.point(index),
        kind,
        hyperparameters,
    };

    if step <= cfg.init_count {
        let design = initial_design(grid, cfg);
        let lv = design[step - 1];
        let target: [f64; 3] = std::array::from_fn(|k| {
            let l = grid.spec().levels[k];
            lv[k] as f64 / (l - 1) as f64
        });
        let index = nearest_unmeasured(grid, history, target).expect("candidates exist");
        return Ok(proposal(index, AcquisitionKind::Random, None));
    }

    let random_pick = |rng: &mut R| candidates[rng.random_range(0..candidates.len())];
    if scheduled == AcquisitionKind::Random || history.observations().len() < 2 {
        return Ok(proposal(random_pick(rng), AcquisitionKind::Random, None));
    }

    let obs = history.observation_set(grid);
    let fit_seed = rng.next_u64();
    let post = fit_gp(&obs, &FitOptions { starts: cfg.hyper_starts, seed: fit_seed, execution: exec, ..FitOptions::default() })?;
    let points: Vec<Point> = candidates.iter().map(|&i| grid.normalized(i)).collect();
    let best = history.best().expect("at least two observations");
    let pick = match scheduled {
        AcquisitionKind::ThompsonSampling => acq_thompson(&post, &points, rng, exec)?,
        AcquisitionKind::ExpectedImprovement => {
            let s = acquisition::ei_scores(&post, &points, best, exec)?;
            argmax(&s).expect("non-empty")
        }
        AcquisitionKind::TopTwoEi => acq_ttei(&post, &points, best, rng, exec)?,
        AcquisitionKind::Ucb => {
            let s = acquisition::ucb_scores(&post, &points, cfg.ucb_beta, exec)?;
            argmax(&s).expect("non-empty")
        }
        AcquisitionKind::Random => unreachable!("handled above"),
    };
    Ok(proposal(candidates[pick], scheduled, Some(*post.hyperparameters())))
}
