//! Acquisition functions scored over a finite candidate set.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use super::gp::{GpPosterior, Point};
use crate::exec::{argmax, Execution};

/// Above this many candidates Thompson sampling draws independent marginals.
pub const JOINT_THOMPSON_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    ThompsonSampling,
    ExpectedImprovement,
    TopTwoEi,
    Ucb,
    Random,
}

impl AcquisitionKind {
    pub fn label(self) -> &'static str {
        match self {
            AcquisitionKind::ThompsonSampling => "thompson_sampling",
            AcquisitionKind::ExpectedImprovement => "expected_improvement",
            AcquisitionKind::TopTwoEi => "top_two_ei",
            AcquisitionKind::Ucb => "ucb",
            AcquisitionKind::Random => "random",
        }
    }
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("negative posterior standard deviation {0}")]
    NegativeSigma(f64),
    #[error("empty candidate set")]
    NoCandidates,
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form expected improvement of N(mean, sigma²) over `best`.
pub fn expected_improvement(mean: f64, sigma: f64, best: f64) -> Result<f64, AcquisitionError> {
    if sigma < 0.0 {
        return Err(AcquisitionError::NegativeSigma(sigma));
    }
    let d = mean - best;
    if sigma == 0.0 {
        return Ok(d.max(0.0));
    }
    let z = d / sigma;
    Ok((d * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0))
}

pub fn upper_confidence_bound(mean: f64, sigma: f64, beta: f64) -> Result<f64, AcquisitionError> {
    if sigma < 0.0 {
        return Err(AcquisitionError::NegativeSigma(sigma));
    }
    Ok(mean + beta * sigma)
}

pub fn acq_ei(p: &GpPosterior, x: &Point, best: f64) -> Result<f64, AcquisitionError> {
    let (m, v) = p.predict_latent(x);
    expected_improvement(m, v.sqrt(), best)
}

pub fn acq_ucb(p: &GpPosterior, x: &Point, beta: f64) -> Result<f64, AcquisitionError> {
    let (m, v) = p.predict_latent(x);
    upper_confidence_bound(m, v.sqrt(), beta)
}

pub fn ei_scores(p: &GpPosterior, candidates: &[Point], best: f64, exec: Execution) -> Result<Vec<f64>, AcquisitionError> {
    let (means, vars) = p.predict_latent_batch(candidates, exec);
    means.iter().zip(&vars).map(|(m, v)| expected_improvement(*m, v.sqrt(), best)).collect()
}

pub fn ucb_scores(p: &GpPosterior, candidates: &[Point], beta: f64, exec: Execution) -> Result<Vec<f64>, AcquisitionError> {
    let (means, vars) = p.predict_latent_batch(candidates, exec);
    means.iter().zip(&vars).map(|(m, v)| upper_confidence_bound(*m, v.sqrt(), beta)).collect()
}

/// Argmax of a single posterior draw over the candidates.
pub fn acq_thompson<R: Rng + ?Sized>(
    p: &GpPosterior,
    candidates: &[Point],
    rng: &mut R,
    exec: Execution,
) -> Result<usize, AcquisitionError> {
    if candidates.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    let c = candidates.len();
    let draw: Vec<f64> = if c <= JOINT_THOMPSON_LIMIT {
        let (mean, mut cov) = p.latent_joint(candidates, exec);
        // Relative jitter, escalated until the covariance factorizes.
        let scale = cov.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
        let mut jitter = 1e-10 * scale;
        let l = loop {
            if let Some(ch) = cov.clone().cholesky() {
                break Some(ch.unpack());
            }
            if jitter > 1e-3 * scale {
                break None;
            }
            for i in 0..c {
                cov[(i, i)] += jitter;
            }
            jitter *= 10.0;
        };
        let z = DVector::from_iterator(c, (0..c).map(|_| StandardNormal.sample(rng)));
        match l {
            Some(l) => (mean + l * z).iter().copied().collect(),
            None => {
                // Degenerate covariance: fall back to marginals with the same normals.
                (0..c).map(|i| mean[i] + cov[(i, i)].max(0.0).sqrt() * z[i]).collect()
            }
        }
    } else {
        let (means, vars) = p.predict_latent_batch(candidates, exec);
        means
            .iter()
            .zip(&vars)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    };
    Ok(argmax(&draw).expect("non-empty draw"))
}

/// EI argmax with probability ½, otherwise the EI runner-up.
pub fn acq_ttei<R: Rng + ?Sized>(
    p: &GpPosterior,
    candidates: &[Point],
    best: f64,
    rng: &mut R,
    exec: Execution,
) -> Result<usize, AcquisitionError> {
    if candidates.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    let scores = ei_scores(p, candidates, best, exec)?;
    let (first, second) = top_two(&scores);
    let take_second = rng.random_bool(0.5);
    Ok(match second {
        Some(s) if take_second => s,
        _ => first,
    })
}

/// Best and runner-up indices; ties resolve to the lowest index.
pub fn top_two(scores: &[f64]) -> (usize, Option<usize>) {
    let first = argmax(scores).expect("non-empty scores");
    let mut second: Option<usize> = None;
    for (i, &v) in scores.iter().enumerate() {
        if i == first || v.is_nan() {
            continue;
        }
        match second {
            Some(s) if v <= scores[s] => {}
            _ => second = Some(i),
        }
    }
    (first, second)
}
