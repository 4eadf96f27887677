//! Gaussian-process surrogate: ARD Matérn-5/2 kernel on the unit cube.
//!
//! Targets are standardized before fitting. Hyperparameters are chosen by
//! maximizing the log marginal likelihood with multi-start coordinate descent
//! in log-parameter space. The search is derivative-free, so there is no
//! analytic gradient to check against finite differences.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

pub const DIM: usize = 3;
pub type Point = [f64; DIM];

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (0.05, 5.0);
pub const SIGNAL_VARIANCE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const NOISE_VARIANCE_MAX: f64 = 1.0;
/// Relative measurement noise used to floor the fitted noise variance.
pub const RELATIVE_NOISE_FLOOR: f64 = 0.013;

const MAX_JITTER_STEPS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("covariance not positive definite after jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("duplicate observation at {0:?}")]
    Duplicate(Point),
    #[error("non-finite observation")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Point,
    pub y: f64,
}

/// Training pairs on normalized coordinates; no two share a location.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: Point, y: f64) -> Result<(), GpError> {
        if !(y.is_finite() && x.iter().all(|v| v.is_finite())) {
            return Err(GpError::NonFinite);
        }
        if self.entries.iter().any(|o| o.x == x) {
            return Err(GpError::Duplicate(x));
        }
        self.entries.push(Observation { x, y });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn best(&self) -> Option<f64> {
        self.entries.iter().map(|o| o.y).reduce(f64::max)
    }
}

impl FromIterator<(Point, f64)> for ObservationSet {
    /// Later duplicates are dropped.
    fn from_iter<I: IntoIterator<Item = (Point, f64)>>(iter: I) -> Self {
        let mut set = ObservationSet::new();
        for (x, y) in iter {
            let _ = set.push(x, y);
        }
        set
    }
}

/// Kernel hyperparameters in standardized-target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lengthscales: [f64; DIM],
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    fn from_log(v: &[f64; 5]) -> Self {
        Hyperparameters {
            lengthscales: [v[0].exp(), v[1].exp(), v[2].exp()],
            signal_variance: v[3].exp(),
            noise_variance: v[4].exp(),
        }
    }
}

/// Matérn-5/2 covariance with per-axis lengthscales.
pub fn matern52(a: &Point, b: &Point, h: &Hyperparameters) -> f64 {
    let mut r2 = 0.0;
    for d in 0..DIM {
        let t = (a[d] - b[d]) / h.lengthscales[d];
        r2 += t * t;
    }
    let s5r = (5.0 * r2).sqrt();
    h.signal_variance * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    fn from_values(ys: &[f64]) -> Self {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
        Standardization { mean, scale }
    }
}

/// Fitted surrogate.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    hyper: Hyperparameters,
    standardization: Standardization,
    x: Vec<Point>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    log_marginal_likelihood: f64,
}

fn factorize(x: &[Point], h: &Hyperparameters) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| matern52(&x[i], &x[j], h));
    let mut jitter = 0.0;
    for step in 0..=MAX_JITTER_STEPS {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += h.noise_variance + jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, jitter));
        }
        jitter = h.signal_variance * 1e-10 * 10f64.powi(step as i32);
    }
    Err(GpError::NotPositiveDefinite(jitter))
}

fn log_marginal_likelihood(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (lml, alpha)
}

impl GpPosterior {
    /// Conditions the GP on `obs` with fixed hyperparameters.
    pub fn with_hyperparameters(obs: &ObservationSet, hyper: Hyperparameters) -> Result<Self, GpError> {
        if obs.is_empty() {
            return Err(GpError::TooFewObservations(obs.len()));
        }
        let ys: Vec<f64> = obs.entries().iter().map(|o| o.y).collect();
        let standardization = Standardization::from_values(&ys);
        Self::conditioned(obs, hyper, standardization)
    }

    fn conditioned(obs: &ObservationSet, hyper: Hyperparameters, st: Standardization) -> Result<Self, GpError> {
        let x: Vec<Point> = obs.entries().iter().map(|o| o.x).collect();
        let y = DVector::from_iterator(x.len(), obs.entries().iter().map(|o| (o.y - st.mean) / st.scale));
        let (chol, jitter) = factorize(&x, &hyper)?;
        let (log_marginal_likelihood, alpha) = log_marginal_likelihood(&chol, &y);
        Ok(GpPosterior { hyper, standardization: st, x, chol, alpha, jitter, log_marginal_likelihood })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Diagonal jitter added beyond the noise variance to factorize.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn training_points(&self) -> &[Point] {
        &self.x
    }

    fn cross(&self, xs: &[Point], exec: Execution) -> DMatrix<f64> {
        let n = self.x.len();
        let cols = exec.map_slice(xs, |p| {
            DVector::from_iterator(n, self.x.iter().map(|t| matern52(t, p, &self.hyper)))
        });
        DMatrix::from_columns(&cols)
    }

    /// Latent (noise-free) posterior means and variances, original units.
    pub fn predict_latent_batch(&self, xs: &[Point], exec: Execution) -> (Vec<f64>, Vec<f64>) {
        if xs.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let kx = self.cross(xs, exec); // n × c
        let means_std = kx.transpose() * &self.alpha;
        let v = self.chol.l_dirty().solve_lower_triangular(&kx).expect("cholesky factor is invertible");
        let st = self.standardization;
        let s2 = self.hyper.signal_variance;
        let means = means_std.iter().map(|m| st.mean + st.scale * m).collect();
        let vars = (0..xs.len())
            .map(|j| {
                let vv = v.column(j).norm_squared();
                (s2 - vv).max(0.0) * st.scale * st.scale
            })
            .collect();
        (means, vars)
    }

    pub fn predict_latent(&self, x: &Point) -> (f64, f64) {
        let (m, v) = self.predict_latent_batch(std::slice::from_ref(x), Execution::Sequential);
        (m[0], v[0])
    }

    /// Predictive mean and variance of a new observation (latent + noise), original units.
    pub fn predict(&self, x: &Point) -> (f64, f64) {
        let (m, v) = self.predict_latent(x);
        let st = self.standardization;
        (m, v + self.hyper.noise_variance * st.scale * st.scale)
    }

    /// Joint latent posterior over `xs`: means and covariance, original units.
    pub fn latent_joint(&self, xs: &[Point], exec: Execution) -> (DVector<f64>, DMatrix<f64>) {
        let c = xs.len();
        let kx = self.cross(xs, exec);
        let st = self.standardization;
        let means = (kx.transpose() * &self.alpha).map(|m| st.mean + st.scale * m);
        let v = self.chol.l_dirty().solve_lower_triangular(&kx).expect("cholesky factor is invertible");
        let rows = exec.map_range(c, |i| {
            (0..c).map(|j| matern52(&xs[i], &xs[j], &self.hyper)).collect::<Vec<f64>>()
        });
        let mut cov = DMatrix::from_fn(c, c, |i, j| rows[i][j]);
        cov -= v.transpose() * &v;
        cov *= st.scale * st.scale;
        (means, cov)
    }
}

pub fn gp_predict(p: &GpPosterior, x: &Point) -> (f64, f64) {
    p.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub execution: Execution,
    /// Relative noise level used to floor the noise variance.
    pub relative_noise_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { starts: 16, seed: 0, execution: Execution::Parallel, relative_noise_floor: RELATIVE_NOISE_FLOOR }
    }
}

struct SearchSpace {
    lo: [f64; 5],
    hi: [f64; 5],
}

impl SearchSpace {
    fn new(noise_floor: f64) -> Self {
        let (l_lo, l_hi) = LENGTHSCALE_BOUNDS;
        let (s_lo, s_hi) = SIGNAL_VARIANCE_BOUNDS;
        let n_lo = noise_floor.clamp(1e-10, NOISE_VARIANCE_MAX);
        SearchSpace {
            lo: [l_lo.ln(), l_lo.ln(), l_lo.ln(), s_lo.ln(), n_lo.ln()],
            hi: [l_hi.ln(), l_hi.ln(), l_hi.ln(), s_hi.ln(), NOISE_VARIANCE_MAX.ln()],
        }
    }

    fn clamp(&self, v: &mut [f64; 5]) {
        for d in 0..5 {
            v[d] = v[d].clamp(self.lo[d], self.hi[d]);
        }
    }
}

fn objective(x: &[Point], y: &DVector<f64>, theta: &[f64; 5]) -> f64 {
    let h = Hyperparameters::from_log(theta);
    match factorize(x, &h) {
        Ok((chol, _)) => log_marginal_likelihood(&chol, y).0,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Compass search along each log-parameter, halving the step when no move helps.
fn coordinate_descent(x: &[Point], y: &DVector<f64>, space: &SearchSpace, start: [f64; 5]) -> ([f64; 5], f64) {
    let mut theta = start;
    space.clamp(&mut theta);
    let mut best = objective(x, y, &theta);
    let mut step = 1.0;
    let mut evals = 1;
    while step >= 1e-2 && evals < 400 {
        let mut moved = false;
        for d in 0..5 {
            for dir in [1.0, -1.0] {
                let mut trial = theta;
                trial[d] += dir * step;
                space.clamp(&mut trial);
                if trial[d] == theta[d] {
                    continue;
                }
                let v = objective(x, y, &trial);
                evals += 1;
                if v > best {
                    best = v;
                    theta = trial;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (theta, best)
}

/// Maximum-likelihood GP fit. Results depend only on `obs` and `opts.seed`:
/// starts are drawn up front and the winner is the highest likelihood with
/// ties going to the earliest start.
pub fn fit_gp(obs: &ObservationSet, opts: &FitOptions) -> Result<GpPosterior, GpError> {
    if obs.len() < 2 {
        return Err(GpError::TooFewObservations(obs.len()));
    }
    let ys: Vec<f64> = obs.entries().iter().map(|o| o.y).collect();
    let st = Standardization::from_values(&ys);
    let x: Vec<Point> = obs.entries().iter().map(|o| o.x).collect();
    let y = DVector::from_iterator(x.len(), ys.iter().map(|v| (v - st.mean) / st.scale));

    let floor = (opts.relative_noise_floor * st.mean.abs() / st.scale).powi(2);
    let space = SearchSpace::new(floor);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = Vec::with_capacity(opts.starts.max(1));
    let mut first = [0.3f64.ln(), 0.3f64.ln(), 0.3f64.ln(), 0.0, floor.max(1e-2).ln()];
    space.clamp(&mut first);
    starts.push(first);
    while starts.len() < opts.starts.max(1) {
        let mut s = [0.0; 5];
        for d in 0..5 {
            s[d] = rng.random_range(space.lo[d]..=space.hi[d]);
        }
        starts.push(s);
    }

    let results = opts.execution.map_slice(&starts, |s| coordinate_descent(&x, &y, &space, *s));
    let (theta, _) = results
        .into_iter()
        .reduce(|best, r| if r.1 > best.1 { r } else { best })
        .expect("at least one start");
    GpPosterior::conditioned(obs, Hyperparameters::from_log(&theta), st)
}
