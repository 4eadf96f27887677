//! Helpers shared by the integration tests.
#![allow(dead_code)]

use autolab::composition::{axes_to_electrolyte, enumerate_grid, GridSpec};
use autolab::planner::{Hyperparameters, ObservationSet, Point};
use autolab::protocol::{ExperimentRequest, ExperimentResponse, MeasurementStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn matern(a: &Point, b: &Point, h: &Hyperparameters) -> f64 {
    let r = (0..3).map(|d| ((a[d] - b[d]) / h.lengthscales[d]).powi(2)).sum::<f64>().sqrt();
    let s = 5f64.sqrt() * r;
    h.signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Latent posterior through an explicit inverse of K + σ²I, in original units.
pub fn dense_posterior(obs: &ObservationSet, h: &Hyperparameters, x: &Point) -> (f64, f64) {
    let e = obs.entries();
    let n = e.len();
    let ys: Vec<f64> = e.iter().map(|o| o.y).collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let k = DMatrix::from_fn(n, n, |i, j| matern(&e[i].x, &e[j].x, h) + if i == j { h.noise_variance } else { 0.0 });
    let kinv = k.try_inverse().unwrap();
    let ks = DVector::from_iterator(n, e.iter().map(|o| matern(&o.x, x, h)));
    let y = DVector::from_iterator(n, ys.iter().map(|v| (v - mean) / sd));
    let m = (ks.transpose() * &kinv * y)[0];
    let v = h.signal_variance - (ks.transpose() * &kinv * &ks)[0];
    (mean + sd * m, v * sd * sd)
}

pub fn sd_of(s: &ObservationSet) -> f64 {
    let ys: Vec<f64> = s.entries().iter().map(|o| o.y).collect();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt()
}

pub fn random_point(rng: &mut ChaCha8Rng) -> Point {
    [rng.random(), rng.random(), rng.random()]
}

pub fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> ObservationSet {
    (0..n).map(|_| (random_point(rng), 8.0 + 4.0 * rng.random::<f64>())).collect()
}

pub fn random_hyper(rng: &mut ChaCha8Rng) -> Hyperparameters {
    Hyperparameters {
        lengthscales: [rng.random_range(0.1..1.5), rng.random_range(0.1..1.5), rng.random_range(0.1..1.5)],
        signal_variance: rng.random_range(0.3..3.0),
        noise_variance: rng.random_range(1e-3..0.1),
    }
}

pub fn arb_request() -> impl Strategy<Value = ExperimentRequest> {
    let grid = enumerate_grid(&GridSpec::default()).unwrap();
    let n = grid.len();
    ("[a-z0-9-]{1,12}", 1u64..u64::MAX, 0..n, 2usize..6).prop_map(move |(c, id, i, reps)| {
        let mut r = ExperimentRequest::new(c, id, axes_to_electrolyte(&grid.point(i)).unwrap());
        r.replicates = reps;
        r
    })
}

pub fn arb_response() -> impl Strategy<Value = ExperimentResponse> {
    let ok = (1u64..1_000_000, proptest::collection::vec(0.1..20.0f64, 2..5), 0.9..1.4f64, 20.0..35.0f64, 0.0..1e5f64)
        .prop_map(|(id, runs, d, t, dur)| {
            let k = runs[1..].iter().sum::<f64>() / (runs.len() - 1) as f64;
            ExperimentResponse {
                experiment_id: id,
                status: MeasurementStatus::Ok,
                conductivity_ms_cm: Some(k),
                density_g_ml: Some(d),
                temperature_c: Some(t),
                runs,
                duration_s: dur,
                reason: None,
            }
        });
    let failed = (
        1u64..1_000_000,
        prop_oneof![
            Just(MeasurementStatus::InfeasibleDose),
            Just(MeasurementStatus::InventoryExhausted),
            Just(MeasurementStatus::InstrumentFault)
        ],
        ".{0,40}",
        0.0..1e4f64,
    )
        .prop_map(|(id, s, reason, dur)| ExperimentResponse::failure(id, s, reason, dur));
    prop_oneof![ok, failed]
}
