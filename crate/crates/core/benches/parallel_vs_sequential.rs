//! Sequential vs rayon execution on the hot loops: acquisition scoring over the
//! full grid, multi-start hyperparameter fitting and replicated campaigns.

use std::hint::black_box;
use std::time::Duration;

use autolab::campaign::{run_campaign, CampaignConfig};
use autolab::composition::{axes_to_electrolyte, enumerate_grid, GridSpec};
use autolab::exec::Execution;
use autolab::planner::acquisition::{acq_thompson, ei_scores};
use autolab::planner::{fit_gp, FitOptions, ObservationSet, Point};
use autolab::virtual_lab::surface::{default_surface, true_conductivity};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup(n_obs: usize) -> (Vec<Point>, ObservationSet) {
    let grid = enumerate_grid(&GridSpec::default()).unwrap();
    let surface = default_surface();
    let cands: Vec<Point> = (0..grid.len()).map(|i| grid.normalized(i)).collect();
    let obs = (0..n_obs)
        .map(|k| {
            let i = (k * 7919) % grid.len();
            let e = axes_to_electrolyte(&grid.point(i)).unwrap();
            (cands[i], true_conductivity(&e, 27.0, &surface))
        })
        .collect();
    (cands, obs)
}

fn acquisition(c: &mut Criterion) {
    let (cands, obs) = setup(30);
    let post = fit_gp(&obs, &FitOptions::default()).unwrap();
    let best = obs.best().unwrap();
    let mut g = c.benchmark_group("ei_grid_sweep");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(ei_scores(&post, &cands, best, exec).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("thompson_joint");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| black_box(acq_thompson(&post, &cands, &mut rng, exec).unwrap()))
        });
    }
    g.finish();
}

fn gp_fit(c: &mut Criterion) {
    let (_, obs) = setup(40);
    let mut g = c.benchmark_group("gp_fit_16_starts");
    g.sample_size(10);
    for (name, execution) in MODES {
        let opts = FitOptions { execution, ..FitOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(fit_gp(&obs, &opts).unwrap())));
    }
    g.finish();
}

fn campaigns(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..4).collect();
    let mut g = c.benchmark_group("replicated_campaigns");
    g.sample_size(10).measurement_time(Duration::from_secs(20));
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map_slice(&seeds, |&seed| {
                    let cfg = CampaignConfig { seed, budget: 12, execution: Execution::Sequential, ..CampaignConfig::default() };
                    run_campaign(&cfg).unwrap().best()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, acquisition, gp_fit, campaigns);
criterion_main!(benches);
