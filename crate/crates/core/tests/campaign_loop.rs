use std::path::PathBuf;
use std::sync::Mutex;

use autolab::campaign::*;
use autolab::composition::{electrolyte_to_axes, enumerate_grid, GridSpec};
use autolab::protocol::{ExperimentRequest, ExperimentResponse, LoopbackTransport, ProtocolError, Transport};
use autolab::virtual_lab::LabStatus;
use proptest::prelude::*;

fn cfg(budget: usize, seed: u64) -> CampaignConfig {
    CampaignConfig { budget, seed, ..CampaignConfig::default() }
}

#[test]
fn resume_after_truncation_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let full = run_campaign(&CampaignConfig { out_dir: Some(full_dir.clone()), ..cfg(40, 11) }).unwrap();
    assert_eq!(full.entries.len(), 40);

    let cut_dir = dir.path().join("cut");
    std::fs::create_dir_all(&cut_dir).unwrap();
    let text = std::fs::read_to_string(full_dir.join(LOG_FILE)).unwrap();
    let prefix: String = text.lines().take(21).map(|l| format!("{l}\n")).collect();
    std::fs::write(cut_dir.join(LOG_FILE), prefix).unwrap();
    let resumed = run_campaign(&CampaignConfig { out_dir: Some(cut_dir.clone()), ..cfg(40, 11) }).unwrap();
    assert_eq!(resumed.entries[20..], full.entries[20..]);
    assert_eq!(std::fs::read_to_string(cut_dir.join(LOG_FILE)).unwrap(), text);
}

#[test]
fn crash_mid_line_is_tolerated_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_campaign(&CampaignConfig { out_dir: Some(dir.path().join("a")), ..cfg(10, 2) }).unwrap();
    let text = std::fs::read_to_string(dir.path().join("a").join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut broken: String = lines[..6].iter().map(|l| format!("{l}\n")).collect();
    broken.push_str(&lines[6][..lines[6].len() / 2]);
    std::fs::create_dir_all(dir.path().join("b")).unwrap();
    std::fs::write(dir.path().join("b").join(LOG_FILE), broken).unwrap();
    let b = run_campaign(&CampaignConfig { out_dir: Some(dir.path().join("b")), ..cfg(10, 2) }).unwrap();
    assert_eq!((a.entries, a.summary), (b.entries, b.summary));
}

#[test]
fn resume_with_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    run_campaign(&CampaignConfig { out_dir: Some(dir.path().to_path_buf()), ..cfg(6, 1) }).unwrap();
    let err = run_campaign(&CampaignConfig { out_dir: Some(dir.path().to_path_buf()), ..cfg(6, 2) }).unwrap_err();
    assert!(matches!(err, CampaignError::ConfigMismatch));
}

#[test]
fn replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run_campaign(&CampaignConfig { out_dir: Some(dir.path().to_path_buf()), ..cfg(15, 5) }).unwrap();
    let report = replay_log(&dir.path().join(LOG_FILE), None).unwrap();
    assert!(report.identical, "{report:?}");
    assert_eq!(report.lines, 17);
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    run_campaign(&CampaignConfig { out_dir: Some(dir.path().to_path_buf()), ..cfg(6, 5) }).unwrap();
    let path = dir.path().join(LOG_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let log = CampaignLog::parse(&text).unwrap();
    let mut tampered = log.clone();
    tampered.entries[3].response.temperature_c = Some(30.0);
    std::fs::write(&path, tampered.to_jsonl()).unwrap();
    let report = replay_log(&path, None).unwrap();
    assert!(!report.identical);
    assert_eq!(report.first_difference, Some(5));
}

/// Checks the on-disk log before every measurement.
struct Auditing {
    inner: LoopbackTransport,
    path: PathBuf,
    seen: Mutex<usize>,
}

impl Transport for Auditing {
    fn submit(&self, req: &ExperimentRequest) -> Result<ExperimentResponse, ProtocolError> {
        let log = CampaignLog::load(&self.path).expect("on-disk prefix parses and validates");
        assert_eq!(log.entries.len() as u64, req.experiment_id - 1);
        *self.seen.lock().unwrap() += 1;
        self.inner.submit(req)
    }

    fn status(&self) -> Result<LabStatus, ProtocolError> {
        self.inner.status()
    }
}

#[test]
fn every_append_leaves_a_valid_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(12, 8);
    let path = dir.path().join(LOG_FILE);
    let t = Auditing { inner: LoopbackTransport::new(c.instrument().unwrap()), path: path.clone(), seen: Mutex::new(0) };
    let log = run_with_transport(&c, &t, Some(&path)).unwrap();
    assert_eq!(*t.seen.lock().unwrap(), 12);
    assert_eq!(CampaignLog::load(&path).unwrap(), log);
}

#[test]
fn no_grid_point_repeats_and_requests_sit_on_grid() {
    let c = cfg(40, 21);
    let log = run_campaign(&c).unwrap();
    let grid = enumerate_grid(&GridSpec::default()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for e in &log.entries {
        assert!(seen.insert(e.grid_index));
        assert_eq!(grid.locate(&electrolyte_to_axes(&e.request.composition).unwrap()), Some(e.grid_index));
    }
    log.validate().unwrap();
}

#[test]
fn tiny_grid_is_exhausted_early() {
    let c = CampaignConfig {
        grid: GridSpec { levels: [2, 2, 2], ..GridSpec::default() },
        planner: autolab::planner::PlannerConfig { init_count: 3, ..Default::default() },
        ..cfg(8, 1)
    };
    let log = run_campaign(&c).unwrap();
    assert_eq!(log.entries.len(), 8);
    assert_eq!(log.summary.as_ref().unwrap().status, CampaignStatus::Complete);
}

#[test]
fn baseline_crossing_is_first_exceeding_step() {
    let log = run_campaign(&cfg(20, 4)).unwrap();
    let curve = best_so_far(&log);
    let first_above = log.entries.iter().find(|e| e.reported().is_some_and(|k| k > 9.8)).map(|e| e.step);
    let crossing = curve.iter().find(|(_, b)| b.is_some_and(|b| b > 9.8)).map(|(s, _)| *s);
    assert_eq!(crossing, first_above);
    assert!(crossing.is_some());
}

#[test]
fn csv_export_columns() {
    let log = run_campaign(&cfg(6, 3)).unwrap();
    let mut buf = Vec::new();
    export_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,kind,w_ec,w_dmc,w_emc,molality,conductivity_ms_cm,temperature_c,density_g_ml,best_so_far"
    );
    assert_eq!(lines.count(), 6);
}

#[test]
fn select_candidates_from_log_skips_baseline() {
    let log = run_campaign(&cfg(25, 6)).unwrap();
    let picked = select_candidates(&log, &default_rules());
    assert!(picked.len() <= 6 && !picked.is_empty());
    let g = default_baseline().composition;
    assert!(picked.iter().all(|c| c.composition != g));
    let top = log.entries.iter().filter_map(|e| e.reported()).fold(f64::MIN, f64::max);
    assert_eq!(picked[0].conductivity_ms_cm, top);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn candidate_selection_ignores_order(seed in 0u64..1000, perm_seed in 0u64..1000) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = enumerate_grid(&GridSpec::default()).unwrap();
        let ms: Vec<Measured> = (0..rng.random_range(1..30))
            .map(|_| Measured {
                composition: autolab::composition::axes_to_electrolyte(&grid.point(rng.random_range(0..grid.len()))).unwrap(),
                // Coarse values force conductivity ties.
                conductivity_ms_cm: (rng.random_range(80..140) as f64) / 10.0,
            })
            .collect();
        let mut shuffled = ms.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let rules = default_rules();
        prop_assert_eq!(select_from(&ms, &rules, None), select_from(&shuffled, &rules, None));
    }
}
