//! Simulated conductivity instrument.
//!
//! A [`LabState`] owns feeder inventories, the liquid left in the shared
//! measurement line, the calibrated cell constant and a simulated clock. Each
//! measurement doses the target from feeders, runs a replicate series through
//! the impedance emulator (the first run picks up line contamination), and
//! reports the mean of the uncontaminated runs.

pub mod impedance;
pub mod surface;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{
    plan_dose, CompositionError, DensityModel, DoseError, DosePlan, Electrolyte, FeederSolution, Solvent,
    SolventBlend,
};
use impedance::{simulate_impedance, CellConstant, ElectrodeModel, ImpedanceError};
use surface::{
    calibrate_surface, default_surface, load_anchors_csv, true_conductivity, CalibrationError, CalibrationOptions,
    SurfaceParams,
};

/// Log-normal σ giving a 1.3 % mean absolute difference between two runs:
/// E|ln r2 − ln r3| = 2σ/√π.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.013 * 0.886_226_925_452_758; // √π / 2

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid composition: {0}")]
    Composition(#[from] CompositionError),
    #[error("dose infeasible: {0}")]
    InfeasibleDose(DoseError),
    #[error("inventory exhausted: {0}")]
    InventoryExhausted(DoseError),
    #[error("instrument fault: {0}")]
    Instrument(#[from] ImpedanceError),
    #[error("replicates must be at least 2, got {0}")]
    Replicates(usize),
}

impl From<DoseError> for LabError {
    fn from(e: DoseError) -> Self {
        match e {
            DoseError::Inventory { .. } => LabError::InventoryExhausted(e),
            other => LabError::InfeasibleDose(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// Explicit surface; when absent the surface is calibrated from
    /// `anchors_csv` or from the built-in reference anchors.
    pub surface: Option<SurfaceParams>,
    pub anchors_csv: Option<PathBuf>,
    pub noise_sigma: f64,
    /// Fraction of run 1 drawn from the liquid left in the line.
    pub contamination: f64,
    /// Conductivity of the rinse solvent left in the line, mS/cm.
    pub rinse_conductivity: f64,
    /// Dose, mix and replicate runs, seconds.
    pub measure_duration_s: f64,
    pub rinse_duration_s: f64,
    pub temperature_min_c: f64,
    pub temperature_max_c: f64,
    pub electrode: ElectrodeModel,
    /// Geometry of the physical cell, cm⁻¹; only observable through calibration.
    pub true_cell_constant: f64,
    pub calibration_standard_ms_cm: f64,
    pub calibration_readings: usize,
    pub sample_mass_g: f64,
    pub density: DensityModel,
    pub feeders: Vec<FeederSolution>,
}

impl Default for LabConfig {
    fn default() -> Self {
        let density = DensityModel::default();
        LabConfig {
            surface: None,
            anchors_csv: None,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            contamination: 0.08,
            rinse_conductivity: 0.0,
            measure_duration_s: 70.0 * 60.0,
            rinse_duration_s: 5.0 * 60.0,
            temperature_min_c: 26.0,
            temperature_max_c: 28.0,
            electrode: ElectrodeModel::default(),
            true_cell_constant: 1.0,
            calibration_standard_ms_cm: 12.39,
            calibration_readings: 3,
            sample_mass_g: 3.0,
            feeders: default_feeders(&density, 500.0),
            density,
        }
    }
}

/// Neat EC, DMC and EMC plus a 2 mol/kg LiPF6 stock in each solvent.
pub fn default_feeders(density: &DensityModel, inventory_ml: f64) -> Vec<FeederSolution> {
    let mut out = Vec::new();
    for molality in [0.0, 2.0] {
        for s in Solvent::ALL {
            let composition = Electrolyte { blend: SolventBlend::pure(s), molality };
            let id = if molality == 0.0 {
                s.to_string().to_lowercase()
            } else {
                format!("{}_2m", s.to_string().to_lowercase())
            };
            out.push(FeederSolution {
                id,
                composition,
                density: density.estimate(&composition, 25.0),
                inventory_ml,
            });
        }
    }
    out
}

impl LabConfig {
    /// Minutes for one dose → replicate series → rinse cycle.
    pub fn minutes_per_experiment(&self) -> f64 {
        (self.measure_duration_s + self.rinse_duration_s) / 60.0
    }

    pub fn resolve_surface(&self) -> Result<SurfaceParams, CalibrationError> {
        if let Some(p) = self.surface {
            return Ok(p);
        }
        match &self.anchors_csv {
            Some(path) => calibrate_surface(&load_anchors_csv(path)?, &CalibrationOptions::default()),
            None => Ok(default_surface()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub electrolyte: Electrolyte,
    /// Per-run conductivities, mS/cm; run 1 first.
    pub runs: Vec<f64>,
    /// Mean of runs 2..n, mS/cm.
    pub conductivity: f64,
    pub temperature_c: f64,
    pub density_g_ml: f64,
    pub dose: DosePlan,
    pub started_s: f64,
    pub finished_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabStatus {
    pub clock_s: f64,
    pub residual_ms_cm: f64,
    pub measurements: u64,
    pub cell_constant: CellConstant,
    pub inventory_ml: BTreeMap<String, f64>,
}

/// Mutable instrument state. Exactly one operation mutates it at a time;
/// callers that share it must serialize access.
#[derive(Debug, Clone)]
pub struct LabState {
    config: LabConfig,
    surface: SurfaceParams,
    feeders: Vec<FeederSolution>,
    residual: f64,
    cell_constant: CellConstant,
    clock_s: f64,
    seed: u64,
    measurements: u64,
}

impl LabState {
    /// Builds the instrument and calibrates its cell constant against the
    /// configured standard.
    pub fn new(config: LabConfig, seed: u64) -> Result<Self, CalibrationError> {
        let surface = config.resolve_surface()?;
        let mut state = LabState {
            feeders: config.feeders.clone(),
            residual: config.rinse_conductivity,
            cell_constant: CellConstant::uncalibrated(1.0),
            clock_s: 0.0,
            surface,
            config,
            seed,
            measurements: 0,
        };
        let standard = state.config.calibration_standard_ms_cm;
        state.cell_constant = calibrate_cell_constant(standard, &mut state);
        Ok(state)
    }

    pub fn config(&self) -> &LabConfig {
        &self.config
    }

    pub fn surface(&self) -> &SurfaceParams {
        &self.surface
    }

    pub fn cell_constant(&self) -> CellConstant {
        self.cell_constant
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    pub fn measurements(&self) -> u64 {
        self.measurements
    }

    pub fn feeders(&self) -> &[FeederSolution] {
        &self.feeders
    }

    pub fn status(&self) -> LabStatus {
        LabStatus {
            clock_s: self.clock_s,
            residual_ms_cm: self.residual,
            measurements: self.measurements,
            cell_constant: self.cell_constant,
            inventory_ml: self.feeders.iter().map(|f| (f.id.clone(), f.inventory_ml)).collect(),
        }
    }

    /// Stream 0 is reserved for calibration; measurement k uses stream k + 1.
    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// One noisy conductivity reading through the impedance path.
    fn read(&self, kappa: f64, rng: &mut ChaCha8Rng) -> Result<f64, ImpedanceError> {
        let geometry = CellConstant::uncalibrated(self.config.true_cell_constant);
        match simulate_impedance(kappa, &geometry, &self.config.electrode, self.config.noise_sigma, rng) {
            Ok(spectrum) => impedance::extract_conductivity(&spectrum, &self.cell_constant),
            // Salt-free liquid reads as zero conductivity.
            Err(ImpedanceError::OpenCircuit) => Ok(0.0),
            Err(e) => Err(e),
        }
    }
}

/// Single-point cell-constant calibration: measures the standard assuming a
/// unit cell constant, then rescales so extraction returns `standard_ms_cm`.
pub fn calibrate_cell_constant(standard_ms_cm: f64, state: &mut LabState) -> CellConstant {
    let mut rng = state.stream(0);
    let geometry = CellConstant::uncalibrated(state.config.true_cell_constant);
    let readings = state.config.calibration_readings.max(1);
    let mut sum_r = 0.0;
    for _ in 0..readings {
        let spectrum = simulate_impedance(
            standard_ms_cm,
            &geometry,
            &state.config.electrode,
            state.config.noise_sigma,
            &mut rng,
        )
        .expect("calibration standard is conductive");
        sum_r += spectrum.min_phase_point().impedance_ohm.re;
    }
    let resistance = sum_r / readings as f64;
    CellConstant { value: standard_ms_cm * resistance / 1000.0, standard_ms_cm }
}

/// Doses `target`, runs `replicates` readings and reports the mean of runs 2..n.
pub fn run_measurement(target: &Electrolyte, state: &mut LabState, replicates: usize) -> Result<MeasurementRecord, LabError> {
    if replicates < 2 {
        return Err(LabError::Replicates(replicates));
    }
    target.validate()?;
    let dose = plan_dose(target, state.config.sample_mass_g, &state.feeders, state.config.density.salt_molar_mass)?;
    for f in state.feeders.iter_mut() {
        if let Some(v) = dose.volumes.get(&f.id) {
            f.inventory_ml = (f.inventory_ml - v).max(0.0);
        }
    }

    let mut rng = state.stream(state.measurements + 1);
    state.measurements += 1;
    let temperature_c = rng.random_range(state.config.temperature_min_c..=state.config.temperature_max_c);
    let kappa = true_conductivity(target, temperature_c, &state.surface);

    let lambda = state.config.contamination;
    let mut runs = Vec::with_capacity(replicates);
    for k in 0..replicates {
        let reading = state.read(kappa, &mut rng)?;
        runs.push(if k == 0 { (1.0 - lambda) * reading + lambda * state.residual } else { reading });
    }
    let conductivity = if replicates == 3 {
        (runs[1] + runs[2]) / 2.0
    } else {
        runs[1..].iter().sum::<f64>() / (replicates - 1) as f64
    };

    let started_s = state.clock_s;
    state.clock_s += state.config.measure_duration_s;
    state.residual = conductivity;

    Ok(MeasurementRecord {
        electrolyte: *target,
        runs,
        conductivity,
        temperature_c,
        density_g_ml: state.config.density.estimate(target, temperature_c),
        dose,
        started_s,
        finished_s: state.clock_s,
    })
}

/// Flushes the line with rinse solvent.
pub fn rinse(state: &mut LabState) {
    state.residual = state.config.rinse_conductivity;
    state.clock_s += state.config.rinse_duration_s;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet() -> LabConfig {
        LabConfig { noise_sigma: 0.0, ..LabConfig::default() }
    }

    fn peak() -> Electrolyte {
        Electrolyte::new(0.4, 0.6, 0.0, 0.9).unwrap()
    }

    #[test]
    fn calibration_recovers_standard() {
        let mut state = LabState::new(LabConfig::default(), 3).unwrap();
        assert!(state.cell_constant().value > 0.0);
        let mut rng = state.stream(99);
        let back = state.read(12.39, &mut rng).unwrap();
        assert!((back - 12.39).abs() / 12.39 < 0.05, "{back}");
        let again = calibrate_cell_constant(12.39, &mut state);
        assert_eq!(again, state.cell_constant());
        let other = LabState::new(LabConfig::default(), 3).unwrap();
        assert_eq!(other.cell_constant(), state.cell_constant());
    }

    #[test]
    fn cell_constant_tracks_geometry() {
        let state = LabState::new(LabConfig { true_cell_constant: 0.7, ..quiet() }, 1).unwrap();
        assert_relative_eq!(state.cell_constant().value, 0.7, max_relative = 5e-3);
    }

    #[test]
    fn noise_free_uncontaminated_runs_equal_truth() {
        let mut state = LabState::new(LabConfig { contamination: 0.0, ..quiet() }, 1).unwrap();
        let rec = run_measurement(&peak(), &mut state, 3).unwrap();
        let truth = true_conductivity(&peak(), rec.temperature_c, state.surface());
        for r in &rec.runs {
            assert_relative_eq!(*r, truth, max_relative = 1e-3);
        }
        assert_eq!(rec.runs[0], rec.runs[1]);
        assert!((26.0..=28.0).contains(&rec.temperature_c));
    }

    #[test]
    fn first_run_biased_low_after_rinse() {
        let mut state = LabState::new(quiet(), 1).unwrap();
        rinse(&mut state);
        let rec = run_measurement(&peak(), &mut state, 3).unwrap();
        assert_relative_eq!(rec.runs[0], 0.92 * rec.runs[1], max_relative = 1e-12);
        assert_eq!(rec.conductivity, (rec.runs[1] + rec.runs[2]) / 2.0);
    }

    #[test]
    fn rinse_isolates_consecutive_samples() {
        let mut state = LabState::new(LabConfig { rinse_conductivity: 0.5, ..quiet() }, 1).unwrap();
        let a = Electrolyte::new(0.3, 0.7, 0.0, 1.0).unwrap();
        let b = Electrolyte::new(0.5, 0.0, 0.5, 0.6).unwrap();
        let _ = run_measurement(&a, &mut state, 3).unwrap();
        assert!(state.residual() > 5.0);
        rinse(&mut state);
        assert_eq!(state.residual(), 0.5);
        rinse(&mut state);
        assert_eq!(state.residual(), 0.5);
        let rec_b = run_measurement(&b, &mut state, 3).unwrap();
        assert_relative_eq!(rec_b.runs[0], 0.92 * rec_b.runs[1] + 0.08 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn clock_and_inventory_advance() {
        let mut state = LabState::new(LabConfig::default(), 1).unwrap();
        let before: f64 = state.feeders().iter().map(|f| f.inventory_ml).sum();
        let rec = run_measurement(&peak(), &mut state, 3).unwrap();
        rinse(&mut state);
        assert_eq!(rec.started_s, 0.0);
        assert_eq!(rec.finished_s, 4200.0);
        assert_eq!(state.clock_s(), 4500.0);
        let after: f64 = state.feeders().iter().map(|f| f.inventory_ml).sum();
        let dosed: f64 = rec.dose.volumes.values().sum();
        assert_relative_eq!(before - after, dosed, max_relative = 1e-12);
        assert!(rec.dose.residual <= 1e-6);
    }

    #[test]
    fn exhausted_inventory_is_reported() {
        let mut cfg = LabConfig::default();
        cfg.feeders = default_feeders(&cfg.density, 0.2);
        let mut state = LabState::new(cfg, 1).unwrap();
        let err = run_measurement(&peak(), &mut state, 3).unwrap_err();
        assert!(matches!(err, LabError::InventoryExhausted(_)));
        assert_eq!(state.measurements(), 0);
    }

    #[test]
    fn infeasible_dose_is_reported() {
        let mut cfg = LabConfig::default();
        cfg.feeders.retain(|f| !f.id.starts_with("dmc"));
        let mut state = LabState::new(cfg, 1).unwrap();
        let err = run_measurement(&peak(), &mut state, 3).unwrap_err();
        assert!(matches!(err, LabError::InfeasibleDose(_)));
    }

    #[test]
    fn replicate_count_validated() {
        let mut state = LabState::new(LabConfig::default(), 1).unwrap();
        assert_eq!(run_measurement(&peak(), &mut state, 1), Err(LabError::Replicates(1)));
    }

    #[test]
    fn identical_seeds_identical_records() {
        let run = || {
            let mut state = LabState::new(LabConfig::default(), 42).unwrap();
            let mut out = Vec::new();
            for m in [0.6, 0.9, 1.2] {
                let e = Electrolyte::new(0.4, 0.3, 0.3, m).unwrap();
                out.push(serde_json::to_string(&run_measurement(&e, &mut state, 3).unwrap()).unwrap());
                rinse(&mut state);
            }
            out
        };
        assert_eq!(run(), run());
    }
}
