//! Ground-truth conductivity surface and its calibration against anchor data.
//!
//! Conductivity follows the Casteel–Amis form in molality,
//!
//! ```text
//! κ(m) = κ_peak · (m/μ)^a · exp(−b (m−μ)² − (a/μ)(m−μ)) · (1 + α (T − T_ref))
//! ```
//!
//! whose unique maximum over m sits exactly at m = μ with value κ_peak. The
//! blend enters through κ_peak (quadratic in EC fraction about a vertex, linear
//! in the DMC co-solvent ratio) and μ (linear in EC fraction).

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{Electrolyte, SolventBlend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    /// κ_peak at dmc_ratio = 0 on the EC vertex, mS/cm.
    pub peak_base: f64,
    /// dκ_peak / d(dmc_ratio), mS/cm.
    pub dmc_slope: f64,
    /// Curvature of κ_peak in EC fraction, mS/cm.
    pub ec_curvature: f64,
    /// EC fraction at which κ_peak is largest.
    pub ec_vertex: f64,
    /// Peak molality on the EC vertex, mol/kg.
    pub peak_molality: f64,
    /// dμ / d(ec_frac), mol/kg.
    pub peak_molality_ec_slope: f64,
    pub exponent_a: f64,
    pub exponent_b: f64,
    /// Fractional conductivity change per °C.
    pub temperature_coefficient: f64,
    pub reference_temperature: f64,
}

impl Default for SurfaceParams {
    /// Fit starting point, not a calibrated surface.
    fn default() -> Self {
        SurfaceParams {
            peak_base: 12.0,
            dmc_slope: 1.0,
            ec_curvature: 50.0,
            ec_vertex: 0.40,
            peak_molality: 0.9,
            peak_molality_ec_slope: 0.0,
            exponent_a: 0.9,
            exponent_b: 0.75,
            temperature_coefficient: 0.02,
            reference_temperature: 27.0,
        }
    }
}

fn dmc_ratio(blend: &SolventBlend) -> f64 {
    let rest = 1.0 - blend.w_ec;
    if rest > 0.0 {
        blend.w_dmc / rest
    } else {
        0.0
    }
}

const MIN_PEAK_MOLALITY: f64 = 0.05;

impl SurfaceParams {
    pub fn peak_conductivity(&self, blend: &SolventBlend) -> f64 {
        let d = blend.w_ec - self.ec_vertex;
        (self.peak_base + self.dmc_slope * dmc_ratio(blend) - self.ec_curvature * d * d).max(0.0)
    }

    pub fn peak_molality_for(&self, blend: &SolventBlend) -> f64 {
        (self.peak_molality + self.peak_molality_ec_slope * (blend.w_ec - self.ec_vertex))
            .max(MIN_PEAK_MOLALITY)
    }

    /// Molality dependence normalized to 1 at the peak.
    pub fn molality_shape(&self, molality: f64, peak: f64) -> f64 {
        if molality <= 0.0 {
            return 0.0;
        }
        let (a, b) = (self.exponent_a, self.exponent_b);
        let dm = molality - peak;
        (a * (molality / peak).ln() - b * dm * dm - (a / peak) * dm).exp()
    }

    pub fn temperature_factor(&self, temperature_c: f64) -> f64 {
        (1.0 + self.temperature_coefficient * (temperature_c - self.reference_temperature)).max(0.0)
    }
}

/// Noise-free conductivity in mS/cm. Intended for T within 20–35 °C.
pub fn true_conductivity(e: &Electrolyte, temperature_c: f64, p: &SurfaceParams) -> f64 {
    let mu = p.peak_molality_for(&e.blend);
    p.peak_conductivity(&e.blend) * p.molality_shape(e.molality, mu) * p.temperature_factor(temperature_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub electrolyte: Electrolyte,
    /// mS/cm at the reference temperature.
    pub conductivity: f64,
    #[serde(default)]
    pub label: Option<String>,
}

impl Anchor {
    pub fn new(label: &str, w_ec: f64, w_dmc: f64, w_emc: f64, molality: f64, conductivity: f64) -> Self {
        Anchor {
            electrolyte: Electrolyte::new(w_ec, w_dmc, w_emc, molality).expect("valid anchor"),
            conductivity,
            label: Some(label.to_string()),
        }
    }
}

/// The seven reference electrolytes A–G with their measured conductivities.
pub fn reference_anchors() -> Vec<Anchor> {
    vec![
        Anchor::new("G", 0.30, 0.00, 0.70, 1.1, 9.8),
        Anchor::new("A", 0.50, 0.45, 0.05, 1.1, 12.2),
        Anchor::new("B", 0.30, 0.70, 0.00, 1.5, 12.1),
        Anchor::new("C", 0.40, 0.60, 0.00, 0.9, 12.8),
        Anchor::new("D", 0.50, 0.50, 0.00, 0.5, 10.8),
        Anchor::new("E", 0.30, 0.70, 0.00, 1.3, 12.1),
        Anchor::new("F", 0.30, 0.70, 0.00, 1.0, 12.4),
    ]
}

/// Reported optimum: EC/DMC 40/60, 0.9 mol/kg, 13.7 mS/cm.
pub fn reported_peak() -> Anchor {
    Anchor::new("peak", 0.40, 0.60, 0.00, 0.9, 13.7)
}

#[derive(Debug, Clone, Deserialize)]
struct AnchorRow {
    w_ec: f64,
    w_dmc: f64,
    w_emc: f64,
    molality: f64,
    conductivity_ms_cm: f64,
}

/// Reads anchors from CSV with header `w_ec,w_dmc,w_emc,molality,conductivity_ms_cm`.
pub fn load_anchors_csv(path: impl AsRef<Path>) -> Result<Vec<Anchor>, CalibrationError> {
    let mut rdr = csv::Reader::from_path(path.as_ref()).map_err(|e| CalibrationError::Io(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<AnchorRow>().enumerate() {
        let row = row.map_err(|e| CalibrationError::Io(e.to_string()))?;
        let electrolyte = Electrolyte::new(row.w_ec, row.w_dmc, row.w_emc, row.molality)
            .map_err(|e| CalibrationError::InvalidAnchor { index: i, reason: e.to_string() })?;
        out.push(Anchor { electrolyte, conductivity: row.conductivity_ms_cm, label: None });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorResidual {
    pub label: Option<String>,
    pub target: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 4 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("anchors do not identify the blend dependence (Jacobian rank {rank} < {needed})")]
    Unidentifiable { rank: usize, needed: usize },
    #[error("fit residual exceeds {tolerance} mS/cm: {}", format_residuals(.report))]
    Residual { tolerance: f64, report: Vec<AnchorResidual> },
    #[error("invalid anchor {index}: {reason}")]
    InvalidAnchor { index: usize, reason: String },
    #[error("anchor file: {0}")]
    Io(String),
}

fn format_residuals(report: &[AnchorResidual]) -> String {
    report
        .iter()
        .map(|r| format!("{}={:+.3}", r.label.as_deref().unwrap_or("?"), r.residual))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    /// Largest per-anchor |fitted − target| accepted, mS/cm.
    pub tolerance: f64,
    /// Exact peak constraint: pins the EC vertex, peak molality and peak value.
    pub peak: Option<Anchor>,
    /// Starting point; also supplies the EC vertex (when no peak is given)
    /// and the temperature terms, which are not fitted.
    pub start: SurfaceParams,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { tolerance: 1.0, peak: Some(reported_peak()), start: SurfaceParams::default() }
    }
}

#[derive(Debug, Clone, Copy)]
enum Param {
    PeakBase,
    DmcSlope,
    EcCurvature,
    PeakMolality,
    PeakMolalityEcSlope,
    ExponentA,
    ExponentB,
}

impl Param {
    fn bounds(self) -> (f64, f64) {
        match self {
            Param::PeakBase => (0.0, 60.0),
            Param::DmcSlope => (0.0, 30.0),
            Param::EcCurvature => (0.0, 2000.0),
            Param::PeakMolality => (0.2, 2.0),
            Param::PeakMolalityEcSlope => (-10.0, 10.0),
            Param::ExponentA => (0.05, 5.0),
            Param::ExponentB => (0.0, 5.0),
        }
    }

    fn get(self, p: &SurfaceParams) -> f64 {
        match self {
            Param::PeakBase => p.peak_base,
            Param::DmcSlope => p.dmc_slope,
            Param::EcCurvature => p.ec_curvature,
            Param::PeakMolality => p.peak_molality,
            Param::PeakMolalityEcSlope => p.peak_molality_ec_slope,
            Param::ExponentA => p.exponent_a,
            Param::ExponentB => p.exponent_b,
        }
    }

    fn set(self, p: &mut SurfaceParams, v: f64) {
        match self {
            Param::PeakBase => p.peak_base = v,
            Param::DmcSlope => p.dmc_slope = v,
            Param::EcCurvature => p.ec_curvature = v,
            Param::PeakMolality => p.peak_molality = v,
            Param::PeakMolalityEcSlope => p.peak_molality_ec_slope = v,
            Param::ExponentA => p.exponent_a = v,
            Param::ExponentB => p.exponent_b = v,
        }
    }
}

struct FitProblem<'a> {
    anchors: &'a [Anchor],
    free: Vec<Param>,
    base: SurfaceParams,
    peak: Option<(f64, f64)>, // (dmc ratio at peak, peak conductivity)
}

impl FitProblem<'_> {
    fn params(&self, x: &DVector<f64>) -> SurfaceParams {
        let mut p = self.base;
        for (k, &param) in self.free.iter().enumerate() {
            param.set(&mut p, x[k]);
        }
        if let Some((ratio, kappa)) = self.peak {
            p.peak_base = kappa - p.dmc_slope * ratio;
        }
        p
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.params(x);
        DVector::from_iterator(
            self.anchors.len(),
            self.anchors.iter().map(|a| {
                true_conductivity(&a.electrolyte, p.reference_temperature, &p) - a.conductivity
            }),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(self.anchors.len(), n);
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[k] += h;
            lo[k] -= h;
            let col = (self.residuals(&hi) - self.residuals(&lo)) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    fn project(&self, x: &mut DVector<f64>) {
        for (k, &param) in self.free.iter().enumerate() {
            let (lo, hi) = param.bounds();
            x[k] = x[k].clamp(lo, hi);
        }
    }
}

/// Bounded Levenberg–Marquardt with a central-difference Jacobian.
fn levenberg_marquardt(problem: &FitProblem<'_>, mut x: DVector<f64>) -> DVector<f64> {
    problem.project(&mut x);
    let mut r = problem.residuals(&x);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..2000 {
        let j = problem.jacobian(&x);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for k in 0..x.len() {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = &x + &step;
            problem.project(&mut trial);
            let tr = problem.residuals(&trial);
            let tc = tr.norm_squared();
            if tc < cost {
                let rel_gain = (cost - tc) / cost.max(1e-300);
                x = trial;
                r = tr;
                cost = tc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel_gain > 1e-15;
                break;
            }
            lambda *= 4.0;
        }
        if !improved || cost < 1e-26 {
            break;
        }
    }
    x
}

/// Fits the surface parameters to `anchors` (conductivities at the reference
/// temperature of `opts.start`).
pub fn calibrate_surface(anchors: &[Anchor], opts: &CalibrationOptions) -> Result<SurfaceParams, CalibrationError> {
    if anchors.len() < 4 {
        return Err(CalibrationError::TooFewAnchors(anchors.len()));
    }
    for (index, a) in anchors.iter().enumerate() {
        a.electrolyte
            .validate()
            .map_err(|e| CalibrationError::InvalidAnchor { index, reason: e.to_string() })?;
        if !(a.conductivity.is_finite() && a.conductivity >= 0.0) {
            return Err(CalibrationError::InvalidAnchor {
                index,
                reason: format!("conductivity {}", a.conductivity),
            });
        }
    }

    let mut base = opts.start;
    let (free, peak) = match &opts.peak {
        Some(pk) => {
            base.ec_vertex = pk.electrolyte.blend.w_ec;
            base.peak_molality = pk.electrolyte.molality;
            let free = vec![
                Param::DmcSlope,
                Param::EcCurvature,
                Param::PeakMolalityEcSlope,
                Param::ExponentA,
                Param::ExponentB,
            ];
            (free, Some((dmc_ratio(&pk.electrolyte.blend), pk.conductivity)))
        }
        None => {
            let free = vec![
                Param::PeakBase,
                Param::DmcSlope,
                Param::EcCurvature,
                Param::PeakMolality,
                Param::PeakMolalityEcSlope,
                Param::ExponentA,
                Param::ExponentB,
            ];
            if base.peak_base <= 0.0 {
                base.peak_base = anchors.iter().map(|a| a.conductivity).fold(0.0, f64::max);
            }
            (free, None)
        }
    };

    let problem = FitProblem { anchors, free, base, peak };
    let x0 = DVector::from_iterator(problem.free.len(), problem.free.iter().map(|p| p.get(&base)));

    // Blend dependence must be identifiable from the anchor set.
    let j0 = problem.jacobian(&x0);
    let sv = j0.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-7 * smax).count();
    if rank < problem.free.len() {
        return Err(CalibrationError::Unidentifiable { rank, needed: problem.free.len() });
    }

    let x = levenberg_marquardt(&problem, x0);
    let params = problem.params(&x);

    let report: Vec<AnchorResidual> = anchors
        .iter()
        .map(|a| {
            let fitted = true_conductivity(&a.electrolyte, params.reference_temperature, &params);
            AnchorResidual { label: a.label.clone(), target: a.conductivity, fitted, residual: fitted - a.conductivity }
        })
        .collect();
    if report.iter().any(|r| r.residual.abs() > opts.tolerance) {
        return Err(CalibrationError::Residual { tolerance: opts.tolerance, report });
    }
    Ok(params)
}

/// Surface calibrated to the built-in reference anchors and reported peak.
pub fn default_surface() -> SurfaceParams {
    static CELL: OnceLock<SurfaceParams> = OnceLock::new();
    *CELL.get_or_init(|| {
        calibrate_surface(&reference_anchors(), &CalibrationOptions::default())
            .expect("built-in anchors calibrate within tolerance")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{axes_to_electrolyte, DesignAxes};
    use approx::assert_relative_eq;

    #[test]
    fn zero_salt_gives_zero_conductivity() {
        let p = default_surface();
        for (ec, r) in [(0.3, 0.0), (0.4, 1.0), (0.5, 0.5)] {
            let e = axes_to_electrolyte(&DesignAxes::new(ec, r, 0.0).unwrap()).unwrap();
            assert_eq!(true_conductivity(&e, 27.0, &p), 0.0);
        }
    }

    #[test]
    fn reported_optimum_and_baseline() {
        let p = default_surface();
        let peak = reported_peak();
        assert_relative_eq!(true_conductivity(&peak.electrolyte, 27.0, &p), 13.7, epsilon = 0.2);
        let g = &reference_anchors()[0];
        assert!((true_conductivity(&g.electrolyte, 27.0, &p) - 9.8).abs() <= 1.0);
    }

    #[test]
    fn peak_of_shape_is_at_mu() {
        let p = SurfaceParams::default();
        let mu = 0.9;
        assert_relative_eq!(p.molality_shape(mu, mu), 1.0);
        for m in [0.5, 0.85, 0.95, 1.5] {
            assert!(p.molality_shape(m, mu) < 1.0);
        }
    }

    #[test]
    fn single_blend_is_unidentifiable() {
        let anchors: Vec<Anchor> = [0.5, 0.8, 1.1, 1.4, 1.7]
            .iter()
            .map(|&m| Anchor::new("x", 0.4, 0.6, 0.0, m, 10.0 + m))
            .collect();
        let opts = CalibrationOptions { peak: None, ..CalibrationOptions::default() };
        assert!(matches!(
            calibrate_surface(&anchors, &opts),
            Err(CalibrationError::Unidentifiable { .. })
        ));
    }

    #[test]
    fn too_few_anchors() {
        let anchors = &reference_anchors()[..3];
        assert_eq!(
            calibrate_surface(anchors, &CalibrationOptions::default()),
            Err(CalibrationError::TooFewAnchors(3))
        );
    }

    #[test]
    fn tight_tolerance_reports_per_anchor_residuals() {
        let opts = CalibrationOptions { tolerance: 0.05, ..CalibrationOptions::default() };
        match calibrate_surface(&reference_anchors(), &opts) {
            Err(CalibrationError::Residual { report, .. }) => {
                assert_eq!(report.len(), 7);
                let c = report.iter().find(|r| r.label.as_deref() == Some("C")).unwrap();
                assert!((c.residual - 0.9).abs() < 0.05, "C sits at the 13.7 peak: {c:?}");
            }
            other => panic!("expected residual failure, got {other:?}"),
        }
    }

    #[test]
    fn refit_recovers_generated_anchors() {
        let truth = SurfaceParams {
            peak_base: 11.0,
            dmc_slope: 2.5,
            ec_curvature: 120.0,
            peak_molality: 1.0,
            peak_molality_ec_slope: -1.5,
            exponent_a: 0.8,
            exponent_b: 0.3,
            ..SurfaceParams::default()
        };
        let mut anchors = Vec::new();
        for (i, &(ec, r, m)) in [
            (0.30, 0.0, 1.1),
            (0.30, 1.0, 0.6),
            (0.35, 0.5, 1.6),
            (0.40, 1.0, 0.9),
            (0.40, 0.2, 1.3),
            (0.45, 0.7, 0.4),
            (0.50, 0.9, 1.1),
            (0.50, 0.1, 1.9),
            (0.32, 0.3, 0.8),
            (0.48, 0.6, 1.4),
            (0.42, 0.8, 0.2),
            (0.36, 0.9, 1.8),
        ]
        .iter()
        .enumerate()
        {
            let e = axes_to_electrolyte(&DesignAxes::new(ec, r, m).unwrap()).unwrap();
            anchors.push(Anchor {
                electrolyte: e,
                conductivity: true_conductivity(&e, truth.reference_temperature, &truth),
                label: Some(format!("s{i}")),
            });
        }
        let opts = CalibrationOptions { tolerance: 1e-6, peak: None, start: SurfaceParams::default() };
        let fitted = calibrate_surface(&anchors, &opts).expect("self-consistent anchors refit");
        for a in &anchors {
            let k = true_conductivity(&a.electrolyte, 27.0, &fitted);
            assert!((k - a.conductivity).abs() <= 1e-6, "{:?}: {k} vs {}", a.label, a.conductivity);
        }
    }

    #[test]
    fn csv_anchor_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.csv");
        std::fs::write(
            &path,
            "w_ec,w_dmc,w_emc,molality,conductivity_ms_cm\n0.3,0,0.7,1.1,9.8\n0.4,0.6,0,0.9,12.8\n",
        )
        .unwrap();
        let anchors = load_anchors_csv(&path).unwrap();
        assert_eq!(anchors.len(), 2);
        assert_eq!(anchors[1].conductivity, 12.8);
        std::fs::write(&path, "w_ec,w_dmc,w_emc,molality,conductivity_ms_cm\n0.3,0,0.6,1.1,9.8\n").unwrap();
        assert!(matches!(load_anchors_csv(&path), Err(CalibrationError::InvalidAnchor { index: 0, .. })));
    }
}
