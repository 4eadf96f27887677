//! Composition algebra for the EC/DMC/EMC + LiPF6 system.
//!
//! The planner works in three design axes (EC mass fraction, DMC co-solvent
//! ratio, salt molality); the instrument doses physical feeder solutions. This
//! module converts between the two views, enumerates the discretized design
//! grid, estimates mixture densities and solves the feeder dosing problem.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnls::{nnls, solve_passive};

/// Sum-to-one tolerance for solvent mass fractions.
pub const FRACTION_TOL: f64 = 1e-9;
/// Maximum relative mass-balance error accepted for a dose plan.
pub const DOSE_RESIDUAL_TOL: f64 = 1e-6;

pub const EC_FRAC_BOUNDS: AxisBounds = AxisBounds { lo: 0.30, hi: 0.50 };
pub const DMC_RATIO_BOUNDS: AxisBounds = AxisBounds { lo: 0.0, hi: 1.0 };
pub const MOLALITY_BOUNDS: AxisBounds = AxisBounds { lo: 0.0, hi: 2.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompositionError {
    #[error("{axis} = {value} outside [{lo}, {hi}]")]
    OutOfBounds { axis: Axis, value: f64, lo: f64, hi: f64 },
    #[error("solvent mass fractions sum to {sum}, expected 1")]
    FractionSum { sum: f64 },
    #[error("negative or non-finite mass fraction {value} for {solvent}")]
    NegativeFraction { solvent: Solvent, value: f64 },
    #[error("co-solvent ratio undefined for a pure EC blend")]
    UndefinedRatio,
    #[error("grid axis {axis} needs at least 2 levels, got {levels}")]
    TooFewLevels { axis: Axis, levels: usize },
    #[error("grid bounds for {axis} are empty or inverted: [{lo}, {hi}]")]
    InvalidGridBounds { axis: Axis, lo: f64, hi: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoseError {
    #[error("no feeder solutions supplied")]
    NoFeeders,
    #[error("total sample mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("target outside the feeder cone (relative residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("feeder {feeder} needs {required_ml:.4} mL but holds {available_ml:.4} mL")]
    Inventory { feeder: String, required_ml: f64, available_ml: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solvent {
    Ec,
    Dmc,
    Emc,
}

impl Solvent {
    pub const ALL: [Solvent; 3] = [Solvent::Ec, Solvent::Dmc, Solvent::Emc];

    pub fn index(self) -> usize {
        match self {
            Solvent::Ec => 0,
            Solvent::Dmc => 1,
            Solvent::Emc => 2,
        }
    }
}

impl fmt::Display for Solvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solvent::Ec => "EC",
            Solvent::Dmc => "DMC",
            Solvent::Emc => "EMC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    EcFrac,
    DmcRatio,
    Molality,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::EcFrac, Axis::DmcRatio, Axis::Molality];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::EcFrac => "ec_frac",
            Axis::DmcRatio => "dmc_ratio",
            Axis::Molality => "molality",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBounds {
    pub lo: f64,
    pub hi: f64,
}

impl AxisBounds {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo - FRACTION_TOL && v <= self.hi + FRACTION_TOL
    }

    fn check(&self, axis: Axis, value: f64) -> Result<(), CompositionError> {
        if value.is_finite() && self.contains(value) {
            Ok(())
        } else {
            Err(CompositionError::OutOfBounds { axis, value, lo: self.lo, hi: self.hi })
        }
    }
}

/// Solvent mass fractions (salt-free basis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolventBlend {
    pub w_ec: f64,
    pub w_dmc: f64,
    pub w_emc: f64,
}

impl SolventBlend {
    pub fn new(w_ec: f64, w_dmc: f64, w_emc: f64) -> Result<Self, CompositionError> {
        let blend = SolventBlend { w_ec, w_dmc, w_emc };
        blend.validate()?;
        Ok(blend)
    }

    pub fn pure(solvent: Solvent) -> Self {
        let mut w = [0.0; 3];
        w[solvent.index()] = 1.0;
        SolventBlend { w_ec: w[0], w_dmc: w[1], w_emc: w[2] }
    }

    pub fn validate(&self) -> Result<(), CompositionError> {
        for s in Solvent::ALL {
            let v = self.fraction(s);
            if !v.is_finite() || v < 0.0 {
                return Err(CompositionError::NegativeFraction { solvent: s, value: v });
            }
        }
        let sum = self.w_ec + self.w_dmc + self.w_emc;
        if (sum - 1.0).abs() > FRACTION_TOL {
            return Err(CompositionError::FractionSum { sum });
        }
        Ok(())
    }

    pub fn fraction(&self, s: Solvent) -> f64 {
        match s {
            Solvent::Ec => self.w_ec,
            Solvent::Dmc => self.w_dmc,
            Solvent::Emc => self.w_emc,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_ec, self.w_dmc, self.w_emc]
    }
}

/// A full sample composition: solvent blend plus LiPF6 molality (mol/kg solvent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Electrolyte {
    #[serde(flatten)]
    pub blend: SolventBlend,
    pub molality: f64,
}

impl Electrolyte {
    pub fn new(w_ec: f64, w_dmc: f64, w_emc: f64, molality: f64) -> Result<Self, CompositionError> {
        let e = Electrolyte { blend: SolventBlend { w_ec, w_dmc, w_emc }, molality };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), CompositionError> {
        self.blend.validate()?;
        MOLALITY_BOUNDS.check(Axis::Molality, self.molality)
    }

    /// Mass fractions of (EC, DMC, EMC, salt) in the finished solution.
    pub fn species_fractions(&self, salt_molar_mass: f64) -> [f64; 4] {
        let salt = self.molality * salt_molar_mass;
        let total = 1.0 + salt;
        [self.blend.w_ec / total, self.blend.w_dmc / total, self.blend.w_emc / total, salt / total]
    }
}

impl fmt::Display for Electrolyte {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EC/DMC/EMC {:.3}/{:.3}/{:.3} + {:.3} mol/kg LiPF6",
            self.blend.w_ec, self.blend.w_dmc, self.blend.w_emc, self.molality
        )
    }
}

/// The planner's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignAxes {
    pub ec_frac: f64,
    pub dmc_ratio: f64,
    pub molality: f64,
}

impl DesignAxes {
    pub fn new(ec_frac: f64, dmc_ratio: f64, molality: f64) -> Result<Self, CompositionError> {
        let a = DesignAxes { ec_frac, dmc_ratio, molality };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), CompositionError> {
        EC_FRAC_BOUNDS.check(Axis::EcFrac, self.ec_frac)?;
        DMC_RATIO_BOUNDS.check(Axis::DmcRatio, self.dmc_ratio)?;
        MOLALITY_BOUNDS.check(Axis::Molality, self.molality)
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::EcFrac => self.ec_frac,
            Axis::DmcRatio => self.dmc_ratio,
            Axis::Molality => self.molality,
        }
    }
}

pub fn axes_to_electrolyte(a: &DesignAxes) -> Result<Electrolyte, CompositionError> {
    a.validate()?;
    let w_ec = a.ec_frac;
    let w_dmc = a.dmc_ratio * (1.0 - w_ec);
    // Clamp the last component against rounding so the blend stays non-negative.
    let w_emc = (1.0 - w_ec - w_dmc).max(0.0);
    Ok(Electrolyte { blend: SolventBlend { w_ec, w_dmc, w_emc }, molality: a.molality })
}

pub fn electrolyte_to_axes(e: &Electrolyte) -> Result<DesignAxes, CompositionError> {
    e.validate()?;
    let rest = 1.0 - e.blend.w_ec;
    if rest <= 0.0 {
        return Err(CompositionError::UndefinedRatio);
    }
    DesignAxes::new(e.blend.w_ec, e.blend.w_dmc / rest, e.molality)
}

/// Per-axis level counts and bounds for the discretized domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub ec_frac: AxisBounds,
    pub dmc_ratio: AxisBounds,
    pub molality: AxisBounds,
    pub levels: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            ec_frac: EC_FRAC_BOUNDS,
            dmc_ratio: DMC_RATIO_BOUNDS,
            molality: AxisBounds { lo: 0.5, hi: 1.5 },
            levels: [11, 11, 11],
        }
    }
}

impl GridSpec {
    pub fn bounds(&self, axis: Axis) -> AxisBounds {
        match axis {
            Axis::EcFrac => self.ec_frac,
            Axis::DmcRatio => self.dmc_ratio,
            Axis::Molality => self.molality,
        }
    }

    pub fn level_values(&self, axis: Axis) -> Vec<f64> {
        let i = axis as usize;
        let b = self.bounds(axis);
        let n = self.levels[i];
        (0..n)
            .map(|k| if k + 1 == n { b.hi } else { b.lo + (b.hi - b.lo) * k as f64 / (n - 1) as f64 })
            .collect()
    }
}

/// Enumerated design grid. Points are ordered lexicographically by
/// (ec level, ratio level, molality level), molality varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    spec: GridSpec,
    points: Vec<DesignAxes>,
}

pub fn enumerate_grid(spec: &GridSpec) -> Result<DomainGrid, CompositionError> {
    for axis in Axis::ALL {
        let levels = spec.levels[axis as usize];
        if levels < 2 {
            return Err(CompositionError::TooFewLevels { axis, levels });
        }
        let b = spec.bounds(axis);
        if !(b.lo.is_finite() && b.hi.is_finite() && b.lo < b.hi) {
            return Err(CompositionError::InvalidGridBounds { axis, lo: b.lo, hi: b.hi });
        }
    }
    let ecs = spec.level_values(Axis::EcFrac);
    let ratios = spec.level_values(Axis::DmcRatio);
    let ms = spec.level_values(Axis::Molality);
    let mut points = Vec::with_capacity(ecs.len() * ratios.len() * ms.len());
    for &ec_frac in &ecs {
        for &dmc_ratio in &ratios {
            for &molality in &ms {
                points.push(DesignAxes::new(ec_frac, dmc_ratio, molality)?);
            }
        }
    }
    Ok(DomainGrid { spec: *spec, points })
}

impl DomainGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn points(&self) -> &[DesignAxes] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> DesignAxes {
        self.points[index]
    }

    pub fn level_indices(&self, index: usize) -> [usize; 3] {
        let [_, nr, nm] = self.spec.levels;
        [index / (nr * nm), (index / nm) % nr, index % nm]
    }

    /// Coordinates of a grid point scaled to the unit cube.
    pub fn normalized(&self, index: usize) -> [f64; 3] {
        let li = self.level_indices(index);
        std::array::from_fn(|d| li[d] as f64 / (self.spec.levels[d] - 1) as f64)
    }

    /// Index of the grid point matching `a` (within half a level per axis), if any.
    pub fn locate(&self, a: &DesignAxes) -> Option<usize> {
        let mut idx = [0usize; 3];
        for axis in Axis::ALL {
            let d = axis as usize;
            let b = self.spec.bounds(axis);
            let n = self.spec.levels[d];
            let step = (b.hi - b.lo) / (n - 1) as f64;
            let pos = (a.get(axis) - b.lo) / step;
            let k = pos.round();
            if k < 0.0 || k > (n - 1) as f64 || (pos - k).abs() > 1e-6 {
                return None;
            }
            idx[d] = k as usize;
        }
        let [_, nr, nm] = self.spec.levels;
        Some(idx[0] * nr * nm + idx[1] * nm + idx[2])
    }
}

/// Ideal volume-fraction mixing of pure solvents plus a constant apparent
/// molar volume for the salt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityModel {
    /// Pure solvent densities at 25 °C, g/mL, ordered EC, DMC, EMC.
    pub pure_density_25c: [f64; 3],
    /// Linear thermal coefficient dρ/dT, g/mL per °C (applied with a minus sign).
    pub thermal_coefficient: f64,
    /// LiPF6 molar mass, kg/mol.
    pub salt_molar_mass: f64,
    /// Apparent molar volume of the dissolved salt, mL/mol.
    pub salt_apparent_volume: f64,
}

impl Default for DensityModel {
    fn default() -> Self {
        DensityModel {
            pure_density_25c: [1.321, 1.069, 1.006],
            thermal_coefficient: 1.0e-3,
            salt_molar_mass: 0.15191,
            salt_apparent_volume: 45.0,
        }
    }
}

impl DensityModel {
    pub fn pure_density(&self, s: Solvent, temperature_c: f64) -> f64 {
        self.pure_density_25c[s.index()] - self.thermal_coefficient * (temperature_c - 25.0)
    }

    /// Solution density in g/mL. Basis: 1 kg of solvent, so the numerator is
    /// kg of solution and the denominator litres.
    pub fn estimate(&self, e: &Electrolyte, temperature_c: f64) -> f64 {
        let specific_volume: f64 = Solvent::ALL
            .iter()
            .map(|&s| e.blend.fraction(s) / self.pure_density(s, temperature_c))
            .sum();
        let mass = 1.0 + e.molality * self.salt_molar_mass;
        let volume = specific_volume + e.molality * self.salt_apparent_volume / 1000.0;
        mass / volume
    }
}

pub fn estimate_density(e: &Electrolyte, temperature_c: f64, model: &DensityModel) -> f64 {
    model.estimate(e, temperature_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederSolution {
    pub id: String,
    pub composition: Electrolyte,
    /// g/mL
    pub density: f64,
    /// mL remaining
    pub inventory_ml: f64,
}

impl FeederSolution {
    pub fn new(
        id: impl Into<String>,
        composition: Electrolyte,
        density: f64,
        inventory_ml: f64,
    ) -> Result<Self, CompositionError> {
        composition.validate()?;
        Ok(FeederSolution { id: id.into(), composition, density, inventory_ml })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosePlan {
    /// Feeder id → mL to dispense.
    pub volumes: BTreeMap<String, f64>,
    /// g
    pub total_mass: f64,
    /// Relative mass-balance error ||A v − b|| / ||b||.
    pub residual: f64,
}

impl DosePlan {
    /// Species masses (EC, DMC, EMC, salt) in grams delivered by this plan.
    pub fn species_masses(&self, feeders: &[FeederSolution], salt_molar_mass: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for f in feeders {
            let v = self.volumes.get(&f.id).copied().unwrap_or(0.0);
            let w = f.composition.species_fractions(salt_molar_mass);
            for i in 0..4 {
                out[i] += v * f.density * w[i];
            }
        }
        out
    }
}

/// Volumes of each feeder that produce `total_mass` grams of `target`.
///
/// Solves the four-species mass balance with non-negative volumes. With exactly
/// four well-conditioned feeders the square system is solved directly; otherwise
/// an active-set NNLS solve is followed by a minimum-norm refinement on the
/// selected support so degenerate rosters resolve deterministically.
pub fn plan_dose(
    target: &Electrolyte,
    total_mass: f64,
    feeders: &[FeederSolution],
    salt_molar_mass: f64,
) -> Result<DosePlan, DoseError> {
    if feeders.is_empty() {
        return Err(DoseError::NoFeeders);
    }
    if !(total_mass > 0.0 && total_mass.is_finite()) {
        return Err(DoseError::NonPositiveMass(total_mass));
    }

    let n = feeders.len();
    let a = DMatrix::from_fn(4, n, |i, j| {
        feeders[j].density * feeders[j].composition.species_fractions(salt_molar_mass)[i]
    });
    let t = target.species_fractions(salt_molar_mass);
    let b = DVector::from_fn(4, |i, _| total_mass * t[i]);
    let b_norm = b.norm();
    let rel = |v: &DVector<f64>| (&a * v - &b).norm() / b_norm;

    let volumes = exact_square_solve(&a, &b)
        .filter(|v| rel(v) <= DOSE_RESIDUAL_TOL)
        .unwrap_or_else(|| {
            let base = nnls(&a, &b).x;
            match min_norm_refinement(&a, &b, &base) {
                Some(v) if rel(&v) <= rel(&base).max(1e-12) => v,
                _ => base,
            }
        });

    let residual = rel(&volumes);
    if residual > DOSE_RESIDUAL_TOL || !residual.is_finite() {
        return Err(DoseError::Infeasible { residual });
    }
    for (f, &v) in feeders.iter().zip(volumes.iter()) {
        if v > f.inventory_ml * (1.0 + 1e-12) {
            return Err(DoseError::Inventory {
                feeder: f.id.clone(),
                required_ml: v,
                available_ml: f.inventory_ml,
            });
        }
    }

    Ok(DosePlan {
        volumes: feeders.iter().zip(volumes.iter()).map(|(f, &v)| (f.id.clone(), v)).collect(),
        total_mass,
        residual,
    })
}

/// Direct solve for a square, well-conditioned feeder matrix with a
/// non-negative solution.
fn exact_square_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() != a.ncols() {
        return None;
    }
    let sv = a.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 || max / min >= 1e8 {
        return None;
    }
    let mut v = a.clone().lu().solve(b)?;
    let scale = v.amax().max(1e-300);
    if v.iter().any(|&x| x < -1e-12 * scale) {
        return None;
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    Some(v)
}

/// Ridge-regularized NNLS picks the support the minimum-norm solution would
/// use; the exact minimum-norm solve on that support replaces `base` when it
/// stays non-negative.
fn min_norm_refinement(a: &DMatrix<f64>, b: &DVector<f64>, base: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    let sv = a.singular_values();
    let rank = sv.iter().filter(|&&s| s > 1e-12 * sv.max()).count();
    if rank == n {
        return None;
    }
    let ridge = 1e-4 * a.norm();
    let mut aug = DMatrix::zeros(m + n, n);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    for j in 0..n {
        aug[(m + j, j)] = ridge;
    }
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(b);
    let reg = nnls(&aug, &rhs).x;
    let support: Vec<bool> = reg.iter().map(|&x| x > 0.0).collect();
    if !support.iter().any(|&s| s) {
        return None;
    }
    let v = solve_passive(a, b, &support);
    if v.iter().any(|&x| x < 0.0) || v.norm() > base.norm() {
        return None;
    }
    Some(v)
}
