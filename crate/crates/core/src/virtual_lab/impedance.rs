//! Impedance-spectroscopy emulation of the conductivity cell.
//!
//! The cell is the bulk solution resistance in series with a constant-phase
//! element for electrode polarization, both scaled by the cell geometry:
//! `Z(ω) = k · (ρ + 1 / (Q (jω)^n))` with ρ = 1/κ the resistivity.

use nalgebra::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BAND_LOW_HZ: f64 = 14e3;
pub const BAND_HIGH_HZ: f64 = 800e3;
pub const FREQUENCY_COUNT: usize = 5;
/// Readings above this resistance are reported as an open circuit.
pub const RESISTANCE_CEILING_OHM: f64 = 1e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpedanceError {
    #[error("open circuit: resistance above the measurable ceiling")]
    OpenCircuit,
    #[error("no frequency has |phase| below pi/4; spectrum unreliable")]
    Unreliable,
    #[error("invalid spectrum: {0}")]
    Invalid(String),
}

/// Five log-spaced frequencies spanning the measurement band, ascending.
pub fn measurement_frequencies() -> [f64; FREQUENCY_COUNT] {
    let ratio = BAND_HIGH_HZ / BAND_LOW_HZ;
    std::array::from_fn(|k| {
        if k + 1 == FREQUENCY_COUNT {
            BAND_HIGH_HZ
        } else {
            BAND_LOW_HZ * ratio.powf(k as f64 / (FREQUENCY_COUNT - 1) as f64)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConstant {
    /// cm⁻¹
    pub value: f64,
    /// Conductivity of the standard used to derive it, mS/cm.
    pub standard_ms_cm: f64,
}

impl CellConstant {
    pub fn uncalibrated(value: f64) -> Self {
        CellConstant { value, standard_ms_cm: f64::NAN }
    }
}

/// Electrode-polarization constant-phase element, per unit cell constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElectrodeModel {
    pub cpe_exponent: f64,
    /// CPE magnitude Q in S·sⁿ·cm.
    pub cpe_magnitude: f64,
}

impl Default for ElectrodeModel {
    fn default() -> Self {
        ElectrodeModel { cpe_exponent: 0.85, cpe_magnitude: 2e-5 }
    }
}

impl ElectrodeModel {
    /// Specific electrode impedance in Ω·cm at `frequency_hz`.
    pub fn specific_impedance(&self, frequency_hz: f64) -> Complex<f64> {
        let omega = 2.0 * std::f64::consts::PI * frequency_hz;
        let n = self.cpe_exponent;
        // (jω)^n = ω^n · e^{j n π/2}
        let jw_n = Complex::from_polar(omega.powf(n), n * std::f64::consts::FRAC_PI_2);
        Complex::new(1.0, 0.0) / (jw_n * self.cpe_magnitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumPoint {
    pub frequency_hz: f64,
    pub impedance_ohm: Complex<f64>,
    pub phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpedanceSpectrum {
    points: Vec<SpectrumPoint>,
}

impl ImpedanceSpectrum {
    /// Builds a spectrum from (frequency, impedance) pairs; phases are derived.
    pub fn from_measurements(data: &[(f64, Complex<f64>)]) -> Result<Self, ImpedanceError> {
        if data.len() != FREQUENCY_COUNT {
            return Err(ImpedanceError::Invalid(format!("{} frequencies, expected {FREQUENCY_COUNT}", data.len())));
        }
        let tol = 1e-6;
        for w in data.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ImpedanceError::Invalid("frequencies not strictly increasing".into()));
            }
        }
        for &(f, z) in data {
            if f < BAND_LOW_HZ * (1.0 - tol) || f > BAND_HIGH_HZ * (1.0 + tol) {
                return Err(ImpedanceError::Invalid(format!("frequency {f} Hz outside band")));
            }
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(ImpedanceError::Invalid("non-finite impedance".into()));
            }
        }
        Ok(ImpedanceSpectrum {
            points: data
                .iter()
                .map(|&(frequency_hz, z)| SpectrumPoint { frequency_hz, impedance_ohm: z, phase_rad: z.arg() })
                .collect(),
        })
    }

    pub fn points(&self) -> &[SpectrumPoint] {
        &self.points
    }

    /// Point with the smallest |phase|; ties go to the lower frequency.
    pub fn min_phase_point(&self) -> &SpectrumPoint {
        self.points
            .iter()
            .reduce(|best, p| if p.phase_rad.abs() < best.phase_rad.abs() { p } else { best })
            .expect("spectrum is non-empty")
    }
}

/// Emulates one impedance sweep of a sample with conductivity `kappa_ms_cm`
/// in a cell of geometry `cell`. `noise_sigma` is the log-normal spread of
/// the multiplicative reading error (0 disables noise).
pub fn simulate_impedance<R: Rng + ?Sized>(
    kappa_ms_cm: f64,
    cell: &CellConstant,
    electrode: &ElectrodeModel,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<ImpedanceSpectrum, ImpedanceError> {
    if !(kappa_ms_cm > 0.0) {
        return Err(ImpedanceError::OpenCircuit);
    }
    let resistivity = 1000.0 / kappa_ms_cm; // Ω·cm
    if cell.value * resistivity > RESISTANCE_CEILING_OHM {
        return Err(ImpedanceError::OpenCircuit);
    }
    let gain = if noise_sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        (noise_sigma * z).exp()
    } else {
        1.0
    };
    let data: Vec<(f64, Complex<f64>)> = measurement_frequencies()
        .iter()
        .map(|&f| {
            let z = (electrode.specific_impedance(f) + resistivity) * (cell.value * gain);
            (f, z)
        })
        .collect();
    ImpedanceSpectrum::from_measurements(&data)
}

/// Conductivity (mS/cm) from the real part at the minimum-|phase| frequency.
pub fn extract_conductivity(spectrum: &ImpedanceSpectrum, cell: &CellConstant) -> Result<f64, ImpedanceError> {
    let p = spectrum.min_phase_point();
    if p.phase_rad.abs() > std::f64::consts::FRAC_PI_4 {
        return Err(ImpedanceError::Unreliable);
    }
    let r = p.impedance_ohm.re;
    if !(r > 0.0) || r > RESISTANCE_CEILING_OHM {
        return Err(ImpedanceError::OpenCircuit);
    }
    Ok(1000.0 * cell.value / r)
}
