//! Work-day and sample-count accounting for the closed loop versus a
//! human-run factorial design.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::virtual_lab::LabConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("count {0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("factorial size {levels}^{factors} overflows")]
    Overflow { levels: u64, factors: u32 },
}

fn positive(name: &'static str, v: f64) -> Result<(), AnalyticsError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(AnalyticsError::NonPositive(name, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanModel {
    pub hours_per_day: f64,
    /// Preparation, mixing and measurement of one sample.
    pub minutes_per_experiment: f64,
}

impl Default for HumanModel {
    fn default() -> Self {
        HumanModel { hours_per_day: 8.0, minutes_per_experiment: 28.8 }
    }
}

impl HumanModel {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        positive("human hours_per_day", self.hours_per_day)?;
        positive("human minutes_per_experiment", self.minutes_per_experiment)
    }

    pub fn experiments_per_day(&self) -> f64 {
        self.hours_per_day * 60.0 / self.minutes_per_experiment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub hours_per_day: f64,
    pub minutes_per_experiment: f64,
}

impl RobotModel {
    pub const DEFAULT_HOURS_PER_DAY: f64 = 24.0;

    pub fn from_lab(lab: &LabConfig, hours_per_day: f64) -> Self {
        RobotModel { hours_per_day, minutes_per_experiment: lab.minutes_per_experiment() }
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        positive("robot hours_per_day", self.hours_per_day)?;
        positive("robot minutes_per_experiment", self.minutes_per_experiment)
    }
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::from_lab(&LabConfig::default(), Self::DEFAULT_HOURS_PER_DAY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkDays {
    pub raw: f64,
    pub ceiled: u64,
}

impl WorkDays {
    fn of(n: u64, minutes_per_experiment: f64, hours_per_day: f64) -> Self {
        let raw = n as f64 * minutes_per_experiment / (hours_per_day * 60.0);
        // Guard against 2.0000000000000004 ceiling to 3.
        let ceiled = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
        WorkDays { raw, ceiled: ceiled as u64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEfficiency {
    pub experiments: u64,
    pub human: WorkDays,
    pub robot: WorkDays,
    /// Human raw work-days over robot raw work-days; undefined (None) at n = 0.
    pub ratio: Option<f64>,
}

pub fn time_efficiency(n: u64, human: &HumanModel, robot: &RobotModel) -> Result<TimeEfficiency, AnalyticsError> {
    human.validate()?;
    robot.validate()?;
    let h = WorkDays::of(n, human.minutes_per_experiment, human.hours_per_day);
    let r = WorkDays::of(n, robot.minutes_per_experiment, robot.hours_per_day);
    Ok(TimeEfficiency { experiments: n, human: h, robot: r, ratio: (n > 0).then(|| h.raw / r.raw) })
}

/// levels^factors in integer arithmetic.
pub fn factorial_count(levels: u64, factors: u32) -> Result<u64, AnalyticsError> {
    levels.checked_pow(factors).ok_or(AnalyticsError::Overflow { levels, factors })
}

pub fn sample_efficiency(ml_doe_count: u64, levels: u64, factors: u32) -> Result<f64, AnalyticsError> {
    if ml_doe_count == 0 {
        return Err(AnalyticsError::ZeroCount("ml_doe_count"));
    }
    if levels == 0 || factors == 0 {
        return Err(AnalyticsError::ZeroCount("factorial levels/factors"));
    }
    Ok(factorial_count(levels, factors)? as f64 / ml_doe_count as f64)
}

/// Human work-days for `factorial_samples` over robot work-days for `ml_samples`.
pub fn overall_speedup(
    human: &HumanModel,
    robot: &RobotModel,
    factorial_samples: u64,
    ml_samples: u64,
) -> Result<f64, AnalyticsError> {
    if factorial_samples == 0 || ml_samples == 0 {
        return Err(AnalyticsError::ZeroCount("samples"));
    }
    let h = time_efficiency(factorial_samples, human, robot)?.human.raw;
    let r = time_efficiency(ml_samples, human, robot)?.robot.raw;
    Ok(h / r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub human: HumanModel,
    pub robot_hours_per_day: f64,
    /// Experiments run by the closed loop.
    pub ml_doe_count: u64,
    /// Factorial a human would run instead.
    pub factorial_levels: u64,
    pub factors: u32,
    /// Finer discretization used for the exhaustive-search comparison.
    pub exhaustive_levels: u64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            human: HumanModel::default(),
            robot_hours_per_day: RobotModel::DEFAULT_HOURS_PER_DAY,
            ml_doe_count: 42,
            factorial_levels: 5,
            factors: 3,
            exhaustive_levels: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub human: HumanModel,
    pub robot: RobotModel,
    pub time: TimeEfficiency,
    pub ml_doe_count: u64,
    pub factorial_levels: u64,
    pub factors: u32,
    pub factorial_count: u64,
    pub sample_ratio: f64,
    pub exhaustive_count: u64,
    pub exhaustive_sample_ratio: f64,
    pub exhaustive_human_days: WorkDays,
    pub overall_speedup: f64,
}

impl EfficiencyReport {
    /// `n` sets the experiment count of the time comparison.
    pub fn build(cfg: &AnalyticsConfig, lab: &LabConfig, n: u64) -> Result<Self, AnalyticsError> {
        let robot = RobotModel::from_lab(lab, cfg.robot_hours_per_day);
        let time = time_efficiency(n, &cfg.human, &robot)?;
        let factorial = factorial_count(cfg.factorial_levels, cfg.factors)?;
        let exhaustive = factorial_count(cfg.exhaustive_levels, cfg.factors)?;
        Ok(EfficiencyReport {
            human: cfg.human,
            robot,
            time,
            ml_doe_count: cfg.ml_doe_count,
            factorial_levels: cfg.factorial_levels,
            factors: cfg.factors,
            factorial_count: factorial,
            sample_ratio: sample_efficiency(cfg.ml_doe_count, cfg.factorial_levels, cfg.factors)?,
            exhaustive_count: exhaustive,
            exhaustive_sample_ratio: sample_efficiency(cfg.ml_doe_count, cfg.exhaustive_levels, cfg.factors)?,
            exhaustive_human_days: time_efficiency(exhaustive, &cfg.human, &robot)?.human,
            overall_speedup: overall_speedup(&cfg.human, &robot, factorial, cfg.ml_doe_count)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let t = &self.time;
        let ratio = t.ratio.map_or("n/a".to_string(), |r| format!("{r:.2}"));
        let mut s = String::new();
        s.push_str(&format!("{:<44}{:>12}{:>12}\n", "", "human", "robot"));
        s.push_str(&format!("{:<44}{:>12.1}{:>12.1}\n", "minutes per experiment", self.human.minutes_per_experiment, self.robot.minutes_per_experiment));
        s.push_str(&format!("{:<44}{:>12.1}{:>12.1}\n", "hours per day", self.human.hours_per_day, self.robot.hours_per_day));
        s.push_str(&format!("{:<44}{:>12.2}{:>12.2}\n", format!("work-days for {} experiments", t.experiments), t.human.raw, t.robot.raw));
        s.push_str(&format!("{:<44}{:>12}{:>12}\n", "  (whole days)", t.human.ceiled, t.robot.ceiled));
        s.push_str(&format!("{:<44}{:>12}\n", "time ratio (human / robot)", ratio));
        s.push_str(&format!(
            "{:<44}{:>12}\n",
            format!("factorial {}^{} / ML DOE {}", self.factorial_levels, self.factors, self.ml_doe_count),
            format!("{}/{} = {:.2}", self.factorial_count, self.ml_doe_count, self.sample_ratio)
        ));
        s.push_str(&format!(
            "{:<44}{:>12}\n",
            format!("exhaustive {} samples, human work-days", self.exhaustive_count),
            format!("{:.1}", self.exhaustive_human_days.raw)
        ));
        s.push_str(&format!("{:<44}{:>12.2}\n", "overall speed-up", self.overall_speedup));
        s
    }
}
