//! Heuristic shortlisting of measured electrolytes for follow-up testing.

use serde::{Deserialize, Serialize};

use super::log::CampaignLog;
use crate::composition::{Electrolyte, Solvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CandidateRule {
    TopConductivity { n: usize },
    /// Highest molalities among those with conductivity above `kappa_min`.
    HighMolalityAbove { kappa_min: f64, n: usize },
    LowMolalityAbove { kappa_min: f64, n: usize },
    TopWithSolventPresent { solvent: Solvent, n: usize },
}

impl CandidateRule {
    pub fn count(&self) -> usize {
        match *self {
            CandidateRule::TopConductivity { n }
            | CandidateRule::HighMolalityAbove { n, .. }
            | CandidateRule::LowMolalityAbove { n, .. }
            | CandidateRule::TopWithSolventPresent { n, .. } => n,
        }
    }

    pub fn is_valid(&self) -> bool {
        let kappa_ok = match *self {
            CandidateRule::HighMolalityAbove { kappa_min, .. } | CandidateRule::LowMolalityAbove { kappa_min, .. } => {
                kappa_min >= 0.0
            }
            _ => true,
        };
        self.count() >= 1 && kappa_ok
    }
}

pub fn default_rules() -> Vec<CandidateRule> {
    vec![
        CandidateRule::TopConductivity { n: 3 },
        CandidateRule::HighMolalityAbove { kappa_min: 10.0, n: 2 },
        CandidateRule::LowMolalityAbove { kappa_min: 10.0, n: 1 },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub composition: Electrolyte,
    pub conductivity_ms_cm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub composition: Electrolyte,
    pub conductivity_ms_cm: f64,
    /// Index of the rule that picked it.
    pub rule: usize,
}

fn tuple(e: &Electrolyte) -> [f64; 4] {
    [e.blend.w_ec, e.blend.w_dmc, e.blend.w_emc, e.molality]
}

fn cmp_composition(a: &Electrolyte, b: &Electrolyte) -> std::cmp::Ordering {
    let (ta, tb) = (tuple(a), tuple(b));
    ta.iter().zip(&tb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Applies `rules` in order, never picking the same measurement twice and
/// skipping `reference` (the baseline). Only the set of measurements matters,
/// not their order.
pub fn select_from(measurements: &[Measured], rules: &[CandidateRule], reference: Option<&Electrolyte>) -> Vec<Candidate> {
    let mut pool: Vec<Measured> = measurements
        .iter()
        .filter(|m| m.conductivity_ms_cm.is_finite())
        .filter(|m| reference.is_none_or(|r| cmp_composition(r, &m.composition).is_ne()))
        .copied()
        .collect();
    pool.sort_by(|a, b| {
        b.conductivity_ms_cm
            .total_cmp(&a.conductivity_ms_cm)
            .then_with(|| cmp_composition(&a.composition, &b.composition))
    });
    pool.dedup_by(|a, b| a == b);

    let mut taken = vec![false; pool.len()];
    let mut out = Vec::new();
    for (ri, rule) in rules.iter().enumerate().filter(|(_, r)| r.is_valid()) {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| !taken[i]).collect();
        match *rule {
            CandidateRule::TopConductivity { .. } => {}
            CandidateRule::HighMolalityAbove { kappa_min, .. } => {
                idx.retain(|&i| pool[i].conductivity_ms_cm > kappa_min);
                idx.sort_by(|&a, &b| pool[b].composition.molality.total_cmp(&pool[a].composition.molality));
            }
            CandidateRule::LowMolalityAbove { kappa_min, .. } => {
                idx.retain(|&i| pool[i].conductivity_ms_cm > kappa_min);
                idx.sort_by(|&a, &b| pool[a].composition.molality.total_cmp(&pool[b].composition.molality));
            }
            CandidateRule::TopWithSolventPresent { solvent, .. } => {
                idx.retain(|&i| pool[i].composition.blend.fraction(solvent) > 0.0);
            }
        }
        for &i in idx.iter().take(rule.count()) {
            taken[i] = true;
            out.push(Candidate { composition: pool[i].composition, conductivity_ms_cm: pool[i].conductivity_ms_cm, rule: ri });
        }
    }
    out
}

pub fn select_candidates(log: &CampaignLog, rules: &[CandidateRule]) -> Vec<Candidate> {
    let measured: Vec<Measured> = log
        .entries
        .iter()
        .filter_map(|e| e.reported().map(|k| Measured { composition: e.request.composition, conductivity_ms_cm: k }))
        .collect();
    let reference = log.config().baseline.as_ref().map(|b| &b.composition);
    select_from(&measured, rules, reference)
}
