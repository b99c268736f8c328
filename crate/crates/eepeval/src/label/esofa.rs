//! Rule-based sepsis labeling: an inclusion filter over early vital and
//! lab abnormalities, then an event definition built from blood
//! cultures, sustained antibiotic therapy, and acute organ dysfunction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::codes;
use super::{CriterionHit, LabelOutcome};
use crate::event::{Episode, Modality, Timestamp};

/// Thresholds and windows of the sepsis engine. Defaults follow common
/// electronic surveillance definitions; every field can be overridden
/// from a rule file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsofaConfig {
    /// Half-width, in days, of the window around a blood culture in
    /// which antibiotic chains may start and organ dysfunction may
    /// occur.
    pub culture_window_days: f64,
    /// Minimum span an antibiotic chain must cover, in hours.
    pub antibiotic_coverage_hours: f64,
    /// Maximum gap between consecutive doses within one chain, hours.
    pub max_dose_gap_hours: f64,
    /// Lactate at or above this fires organ dysfunction (mmol/L).
    pub lactate_threshold: f64,
    /// Bilirubin must reach this (mg/dL) and double from baseline.
    pub bilirubin_threshold: f64,
    /// Platelets must fall below this (K/uL) from a baseline at or
    /// above it.
    pub platelet_threshold: f64,
    /// Fractional platelet decline required (0.5 = halved).
    pub platelet_decline_frac: f64,
    /// Creatinine must reach this multiple of baseline.
    pub creatinine_doubling: f64,
}

impl Default for EsofaConfig {
    fn default() -> Self {
        EsofaConfig {
            culture_window_days: 2.0,
            antibiotic_coverage_hours: 72.0,
            max_dose_gap_hours: 24.0,
            lactate_threshold: 2.0,
            bilirubin_threshold: 2.0,
            platelet_threshold: 100.0,
            platelet_decline_frac: 0.5,
            creatinine_doubling: 2.0,
        }
    }
}

/// Bilirubin must at least double from baseline, independent of the
/// absolute threshold.
const BILIRUBIN_BASELINE_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EsofaConfigError {
    #[error("{field} must be positive and finite, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("platelet_decline_frac must lie in (0, 1), got {0}")]
    BadDeclineFraction(f64),
}

impl EsofaConfig {
    pub fn validate(&self) -> Result<(), EsofaConfigError> {
        let positive = [
            ("culture_window_days", self.culture_window_days),
            ("antibiotic_coverage_hours", self.antibiotic_coverage_hours),
            ("max_dose_gap_hours", self.max_dose_gap_hours),
            ("lactate_threshold", self.lactate_threshold),
            ("bilirubin_threshold", self.bilirubin_threshold),
            ("platelet_threshold", self.platelet_threshold),
            ("creatinine_doubling", self.creatinine_doubling),
        ];
        for (field, value) in positive {
            if !value.is_finite() || value <= 0.0 {
                return Err(EsofaConfigError::NonPositive { field, value });
            }
        }
        let f = self.platelet_decline_frac;
        if !(f > 0.0 && f < 1.0) {
            return Err(EsofaConfigError::BadDeclineFraction(f));
        }
        Ok(())
    }
}

/// Result of the sepsis inclusion filter.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionOutcome {
    pub included: bool,
    pub trace: Vec<CriterionHit>,
}

const INCLUSION_WINDOW_HOURS: f64 = 24.0;
const SUPPORT_PROXIMITY_HOURS: f64 = 12.0;

fn first_vital(episode: &Episode, code: &str) -> impl Iterator<Item = (f64, f64)> {
    episode
        .observations
        .iter()
        .filter(move |o| o.modality == Modality::Vital && o.code() == Some(code))
        .filter_map(|o| Some((o.t.hours(), o.numeric()?)))
        .collect::<Vec<_>>()
        .into_iter()
}

fn labs(episode: &Episode, code: &str) -> Vec<(f64, f64)> {
    episode
        .observations
        .iter()
        .filter(|o| o.modality == Modality::Lab && o.code() == Some(code))
        .filter_map(|o| Some((o.t.hours(), o.numeric()?)))
        .collect()
}

/// Suspected-infection inclusion filter.
///
/// An episode enters the sepsis cohort when, within its first 24 hours,
/// temperature is abnormal (below 36 or above 38.5 C), at least one of
/// an abnormal white count (above 12 or below 4 K/uL), heart rate above
/// 90, or respiratory rate above 20 occurs, one such supporting
/// criterion falls within 12 hours of the abnormal temperature, and no
/// intravenous antibiotic was given at or before the first criterion
/// time.
pub fn sepsis_cohort_filter(episode: &Episode) -> InclusionOutcome {
    let temp = first_vital(episode, codes::TEMPERATURE)
        .find(|&(t, v)| t <= INCLUSION_WINDOW_HOURS && (v < 36.0 || v > 38.5));
    let wbc = labs(episode, codes::WBC)
        .into_iter()
        .find(|&(t, v)| t <= INCLUSION_WINDOW_HOURS && (v > 12.0 || v < 4.0));
    let hr = first_vital(episode, codes::HEART_RATE)
        .find(|&(t, v)| t <= INCLUSION_WINDOW_HOURS && v > 90.0);
    let rr = first_vital(episode, codes::RESPIRATORY_RATE)
        .find(|&(t, v)| t <= INCLUSION_WINDOW_HOURS && v > 20.0);

    let mut trace = Vec::new();
    if let Some((t, _)) = temp {
        trace.push(CriterionHit::new("abnormal_temperature", Timestamp::new(t)));
    }
    for (name, hit) in [("wbc_abnormal", wbc), ("tachycardia", hr), ("tachypnea", rr)] {
        if let Some((t, _)) = hit {
            trace.push(CriterionHit::new(name, Timestamp::new(t)));
        }
    }

    let supported = match temp {
        Some((temp_t, _)) => [wbc, hr, rr]
            .into_iter()
            .flatten()
            .any(|(t, _)| (t - temp_t).abs() <= SUPPORT_PROXIMITY_HOURS),
        None => false,
    };

    let first_criterion = [temp, wbc, hr, rr]
        .into_iter()
        .flatten()
        .map(|(t, _)| t)
        .fold(f64::INFINITY, f64::min);
    let prior_antibiotic = first_criterion.is_finite()
        && episode.observations.iter().any(|o| {
            o.modality == Modality::Medication
                && o.code() == Some(codes::IV_ANTIBIOTIC)
                && o.t.hours() <= first_criterion
        });

    InclusionOutcome {
        included: temp.is_some() && supported && !prior_antibiotic,
        trace,
    }
}

/// Consecutive dose times grouped into chains with gaps of at most
/// `max_gap` hours.
fn dose_chains(doses: &[f64], max_gap: f64) -> Vec<Vec<f64>> {
    let mut chains: Vec<Vec<f64>> = Vec::new();
    for &d in doses {
        match chains.last_mut() {
            Some(chain) if d - *chain.last().unwrap() <= max_gap => chain.push(d),
            _ => chains.push(vec![d]),
        }
    }
    chains
}

struct OrganHits {
    hits: Vec<CriterionHit>,
}

impl OrganHits {
    fn earliest(&self) -> Option<f64> {
        self.hits
            .iter()
            .map(|h| h.at.hours())
            .fold(None, |acc: Option<f64>, t| {
                Some(acc.map_or(t, |a| a.min(t)))
            })
    }
}

/// Organ-dysfunction criteria inside `[window_lo, window_hi]`.
///
/// Baselines are the first recorded value of each analyte anywhere in
/// the episode. Vasopressor and ventilation count only at initiation,
/// i.e. their first occurrence in the episode must fall in the window.
fn organ_dysfunction(
    episode: &Episode,
    config: &EsofaConfig,
    window_lo: f64,
    window_hi: f64,
) -> OrganHits {
    let in_window = |t: f64| t >= window_lo && t <= window_hi;
    let mut hits = Vec::new();
    let mut push = |name: &str, t: f64| hits.push(CriterionHit::new(name, Timestamp::new(t)));

    let initiation = |modality: Modality, code: &str| {
        episode
            .observations
            .iter()
            .find(|o| o.modality == modality && o.code() == Some(code))
            .map(|o| o.t.hours())
    };
    if let Some(t) = initiation(Modality::Medication, codes::VASOPRESSOR) {
        if in_window(t) {
            push("vasopressor", t);
        }
    }
    if let Some(t) = initiation(Modality::Procedure, codes::MECHANICAL_VENTILATION) {
        if in_window(t) {
            push("mechanical_ventilation", t);
        }
    }

    let eskd = episode
        .metadata
        .get(codes::ESKD_METADATA_KEY)
        .map(String::as_str)
        == Some("true");
    if !eskd {
        let creat = labs(episode, codes::CREATININE);
        if let Some(&(_, baseline)) = creat.first() {
            if baseline > 0.0 {
                if let Some(&(t, _)) = creat
                    .iter()
                    .find(|&&(t, v)| in_window(t) && v >= config.creatinine_doubling * baseline)
                {
                    push("creatinine_doubling", t);
                }
            }
        }
    }

    let bili = labs(episode, codes::BILIRUBIN);
    if let Some(&(_, baseline)) = bili.first() {
        if let Some(&(t, _)) = bili.iter().find(|&&(t, v)| {
            in_window(t) && v >= config.bilirubin_threshold && v >= BILIRUBIN_BASELINE_FACTOR * baseline
        }) {
            push("bilirubin_rise", t);
        }
    }

    let plate = labs(episode, codes::PLATELETS);
    if let Some(&(_, baseline)) = plate.first() {
        if baseline >= config.platelet_threshold {
            if let Some(&(t, _)) = plate.iter().find(|&&(t, v)| {
                in_window(t)
                    && v < config.platelet_threshold
                    && v <= baseline * (1.0 - config.platelet_decline_frac)
            }) {
                push("platelet_decline", t);
            }
        }
    }

    if let Some(&(t, _)) = labs(episode, codes::LACTATE)
        .iter()
        .find(|&&(t, v)| in_window(t) && v >= config.lactate_threshold)
    {
        push("lactate", t);
    }

    OrganHits { hits }
}

/// Sepsis event label for one episode.
///
/// A positive label requires a blood culture, a qualifying antibiotic
/// chain, and organ dysfunction to hold simultaneously around the same
/// culture: the chain must start within the culture window and span at
/// least the coverage requirement, and at least one organ criterion
/// must fire inside the window. The event time is when the last of the
/// three groups is first satisfied; with several qualifying cultures,
/// the earliest event time wins.
pub fn esofa_sepsis_label(episode: &Episode, config: &EsofaConfig) -> LabelOutcome {
    let window = config.culture_window_days * 24.0;
    let cultures: Vec<f64> = episode
        .observations
        .iter()
        .filter(|o| o.code() == Some(codes::BLOOD_CULTURE))
        .map(|o| o.t.hours())
        .collect();
    let doses: Vec<f64> = episode
        .observations
        .iter()
        .filter(|o| o.modality == Modality::Medication && o.code() == Some(codes::IV_ANTIBIOTIC))
        .map(|o| o.t.hours())
        .collect();
    let chains = dose_chains(&doses, config.max_dose_gap_hours);

    // A chain qualifies against a culture when it starts inside the
    // culture window and eventually covers the required span. The group
    // is "satisfied" at the first dose that completes the coverage.
    let qad_time = |t_bc: f64| -> Option<f64> {
        chains
            .iter()
            .filter(|chain| (chain[0] - t_bc).abs() <= window)
            .filter_map(|chain| {
                let start = chain[0];
                chain
                    .iter()
                    .find(|&&d| d - start >= config.antibiotic_coverage_hours)
                    .copied()
            })
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
    };

    let mut best: Option<(f64, f64, f64, OrganHits)> = None;
    for &t_bc in &cultures {
        let Some(qad) = qad_time(t_bc) else { continue };
        let organs = organ_dysfunction(episode, config, t_bc - window, t_bc + window);
        let Some(first_organ) = organs.earliest() else {
            continue;
        };
        let event = t_bc.max(qad).max(first_organ);
        if best.as_ref().map_or(true, |(e, ..)| event < *e) {
            best = Some((event, t_bc, qad, organs));
        }
    }

    match best {
        Some((event, t_bc, qad, organs)) => {
            let mut trace = vec![
                CriterionHit::new("blood_culture", Timestamp::new(t_bc)),
                CriterionHit::new("qad", Timestamp::new(qad)),
            ];
            trace.extend(organs.hits);
            LabelOutcome {
                episode_id: episode.id.clone(),
                event_time: Some(Timestamp::new(event)),
                positive: true,
                criteria_trace: trace,
            }
        }
        None => {
            // Partial trace against the first culture, for auditability.
            let mut trace = Vec::new();
            if let Some(&t_bc) = cultures.first() {
                trace.push(CriterionHit::new("blood_culture", Timestamp::new(t_bc)));
                if let Some(qad) = qad_time(t_bc) {
                    trace.push(CriterionHit::new("qad", Timestamp::new(qad)));
                }
                trace.extend(organ_dysfunction(episode, config, t_bc - window, t_bc + window).hits);
            }
            LabelOutcome {
                episode_id: episode.id.clone(),
                event_time: None,
                positive: false,
                criteria_trace: trace,
            }
        }
    }
}
