//! Task labelers: turning a raw event stream into an event onset time.
//!
//! Labelers never look at reference times. They decide, per episode,
//! whether the target event occurred and when, plus whether the episode
//! belongs in the task cohort at all. [`label_at`] then converts an
//! onset into a per-query binary label under the task horizon.

mod esofa;
mod presets;

pub use esofa::{
    esofa_sepsis_label, sepsis_cohort_filter, EsofaConfig, EsofaConfigError, InclusionOutcome,
};
pub use presets::{
    load_rule_file, preset, preset_names, rule_file_contents, Labeler, RuleFileError, TaskPreset,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Episode, Modality, Timestamp};

/// Canonical observation codes used by the built-in labelers and the
/// synthetic generator. Real datasets can map their own vocabularies
/// onto these, or supply rule files with their native codes.
pub mod codes {
    pub const HEART_RATE: &str = "HR";
    pub const SYSTOLIC_BP: &str = "SBP";
    pub const SPO2: &str = "SPO2";
    pub const RESPIRATORY_RATE: &str = "RR";
    pub const TEMPERATURE: &str = "TEMP";

    pub const WBC: &str = "WBC";
    pub const LACTATE: &str = "LACTATE";
    pub const CREATININE: &str = "CREATININE";
    pub const BILIRUBIN: &str = "BILIRUBIN";
    pub const PLATELETS: &str = "PLATELETS";

    pub const BLOOD_CULTURE: &str = "BLOOD_CULTURE";
    pub const IV_ANTIBIOTIC: &str = "ABX_IV";
    pub const VASOPRESSOR: &str = "VASOPRESSOR";
    pub const MECHANICAL_VENTILATION: &str = "MECH_VENT";
    pub const ICU_TRANSFER: &str = "ICU_TRANSFER";
    pub const DEATH: &str = "DEATH";

    /// Metadata key marking end-stage kidney disease; suppresses the
    /// creatinine criterion of the sepsis engine.
    pub const ESKD_METADATA_KEY: &str = "eskd";
}

/// Binary label for a query at `reference`: 1 iff the event falls inside
/// the horizon window `(reference, reference + horizon_h]`. The window is
/// left-open (an event exactly at the query time is not upcoming, it has
/// happened) and right-closed.
pub fn label_at(event_time: Option<Timestamp>, reference: Timestamp, horizon_h: f64) -> u8 {
    match event_time {
        Some(e) => {
            let e = e.hours();
            let t = reference.hours();
            u8::from(e > t && e <= t + horizon_h)
        }
        None => 0,
    }
}

/// Which side of a threshold counts as abnormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Above,
    Below,
}

impl Direction {
    /// Strict comparison: a value exactly at the threshold never fires.
    pub fn fires(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::Above => value > threshold,
            Direction::Below => value < threshold,
        }
    }
}

/// A lab-style threshold rule over a set of interchangeable codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub name: String,
    pub codes: Vec<String>,
    pub direction: Direction,
    pub threshold: f64,
}

impl ThresholdRule {
    fn matches_code(&self, code: &str) -> bool {
        self.codes.iter().any(|c| c == code)
    }
}

/// Earliest coded numeric observation whose code belongs to the rule's
/// code set and whose value strictly crosses the threshold.
pub fn detect_threshold_event(episode: &Episode, rule: &ThresholdRule) -> Option<Timestamp> {
    episode.observations.iter().find_map(|obs| {
        let code = obs.code()?;
        let value = obs.numeric()?;
        (rule.matches_code(code) && rule.direction.fires(value, rule.threshold)).then_some(obs.t)
    })
}

/// A vital-sign threshold used by the decompensation labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalRule {
    pub name: String,
    pub code: String,
    pub direction: Direction,
    pub threshold: f64,
}

/// Heart rate above 100 bpm, systolic blood pressure below 90 mmHg, or
/// oxygen saturation below 90%.
pub fn default_decompensation_rules() -> Vec<VitalRule> {
    vec![
        VitalRule {
            name: "tachycardia".into(),
            code: codes::HEART_RATE.into(),
            direction: Direction::Above,
            threshold: 100.0,
        },
        VitalRule {
            name: "hypotension".into(),
            code: codes::SYSTOLIC_BP.into(),
            direction: Direction::Below,
            threshold: 90.0,
        },
        VitalRule {
            name: "hypoxia".into(),
            code: codes::SPO2.into(),
            direction: Direction::Below,
            threshold: 90.0,
        },
    ]
}

/// Result of the decompensation labeler on one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompensationOutcome {
    /// False when any monitored vital is already abnormal at its first
    /// reading; such episodes leave the cohort.
    pub in_cohort: bool,
    pub onset: Option<Timestamp>,
    /// Name of the rule that fired at onset.
    pub criterion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("episode {episode_id} has no vital observations")]
    MissingVitals { episode_id: String },
}

/// Decompensation onset: earliest vital reading that breaches any rule.
///
/// The cohort is restricted to episodes whose monitored vitals are all
/// normal at their first reading; a vital that is never measured passes
/// vacuously. Errors if the episode has no vital observations at all.
pub fn detect_decompensation_onset(
    episode: &Episode,
    rules: &[VitalRule],
) -> Result<DecompensationOutcome, LabelError> {
    let vitals: Vec<(&str, f64, Timestamp)> = episode
        .observations
        .iter()
        .filter(|o| o.modality == Modality::Vital)
        .filter_map(|o| Some((o.code()?, o.numeric()?, o.t)))
        .collect();
    if episode
        .observations
        .iter()
        .all(|o| o.modality != Modality::Vital)
    {
        return Err(LabelError::MissingVitals {
            episode_id: episode.id.clone(),
        });
    }
    for rule in rules {
        if let Some(&(_, v, _)) = vitals.iter().find(|(c, _, _)| *c == rule.code) {
            if rule.direction.fires(v, rule.threshold) {
                return Ok(DecompensationOutcome {
                    in_cohort: false,
                    onset: None,
                    criterion: None,
                });
            }
        }
    }
    let mut onset: Option<(Timestamp, &VitalRule)> = None;
    for (code, value, t) in &vitals {
        if let Some(rule) = rules
            .iter()
            .find(|r| r.code == *code && r.direction.fires(*value, r.threshold))
        {
            onset = Some((*t, rule));
            break;
        }
    }
    Ok(DecompensationOutcome {
        in_cohort: true,
        onset: onset.map(|(t, _)| t),
        criterion: onset.map(|(_, r)| r.name.clone()),
    })
}

/// Earliest marker observation carrying `event_code`.
pub fn detect_marker_event(episode: &Episode, event_code: &str) -> Option<Timestamp> {
    episode.observations.iter().find_map(|obs| {
        matches!(&obs.value, crate::event::ObservationValue::Marker { code } if code == event_code)
            .then_some(obs.t)
    })
}

/// One satisfied labeling criterion and when it was met.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionHit {
    pub criterion: String,
    pub at: Timestamp,
}

impl CriterionHit {
    pub fn new(criterion: &str, at: Timestamp) -> Self {
        CriterionHit {
            criterion: criterion.to_string(),
            at,
        }
    }
}

/// Episode-level labeling result: did the event occur, when, and which
/// criteria drove the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOutcome {
    pub episode_id: String,
    pub event_time: Option<Timestamp>,
    pub positive: bool,
    pub criteria_trace: Vec<CriterionHit>,
}

/// A labeling decision together with cohort membership.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortLabel {
    pub in_cohort: bool,
    pub outcome: LabelOutcome,
}

/// Runs the given labeler on one episode.
pub fn apply_labeler(episode: &Episode, labeler: &Labeler) -> Result<CohortLabel, LabelError> {
    let decision = match labeler {
        Labeler::Threshold { rule } => {
            let onset = detect_threshold_event(episode, rule);
            CohortLabel {
                in_cohort: true,
                outcome: LabelOutcome {
                    episode_id: episode.id.clone(),
                    event_time: onset,
                    positive: onset.is_some(),
                    criteria_trace: onset.map(|t| CriterionHit::new(&rule.name, t)).into_iter().collect(),
                },
            }
        }
        Labeler::Decompensation { rules } => {
            let d = detect_decompensation_onset(episode, rules)?;
            CohortLabel {
                in_cohort: d.in_cohort,
                outcome: LabelOutcome {
                    episode_id: episode.id.clone(),
                    event_time: d.onset,
                    positive: d.onset.is_some(),
                    criteria_trace: match (d.onset, &d.criterion) {
                        (Some(t), Some(name)) => vec![CriterionHit::new(name, t)],
                        _ => vec![],
                    },
                },
            }
        }
        Labeler::Sepsis { config } => {
            let inclusion = sepsis_cohort_filter(episode);
            if !inclusion.included {
                CohortLabel {
                    in_cohort: false,
                    outcome: LabelOutcome {
                        episode_id: episode.id.clone(),
                        event_time: None,
                        positive: false,
                        criteria_trace: inclusion.trace,
                    },
                }
            } else {
                let mut outcome = esofa_sepsis_label(episode, config);
                let mut trace = inclusion.trace;
                trace.append(&mut outcome.criteria_trace);
                outcome.criteria_trace = trace;
                CohortLabel {
                    in_cohort: true,
                    outcome,
                }
            }
        }
        Labeler::Marker { code } => {
            let onset = detect_marker_event(episode, code);
            CohortLabel {
                in_cohort: true,
                outcome: LabelOutcome {
                    episode_id: episode.id.clone(),
                    event_time: onset,
                    positive: onset.is_some(),
                    criteria_trace: onset
                        .map(|t| CriterionHit::new("event_marker", t))
                        .into_iter()
                        .collect(),
                },
            }
        }
    };
    Ok(decision)
}
