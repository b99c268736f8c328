//! Event-stream data model: timestamps, observations, episodes, and task
//! configuration.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hours since the start of an episode.
///
/// Wraps an `f64` and orders via `total_cmp`, so timestamps can be sorted
/// and deduplicated even before validation has rejected NaNs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(f64);

impl Timestamp {
    pub fn new(hours: f64) -> Self {
        Timestamp(hours)
    }

    pub fn hours(self) -> f64 {
        self.0
    }

    /// Finite and non-negative.
    pub fn is_valid(self) -> bool {
        self.0.is_finite() && self.0 >= 0.0
    }
}

impl PartialEq for Timestamp {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}

impl Eq for Timestamp {}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}h", self.0)
    }
}

impl From<f64> for Timestamp {
    fn from(hours: f64) -> Self {
        Timestamp(hours)
    }
}

/// Source channel of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vital,
    Lab,
    Medication,
    Procedure,
    WaveformSummary,
    Text,
    Admin,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vital => "vital",
            Modality::Lab => "lab",
            Modality::Medication => "medication",
            Modality::Procedure => "procedure",
            Modality::WaveformSummary => "waveform_summary",
            Modality::Text => "text",
            Modality::Admin => "admin",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Some(match s {
            "vital" => Modality::Vital,
            "lab" => Modality::Lab,
            "medication" => Modality::Medication,
            "procedure" => Modality::Procedure,
            "waveform_summary" => Modality::WaveformSummary,
            "text" => Modality::Text,
            "admin" => Modality::Admin,
            _ => return None,
        })
    }

    /// Which value variants an observation of this modality may carry.
    pub fn permits(self, value: &ObservationValue) -> bool {
        use ObservationValue::*;
        match self {
            Modality::Vital | Modality::WaveformSummary => {
                matches!(value, Numeric(_) | CodedNumeric { .. })
            }
            Modality::Lab => matches!(value, CodedNumeric { .. }),
            Modality::Medication | Modality::Procedure => {
                matches!(value, Marker { .. } | CodedNumeric { .. })
            }
            Modality::Text => matches!(value, Text(_)),
            Modality::Admin => matches!(value, Marker { .. } | Text(_)),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Payload of a single observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservationValue {
    /// Plain number with no code (e.g. an uncoded bedside reading).
    Numeric(f64),
    /// Number attached to a code (labs, coded vitals).
    CodedNumeric { code: String, value: f64 },
    /// Free text (notes).
    Text(String),
    /// Code-only occurrence marker (orders, procedures, admin events).
    Marker { code: String },
}

impl ObservationValue {
    pub fn numeric(&self) -> Option<f64> {
        match self {
            ObservationValue::Numeric(v) => Some(*v),
            ObservationValue::CodedNumeric { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ObservationValue::CodedNumeric { code, .. } => Some(code),
            ObservationValue::Marker { code } => Some(code),
            _ => None,
        }
    }
}

/// One timestamped measurement, order, or note within an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub modality: Modality,
    pub value: ObservationValue,
    pub t: Timestamp,
}

impl Observation {
    pub fn new(modality: Modality, value: ObservationValue, t: impl Into<Timestamp>) -> Self {
        Observation {
            modality,
            value,
            t: t.into(),
        }
    }

    pub fn vital(code: &str, value: f64, t: f64) -> Self {
        Observation::new(
            Modality::Vital,
            ObservationValue::CodedNumeric {
                code: code.to_string(),
                value,
            },
            t,
        )
    }

    pub fn lab(code: &str, value: f64, t: f64) -> Self {
        Observation::new(
            Modality::Lab,
            ObservationValue::CodedNumeric {
                code: code.to_string(),
                value,
            },
            t,
        )
    }

    pub fn marker(modality: Modality, code: &str, t: f64) -> Self {
        Observation::new(
            modality,
            ObservationValue::Marker {
                code: code.to_string(),
            },
            t,
        )
    }

    pub fn code(&self) -> Option<&str> {
        self.value.code()
    }

    pub fn numeric(&self) -> Option<f64> {
        self.value.numeric()
    }
}

/// A single patient stay: an identifier, a time-ordered observation
/// stream, an optional event onset, and free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Episode {
    pub id: String,
    pub observations: Vec<Observation>,
    /// Onset time of the target event, if one occurred.
    pub event_time: Option<Timestamp>,
    pub metadata: BTreeMap<String, String>,
}

impl Episode {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Self {
        Episode {
            id: id.into(),
            observations,
            event_time: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn first_time(&self) -> Option<Timestamp> {
        self.observations.first().map(|o| o.t)
    }

    pub fn last_time(&self) -> Option<Timestamp> {
        self.observations.last().map(|o| o.t)
    }
}

/// Why an episode failed validation. The index refers to the offending
/// observation's position in the input order.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidateError {
    #[error("episode id is empty")]
    EmptyId,
    #[error("observation {index}: negative timestamp {hours}")]
    NegativeTimestamp { index: usize, hours: f64 },
    #[error("observation {index}: non-finite timestamp or value")]
    NonFiniteValue { index: usize },
    #[error("observation {index}: empty code")]
    EmptyCode { index: usize },
    #[error("observation {index}: {modality} observation cannot carry a {variant} value")]
    ValueNotPermitted {
        index: usize,
        modality: Modality,
        variant: &'static str,
    },
    #[error("event time is negative or non-finite")]
    InvalidEventTime,
}

fn variant_name(value: &ObservationValue) -> &'static str {
    match value {
        ObservationValue::Numeric(_) => "numeric",
        ObservationValue::CodedNumeric { .. } => "coded_numeric",
        ObservationValue::Text(_) => "text",
        ObservationValue::Marker { .. } => "marker",
    }
}

/// Checks a single observation in isolation. Shared between episode
/// validation and the event-file parser, which needs per-line errors.
pub fn check_observation(obs: &Observation, index: usize) -> Result<(), ValidateError> {
    let t = obs.t.hours();
    if !t.is_finite() {
        return Err(ValidateError::NonFiniteValue { index });
    }
    if t < 0.0 {
        return Err(ValidateError::NegativeTimestamp { index, hours: t });
    }
    match &obs.value {
        ObservationValue::Numeric(v) => {
            if !v.is_finite() {
                return Err(ValidateError::NonFiniteValue { index });
            }
        }
        ObservationValue::CodedNumeric { code, value } => {
            if code.is_empty() {
                return Err(ValidateError::EmptyCode { index });
            }
            if !value.is_finite() {
                return Err(ValidateError::NonFiniteValue { index });
            }
        }
        ObservationValue::Marker { code } => {
            if code.is_empty() {
                return Err(ValidateError::EmptyCode { index });
            }
        }
        ObservationValue::Text(_) => {}
    }
    if !obs.modality.permits(&obs.value) {
        return Err(ValidateError::ValueNotPermitted {
            index,
            modality: obs.modality,
            variant: variant_name(&obs.value),
        });
    }
    Ok(())
}

/// Validates and canonicalizes an episode.
///
/// On success the returned episode has its observations stably sorted by
/// timestamp (ties keep input order), and an episode with no observations
/// is accepted but tagged with metadata `empty = "true"`. Idempotent:
/// validating a validated episode returns it unchanged.
pub fn validate_episode(mut episode: Episode) -> Result<Episode, ValidateError> {
    if episode.id.is_empty() {
        return Err(ValidateError::EmptyId);
    }
    for (index, obs) in episode.observations.iter().enumerate() {
        check_observation(obs, index)?;
    }
    if let Some(e) = episode.event_time {
        if !e.is_valid() {
            return Err(ValidateError::InvalidEventTime);
        }
    }
    episode.observations.sort_by(|a, b| a.t.cmp(&b.t));
    if episode.observations.is_empty() {
        episode.metadata.insert("empty".to_string(), "true".to_string());
    }
    Ok(episode)
}

/// Observations with `t <= reference`, i.e. everything a model may see
/// when queried at `reference`. The boundary is closed: an observation
/// exactly at the query time is visible. Requires a validated (sorted)
/// episode.
pub fn prefix(episode: &Episode, reference: Timestamp) -> &[Observation] {
    let k = episode
        .observations
        .partition_point(|o| o.t.hours() <= reference.hours());
    &episode.observations[..k]
}

/// When a model is queried along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePolicy {
    /// Query at every observation time inside the probe window.
    EveryObservation,
    /// Query on a fixed grid of the given spacing across the window.
    FixedGrid { step_hours: f64 },
}

impl Default for ProbePolicy {
    fn default() -> Self {
        ProbePolicy::EveryObservation
    }
}

pub const DEFAULT_PAIRING_WINDOW_HOURS: f64 = 1.0 / 6.0;
pub const DEFAULT_ALERT_THRESHOLD: f64 = 0.5;

fn default_pairing_window() -> f64 {
    DEFAULT_PAIRING_WINDOW_HOURS
}

fn default_alert_threshold() -> f64 {
    DEFAULT_ALERT_THRESHOLD
}

/// Evaluation settings for one prediction task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Prediction horizon in hours: the label at reference time `T` is
    /// positive iff the event falls in `(T, T + horizon_h]`.
    pub horizon_h: f64,
    /// Probe-window radii in hours; stability metrics are reported once
    /// per radius.
    pub probe_radius_b: Vec<f64>,
    /// Maximum probe spacing (hours) admitted into Lipschitz pairs.
    #[serde(default = "default_pairing_window")]
    pub pairing_window_c: f64,
    /// Alert threshold on the risk score.
    #[serde(default = "default_alert_threshold")]
    pub alert_threshold_tau: f64,
    #[serde(default)]
    pub probe_policy: ProbePolicy,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskConfigError {
    #[error("horizon_h must be positive and finite, got {0}")]
    NonPositiveHorizon(f64),
    #[error("probe_radius_b must not be empty")]
    NoProbeRadius,
    #[error("probe radius must be positive and finite, got {0}")]
    NonPositiveProbeRadius(f64),
    #[error("pairing_window_c must be positive and finite, got {0}")]
    NonPositivePairingWindow(f64),
    #[error("pairing_window_c = {c} exceeds twice the smallest probe radius {b}")]
    PairingWindowTooWide { c: f64, b: f64 },
    #[error("alert_threshold_tau must lie strictly inside (0, 1), got {0}")]
    ThresholdOutOfRange(f64),
    #[error("fixed-grid step must be positive and finite, got {0}")]
    NonPositiveGridStep(f64),
}

impl TaskConfig {
    pub fn new(horizon_h: f64, probe_radius_b: Vec<f64>) -> Self {
        TaskConfig {
            horizon_h,
            probe_radius_b,
            pairing_window_c: DEFAULT_PAIRING_WINDOW_HOURS,
            alert_threshold_tau: DEFAULT_ALERT_THRESHOLD,
            probe_policy: ProbePolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TaskConfigError> {
        if !self.horizon_h.is_finite() || self.horizon_h <= 0.0 {
            return Err(TaskConfigError::NonPositiveHorizon(self.horizon_h));
        }
        if self.probe_radius_b.is_empty() {
            return Err(TaskConfigError::NoProbeRadius);
        }
        for &b in &self.probe_radius_b {
            if !b.is_finite() || b <= 0.0 {
                return Err(TaskConfigError::NonPositiveProbeRadius(b));
            }
        }
        let c = self.pairing_window_c;
        if !c.is_finite() || c <= 0.0 {
            return Err(TaskConfigError::NonPositivePairingWindow(c));
        }
        let b_min = self
            .probe_radius_b
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        // A pair can span at most the window diameter, so a wider c is
        // unsatisfiable and almost certainly a configuration mistake.
        if c > 2.0 * b_min {
            return Err(TaskConfigError::PairingWindowTooWide { c, b: b_min });
        }
        let tau = self.alert_threshold_tau;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(TaskConfigError::ThresholdOutOfRange(tau));
        }
        if let ProbePolicy::FixedGrid { step_hours } = self.probe_policy {
            if !step_hours.is_finite() || step_hours <= 0.0 {
                return Err(TaskConfigError::NonPositiveGridStep(step_hours));
            }
        }
        Ok(())
    }

    pub fn max_radius(&self) -> f64 {
        self.probe_radius_b
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs_at(t: f64) -> Observation {
        Observation::new(Modality::Vital, ObservationValue::Numeric(1.0), t)
    }

    #[test]
    fn validate_sorts_stably() {
        let ep = Episode::new(
            "e1",
            vec![
                Observation::vital("HR", 80.0, 2.0),
                Observation::vital("HR", 81.0, 1.0),
                Observation::vital("SBP", 120.0, 1.0),
            ],
        );
        let ep = validate_episode(ep).unwrap();
        let times: Vec<f64> = ep.observations.iter().map(|o| o.t.hours()).collect();
        assert_eq!(times, vec![1.0, 1.0, 2.0]);
        // Ties keep input order: HR@1.0 preceded SBP@1.0 in the input.
        assert_eq!(ep.observations[0].code(), Some("HR"));
        assert_eq!(ep.observations[1].code(), Some("SBP"));
    }

    #[test]
    fn validate_rejects_negative_timestamp() {
        let ep = Episode::new("e1", vec![obs_at(1.0), obs_at(-0.5)]);
        assert_eq!(
            validate_episode(ep),
            Err(ValidateError::NegativeTimestamp {
                index: 1,
                hours: -0.5
            })
        );
    }

    #[test]
    fn validate_rejects_non_finite() {
        let ep = Episode::new("e1", vec![obs_at(f64::NAN)]);
        assert_eq!(
            validate_episode(ep),
            Err(ValidateError::NonFiniteValue { index: 0 })
        );
        let ep = Episode::new(
            "e1",
            vec![Observation::new(
                Modality::Vital,
                ObservationValue::Numeric(f64::INFINITY),
                1.0,
            )],
        );
        assert_eq!(
            validate_episode(ep),
            Err(ValidateError::NonFiniteValue { index: 0 })
        );
    }

    #[test]
    fn validate_rejects_empty_id_and_code() {
        assert_eq!(
            validate_episode(Episode::new("", vec![])),
            Err(ValidateError::EmptyId)
        );
        let ep = Episode::new("e1", vec![Observation::lab("", 1.0, 0.0)]);
        assert_eq!(
            validate_episode(ep),
            Err(ValidateError::EmptyCode { index: 0 })
        );
    }

    #[test]
    fn validate_rejects_wrong_variant_for_modality() {
        // A lab must carry a coded numeric, not free text.
        let ep = Episode::new(
            "e1",
            vec![Observation::new(
                Modality::Lab,
                ObservationValue::Text("hemolyzed".into()),
                1.0,
            )],
        );
        assert!(matches!(
            validate_episode(ep),
            Err(ValidateError::ValueNotPermitted { index: 0, .. })
        ));
    }

    #[test]
    fn empty_episode_is_valid_but_flagged() {
        let ep = validate_episode(Episode::new("e1", vec![])).unwrap();
        assert_eq!(ep.metadata.get("empty").map(String::as_str), Some("true"));
    }

    #[test]
    fn validate_is_idempotent() {
        let ep = Episode::new("e1", vec![obs_at(2.0), obs_at(1.0)]);
        let once = validate_episode(ep).unwrap();
        let twice = validate_episode(once.clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn prefix_boundary_is_closed() {
        let ep = validate_episode(Episode::new(
            "e1",
            vec![obs_at(1.0), obs_at(2.0), obs_at(3.0)],
        ))
        .unwrap();
        assert_eq!(prefix(&ep, Timestamp::new(2.0)).len(), 2);
        assert_eq!(prefix(&ep, Timestamp::new(1.9999)).len(), 1);
        assert_eq!(prefix(&ep, Timestamp::new(0.5)).len(), 0);
        assert_eq!(prefix(&ep, Timestamp::new(99.0)).len(), 3);
    }

    #[test]
    fn prefix_hundred_evenly_spaced() {
        // Observations at 0.1, 0.2, ..., 10.0; query at 4.95 sees the
        // first 49 (0.1 through 4.9).
        let obs: Vec<Observation> = (1..=100).map(|i| obs_at(i as f64 * 0.1)).collect();
        let ep = validate_episode(Episode::new("e1", obs)).unwrap();
        assert_eq!(prefix(&ep, Timestamp::new(4.95)).len(), 49);
        assert_eq!(prefix(&ep, Timestamp::new(5.0)).len(), 50);
    }

    #[test]
    fn task_config_validation() {
        let good = TaskConfig::new(1.5, vec![0.5, 4.0]);
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.horizon_h = 0.0;
        assert!(matches!(
            bad.validate(),
            Err(TaskConfigError::NonPositiveHorizon(_))
        ));

        let mut bad = good.clone();
        bad.probe_radius_b.clear();
        assert_eq!(bad.validate(), Err(TaskConfigError::NoProbeRadius));

        // c wider than the window diameter can never produce a pair.
        let mut bad = good.clone();
        bad.pairing_window_c = 1.5;
        assert!(matches!(
            bad.validate(),
            Err(TaskConfigError::PairingWindowTooWide { .. })
        ));

        let mut bad = good.clone();
        bad.alert_threshold_tau = 1.0;
        assert!(matches!(
            bad.validate(),
            Err(TaskConfigError::ThresholdOutOfRange(_))
        ));
    }

    proptest! {
        #[test]
        fn prefix_is_monotone_in_reference(times in proptest::collection::vec(0.0f64..100.0, 0..40),
                                           a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let obs: Vec<Observation> = times.iter().map(|&t| obs_at(t)).collect();
            let ep = validate_episode(Episode::new("e", obs)).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = prefix(&ep, Timestamp::new(lo)).len();
            let p_hi = prefix(&ep, Timestamp::new(hi)).len();
            prop_assert!(p_lo <= p_hi);
            // The earlier prefix is literally a prefix of the later one.
            prop_assert_eq!(&prefix(&ep, Timestamp::new(hi))[..p_lo],
                            prefix(&ep, Timestamp::new(lo)));
        }

        #[test]
        fn prefix_at_last_time_is_everything(times in proptest::collection::vec(0.0f64..100.0, 1..40)) {
            let obs: Vec<Observation> = times.iter().map(|&t| obs_at(t)).collect();
            let ep = validate_episode(Episode::new("e", obs)).unwrap();
            let last = ep.last_time().unwrap();
            prop_assert_eq!(prefix(&ep, last).len(), ep.observations.len());
        }

        #[test]
        fn validated_episodes_are_sorted(times in proptest::collection::vec(0.0f64..100.0, 0..40)) {
            let obs: Vec<Observation> = times.iter().map(|&t| obs_at(t)).collect();
            let ep = validate_episode(Episode::new("e", obs)).unwrap();
            prop_assert!(ep.observations.windows(2).all(|w| w[0].t <= w[1].t));
        }
    }
}
