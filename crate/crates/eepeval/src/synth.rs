//! Synthetic cohorts with known ground truth, plus simple built-in
//! scorers, for calibrating the evaluation harness itself.
//!
//! Generated episodes carry ambient vitals and labs that never trip any
//! built-in labeler, an early abnormal-temperature pattern that puts
//! every episode into the sepsis cohort, and, for positives, planted
//! abnormalities at the event time that make all built-in tasks agree
//! on the onset. A latent "biomarker" stream drifts upward ahead of the
//! event by `hazard_lift`, so signal strength is tunable; at zero lift
//! positive and negative biomarkers are identically distributed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{validate_episode, Episode, Modality, Observation, Timestamp};
use crate::label::codes;
use crate::metrics::{MetricError, ProbePoint, RiskTrajectory};

/// Settings for cohort synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_episodes: usize,
    /// Fraction of episodes given an event; the realized count is the
    /// rounded product, assigned exactly.
    pub prevalence: f64,
    /// Mean episode duration; actual durations vary by +-25%.
    pub mean_duration_hours: f64,
    /// Mean observation arrivals per hour across all streams.
    pub observation_rate_per_hour: f64,
    /// Peak biomarker elevation reached at the event. Zero makes the
    /// biomarker pure noise.
    pub hazard_lift: f64,
    /// Hours before the event over which the biomarker ramps up.
    pub drift_window_hours: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_episodes: 100,
            prevalence: 0.2,
            mean_duration_hours: 144.0,
            observation_rate_per_hour: 1.0,
            hazard_lift: 1.0,
            drift_window_hours: 24.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthesis settings: {0}")]
    InvalidConfig(String),
    #[error("episode {episode_id}: probe at {t} h lies outside the observed span")]
    ProbeOutOfRange { episode_id: String, t: f64 },
    #[error("episode {episode_id} has no observations to score")]
    NoObservations { episode_id: String },
    #[error(transparent)]
    Trajectory(#[from] MetricError),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        if self.n_episodes == 0 {
            return bad("n_episodes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return bad("prevalence must lie in [0, 1]");
        }
        if !self.mean_duration_hours.is_finite() || self.mean_duration_hours <= 0.0 {
            return bad("mean_duration_hours must be positive");
        }
        if !self.observation_rate_per_hour.is_finite() || self.observation_rate_per_hour <= 0.0 {
            return bad("observation_rate_per_hour must be positive");
        }
        if !self.hazard_lift.is_finite() || self.hazard_lift < 0.0 {
            return bad("hazard_lift must be non-negative");
        }
        if !self.drift_window_hours.is_finite() || self.drift_window_hours <= 0.0 {
            return bad("drift_window_hours must be positive");
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a run seed.
///
/// Pipeline stages draw from distinct streams (1 sampling, 2 folds,
/// 3 scoring) so one stage never perturbs another; the synthesizer
/// uses per-episode streams so episode `i` is unaffected by how many
/// episodes surround it.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(1)))
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Stream {
    weight: f64,
    modality: Modality,
    code: &'static str,
    mean: f64,
    sd: f64,
    clip: (f64, f64),
}

/// Ambient streams. Clip ranges keep every draw clear of all built-in
/// rules (potassium below 7, glucose above 3, vitals normal, temperature
/// inside (36, 38.5)).
const STREAMS: [Stream; 8] = [
    Stream { weight: 0.14, modality: Modality::Vital, code: codes::HEART_RATE, mean: 75.0, sd: 6.0, clip: (58.0, 98.0) },
    Stream { weight: 0.12, modality: Modality::Vital, code: codes::SYSTOLIC_BP, mean: 120.0, sd: 8.0, clip: (95.0, 150.0) },
    Stream { weight: 0.12, modality: Modality::Vital, code: codes::SPO2, mean: 97.0, sd: 1.2, clip: (92.0, 100.0) },
    Stream { weight: 0.11, modality: Modality::Vital, code: codes::RESPIRATORY_RATE, mean: 14.0, sd: 2.0, clip: (9.0, 19.0) },
    Stream { weight: 0.11, modality: Modality::Vital, code: codes::TEMPERATURE, mean: 37.0, sd: 0.3, clip: (36.2, 38.3) },
    Stream { weight: 0.25, modality: Modality::Lab, code: BIOMARKER_CODE, mean: 1.0, sd: 0.15, clip: (0.0, 3.0) },
    Stream { weight: 0.075, modality: Modality::Lab, code: POTASSIUM_CODE, mean: 4.3, sd: 0.4, clip: (3.4, 5.8) },
    Stream { weight: 0.075, modality: Modality::Lab, code: GLUCOSE_CODE, mean: 5.5, sd: 0.7, clip: (3.6, 8.5) },
];

/// Latent severity lab driving the built-in model scorers.
pub const BIOMARKER_CODE: &str = "BIOMARKER";
/// Potassium code shared with the hyperkalemia preset.
pub const POTASSIUM_CODE: &str = "LOINC/2823-3";
/// Glucose code shared with the hypoglycemia preset.
pub const GLUCOSE_CODE: &str = "LOINC/14749-6";

/// Events are planted in this fraction of the episode's duration.
const EVENT_FRAC: (f64, f64) = (0.55, 0.85);
/// The sepsis pattern needs the antibiotic chain to start after the
/// inclusion criteria, so it is only planted for late enough events.
const MIN_SEPSIS_EVENT_HOURS: f64 = 76.0;

/// Generates a cohort deterministically from the config seed.
///
/// Exactly `round(n_episodes * prevalence)` episodes become positive
/// (chosen by a seeded shuffle) and carry `event_time`. Every episode
/// passes validation; observations are sorted.
pub fn generate_cohort(config: &SynthConfig) -> Result<Vec<Episode>, SynthError> {
    config.validate()?;
    let n = config.n_episodes;
    let n_pos = ((n as f64) * config.prevalence).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut assign_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX));
    rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), &mut assign_rng);
    let mut positive = vec![false; n];
    for &i in indices.iter().take(n_pos) {
        positive[i] = true;
    }

    let mut cohort = Vec::with_capacity(n);
    for (i, &is_pos) in positive.iter().enumerate() {
        cohort.push(generate_episode(config, i, is_pos)?);
    }
    Ok(cohort)
}

fn generate_episode(config: &SynthConfig, index: usize, positive: bool) -> Result<Episode, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, index as u64));
    let duration = config.mean_duration_hours * (0.75 + 0.5 * rng.gen::<f64>());
    let event = positive.then(|| {
        let (lo, hi) = EVENT_FRAC;
        duration * (lo + (hi - lo) * rng.gen::<f64>())
    });

    let mut obs: Vec<Observation> = Vec::new();

    // Ambient streams: Poisson arrivals dealt to weighted channels.
    let gap = Exp::new(config.observation_rate_per_hour)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let total_weight: f64 = STREAMS.iter().map(|s| s.weight).sum();
    let mut t = gap.sample(&mut rng);
    while t < duration {
        let mut pick = rng.gen::<f64>() * total_weight;
        let mut stream = &STREAMS[0];
        for s in &STREAMS {
            if pick < s.weight {
                stream = s;
                break;
            }
            pick -= s.weight;
        }
        let normal = Normal::new(stream.mean, stream.sd).expect("stream sd is positive");
        let mut value = normal.sample(&mut rng).clamp(stream.clip.0, stream.clip.1);
        if stream.code == BIOMARKER_CODE {
            if let Some(e) = event {
                let ramp = ((t - (e - config.drift_window_hours)) / config.drift_window_hours)
                    .clamp(0.0, 1.0);
                value += config.hazard_lift * ramp;
            }
        }
        obs.push(Observation::new(
            stream.modality,
            crate::event::ObservationValue::CodedNumeric {
                code: stream.code.to_string(),
                value,
            },
            t,
        ));
        t += gap.sample(&mut rng);
    }

    // Early febrile pattern: every episode meets the sepsis inclusion
    // criteria (abnormal temperature with tachycardia support nearby).
    let t_temp = 0.5 + rng.gen::<f64>();
    let t_support = t_temp + 0.25 + 0.75 * rng.gen::<f64>();
    obs.push(Observation::vital(codes::TEMPERATURE, 39.2, t_temp));
    obs.push(Observation::vital(codes::HEART_RATE, 95.0, t_support));

    if let Some(e) = event {
        // Planted abnormalities make every built-in labeler date the
        // event at e. Ambient draws never cross these rules.
        obs.push(Observation::lab(POTASSIUM_CODE, 7.5, e));
        obs.push(Observation::lab(GLUCOSE_CODE, 2.4, e));
        obs.push(Observation::vital(codes::HEART_RATE, 115.0, e));
        obs.push(Observation::marker(Modality::Admin, codes::ICU_TRANSFER, e));
        obs.push(Observation::marker(Modality::Admin, codes::DEATH, e));
        if e >= MIN_SEPSIS_EVENT_HOURS {
            // Chain from e-72 reaches 72-hour coverage exactly at e;
            // culture and lactate sit earlier, so the engine dates the
            // sepsis event at e as well.
            obs.push(Observation::marker(Modality::Procedure, codes::BLOOD_CULTURE, e - 30.0));
            obs.push(Observation::lab(codes::LACTATE, 2.6, e - 20.0));
            let mut dose = e - 72.0;
            while dose <= e + 1e-9 {
                obs.push(Observation::marker(Modality::Medication, codes::IV_ANTIBIOTIC, dose));
                dose += 12.0;
            }
        }
    }

    let mut episode = Episode::new(format!("synth-{index:05}"), obs);
    episode.event_time = event.map(Timestamp::new);
    Ok(validate_episode(episode).expect("synthetic episodes are well-formed"))
}

/// A built-in scoring strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    /// Scores 1 when the event falls inside the horizon after the
    /// probe, else a small constant. Reads the ground-truth event time.
    Oracle,
    /// Smooth score from the recent biomarker level.
    WindowedMean,
    /// Windowed mean plus seeded Gaussian score noise.
    Noisy { sigma: f64 },
    /// The same score everywhere.
    Constant { value: f64 },
}

impl fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerSpec::Oracle => write!(f, "oracle"),
            ScorerSpec::WindowedMean => write!(f, "windowed_mean"),
            ScorerSpec::Noisy { sigma } => write!(f, "noisy:{sigma}"),
            ScorerSpec::Constant { value } => write!(f, "constant:{value}"),
        }
    }
}

impl FromStr for ScorerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_param = |v: &str, what: &str| -> Result<f64, String> {
            let x: f64 = v
                .parse()
                .map_err(|_| format!("{what} must be a number, got {v:?}"))?;
            if !x.is_finite() {
                return Err(format!("{what} must be finite"));
            }
            Ok(x)
        };
        match s.split_once(':') {
            None => match s {
                "oracle" => Ok(ScorerSpec::Oracle),
                "windowed_mean" => Ok(ScorerSpec::WindowedMean),
                _ => Err(format!(
                    "unknown scorer {s:?}; expected oracle, windowed_mean, noisy:SIGMA, or constant:VALUE"
                )),
            },
            Some(("noisy", v)) => Ok(ScorerSpec::Noisy {
                sigma: parse_param(v, "sigma")?,
            }),
            Some(("constant", v)) => {
                let value = parse_param(v, "value")?;
                if !(0.0..=1.0).contains(&value) {
                    return Err("constant value must lie in [0, 1]".to_string());
                }
                Ok(ScorerSpec::Constant { value })
            }
            Some((other, _)) => Err(format!("unknown scorer {other:?}")),
        }
    }
}

/// Trailing window over the biomarker feeding the windowed-mean score.
const TRAILING_WINDOW_HOURS: f64 = 8.0;
const SCORE_BASE: f64 = 0.25;
const SCORE_GAIN: f64 = 0.5;
const BIOMARKER_CENTER: f64 = 1.0;
const ORACLE_QUIET_SCORE: f64 = 0.01;

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn windowed_mean_score(episode: &Episode, t: f64) -> f64 {
    let biomarker: Vec<(f64, f64)> = episode
        .observations
        .iter()
        .filter(|o| o.code() == Some(BIOMARKER_CODE))
        .filter_map(|o| Some((o.t.hours(), o.numeric()?)))
        .collect();
    let recent: Vec<f64> = biomarker
        .iter()
        .filter(|&&(bt, _)| bt <= t && bt >= t - TRAILING_WINDOW_HOURS)
        .map(|&(_, v)| v)
        .collect();
    let level = if recent.is_empty() {
        // No reading inside the window: carry the latest one forward.
        biomarker
            .iter()
            .rev()
            .find(|&&(bt, _)| bt <= t)
            .map(|&(_, v)| v)
            .unwrap_or(BIOMARKER_CENTER)
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    clamp01(SCORE_BASE + SCORE_GAIN * (level - BIOMARKER_CENTER))
}

/// Scores an episode at the given probe times with a built-in scorer.
///
/// Probes must be strictly increasing and lie inside the episode's
/// observed span. The noisy scorer derives its noise stream from `seed`
/// and the episode id, so scoring is reproducible and independent of
/// which other episodes are scored. `horizon_h` is only read by the
/// oracle.
pub fn score_trajectory(
    episode: &Episode,
    reference: Timestamp,
    probes: &[Timestamp],
    scorer: &ScorerSpec,
    horizon_h: f64,
    seed: u64,
) -> Result<RiskTrajectory, SynthError> {
    let (Some(first), Some(last)) = (episode.first_time(), episode.last_time()) else {
        return Err(SynthError::NoObservations {
            episode_id: episode.id.clone(),
        });
    };
    for p in probes {
        let t = p.hours();
        if t < first.hours() || t > last.hours() {
            return Err(SynthError::ProbeOutOfRange {
                episode_id: episode.id.clone(),
                t,
            });
        }
    }
    let scores: Vec<f64> = match scorer {
        ScorerSpec::Oracle => probes
            .iter()
            .map(|p| {
                let t = p.hours();
                match episode.event_time {
                    Some(e) if e.hours() > t && e.hours() <= t + horizon_h => 1.0,
                    _ => ORACLE_QUIET_SCORE,
                }
            })
            .collect(),
        ScorerSpec::WindowedMean => probes
            .iter()
            .map(|p| windowed_mean_score(episode, p.hours()))
            .collect(),
        ScorerSpec::Noisy { sigma } => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(&episode.id)));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            probes
                .iter()
                .map(|p| {
                    let z: f64 = normal.sample(&mut rng);
                    clamp01(windowed_mean_score(episode, p.hours()) + sigma * z)
                })
                .collect()
        }
        ScorerSpec::Constant { value } => vec![*value; probes.len()],
    };
    let points = probes
        .iter()
        .zip(scores)
        .map(|(&t, score)| ProbePoint { t, score })
        .collect();
    Ok(RiskTrajectory::new(&episode.id, reference, points)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{apply_labeler, preset};

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_episodes: 40,
            prevalence: 0.25,
            mean_duration_hours: 144.0,
            observation_rate_per_hour: 1.0,
            hazard_lift: 1.0,
            drift_window_hours: 24.0,
            seed: 11,
        }
    }

    #[test]
    fn cohort_is_deterministic_and_prevalence_exact() {
        let cfg = small_config();
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let positives = a.iter().filter(|e| e.event_time.is_some()).count();
        assert_eq!(positives, 10);

        let mut other = cfg.clone();
        other.seed = 12;
        assert_ne!(generate_cohort(&other).unwrap(), a);
    }

    #[test]
    fn episodes_do_not_depend_on_cohort_size() {
        let cfg = small_config();
        let mut bigger = cfg.clone();
        bigger.n_episodes = 80;
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&bigger).unwrap();
        // Same index, same observations; only the positive assignment
        // shuffle depends on n, so compare a pair with equal status.
        for (ea, eb) in a.iter().zip(&b) {
            if ea.event_time.is_some() == eb.event_time.is_some() {
                assert_eq!(ea.observations, eb.observations, "{}", ea.id);
            }
        }
    }

    #[test]
    fn planted_events_agree_with_labelers() {
        let cohort = generate_cohort(&small_config()).unwrap();
        for name in ["hyperkalemia", "hypoglycemia", "decompensation", "icu_transfer", "mortality"] {
            let p = preset(name).unwrap();
            for ep in &cohort {
                let lab = apply_labeler(ep, &p.labeler).unwrap();
                assert!(lab.in_cohort, "{name} excluded {}", ep.id);
                assert_eq!(
                    lab.outcome.event_time, ep.event_time,
                    "{name} disagrees on {}",
                    ep.id
                );
            }
        }
    }

    #[test]
    fn sepsis_labeler_recovers_late_events() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let p = preset("sepsis").unwrap();
        let mut late_positives = 0;
        for ep in &cohort {
            let lab = apply_labeler(ep, &p.labeler).unwrap();
            assert!(lab.in_cohort, "inclusion pattern missing in {}", ep.id);
            match ep.event_time {
                Some(e) if e.hours() >= MIN_SEPSIS_EVENT_HOURS => {
                    late_positives += 1;
                    assert_eq!(lab.outcome.event_time, ep.event_time, "{}", ep.id);
                }
                _ => assert_eq!(lab.outcome.event_time, None, "{}", ep.id),
            }
        }
        assert!(late_positives > 0, "no episode exercised the sepsis plant");
    }

    #[test]
    fn ambient_values_never_trip_rules() {
        let mut cfg = small_config();
        cfg.prevalence = 0.0;
        let cohort = generate_cohort(&cfg).unwrap();
        for name in ["hyperkalemia", "hypoglycemia", "decompensation", "icu_transfer", "mortality", "sepsis"] {
            let p = preset(name).unwrap();
            for ep in &cohort {
                let lab = apply_labeler(ep, &p.labeler).unwrap();
                assert_eq!(lab.outcome.event_time, None, "{name} fired on {}", ep.id);
            }
        }
    }

    #[test]
    fn zero_lift_blinds_the_biomarker() {
        let mut cfg = small_config();
        cfg.hazard_lift = 0.0;
        cfg.n_episodes = 200;
        cfg.prevalence = 0.5;
        let cohort = generate_cohort(&cfg).unwrap();
        let level = |ep: &Episode| -> Vec<f64> {
            ep.observations
                .iter()
                .filter(|o| o.code() == Some(BIOMARKER_CODE))
                .filter_map(|o| o.numeric())
                .collect()
        };
        let pos: Vec<f64> = cohort
            .iter()
            .filter(|e| e.event_time.is_some())
            .flat_map(|e| level(e))
            .collect();
        let neg: Vec<f64> = cohort
            .iter()
            .filter(|e| e.event_time.is_none())
            .flat_map(|e| level(e))
            .collect();
        let d = crate::sample::ks_distance(&pos, &neg).unwrap();
        assert!(d < 0.05, "biomarker distributions differ at zero lift: KS {d}");
    }

    #[test]
    fn oracle_scores_exactly_inside_horizon() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let ep = cohort.iter().find(|e| e.event_time.is_some()).unwrap();
        let e = ep.event_time.unwrap().hours();
        let probes: Vec<Timestamp> = [e - 2.0, e - 0.5, e, e + 0.5]
            .iter()
            .map(|&t| Timestamp::new(t))
            .collect();
        let traj = score_trajectory(
            ep,
            Timestamp::new(e - 0.5),
            &probes,
            &ScorerSpec::Oracle,
            1.0,
            0,
        )
        .unwrap();
        let scores: Vec<f64> = traj.points().iter().map(|p| p.score).collect();
        // Only the probe within one hour before the event sees it.
        assert_eq!(scores, vec![0.01, 1.0, 0.01, 0.01]);
    }

    #[test]
    fn noisy_scorer_is_seeded_per_episode() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let ep = &cohort[0];
        let t0 = ep.first_time().unwrap().hours();
        let probes: Vec<Timestamp> = (0..6).map(|i| Timestamp::new(t0 + i as f64)).collect();
        let reference = probes[3];
        let spec = ScorerSpec::Noisy { sigma: 0.3 };
        let a = score_trajectory(ep, reference, &probes, &spec, 1.0, 5).unwrap();
        let b = score_trajectory(ep, reference, &probes, &spec, 1.0, 5).unwrap();
        let c = score_trajectory(ep, reference, &probes, &spec, 1.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn probe_outside_span_is_rejected() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let ep = &cohort[0];
        let bad = vec![Timestamp::new(ep.last_time().unwrap().hours() + 1.0)];
        assert!(matches!(
            score_trajectory(ep, bad[0], &bad, &ScorerSpec::WindowedMean, 1.0, 0),
            Err(SynthError::ProbeOutOfRange { .. })
        ));
    }

    #[test]
    fn scorer_spec_parses_and_displays() {
        for s in ["oracle", "windowed_mean", "noisy:0.3", "constant:0.5"] {
            let spec: ScorerSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("nope".parse::<ScorerSpec>().is_err());
        assert!("constant:1.5".parse::<ScorerSpec>().is_err());
        assert!("noisy:abc".parse::<ScorerSpec>().is_err());
    }
}
