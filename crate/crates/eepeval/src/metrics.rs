//! Accuracy and temporal-stability metrics over risk trajectories.
//!
//! Accuracy metrics (AUROC, AUPRC, F1) treat each evaluation instance
//! as one scored point: the trajectory value at the latest probe at or
//! before the reference time. Stability metrics look at the whole
//! trajectory inside a window around the reference time: the mean local
//! Lipschitz quotient over probe pairs closer than the pairing window,
//! and the number of alert flips at the decision threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Episode, ProbePolicy, TaskConfig, Timestamp};
use crate::sample::EvalInstance;

/// One scored probe of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub t: Timestamp,
    pub score: f64,
}

impl ProbePoint {
    pub fn new(t: f64, score: f64) -> Self {
        ProbePoint {
            t: Timestamp::new(t),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("need at least one score from each class")]
    OneClassOnly,
    #[error("need at least one positive score")]
    NoPositives,
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("probe {index}: time is not finite")]
    BadProbeTime { index: usize },
    #[error("probe {index}: times must be strictly increasing")]
    NonMonotonicProbes { index: usize },
    #[error("probe {index}: score {score} outside [0, 1]")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("no risk trajectory for episode {0}")]
    MissingTrajectory(String),
    #[error("trajectory for episode {0} has no probe at or before the reference time")]
    NoProbeBeforeReference(String),
    #[error("trajectory reference time disagrees with the instance for episode {0}")]
    ReferenceMismatch(String),
    #[error("fold has no instances")]
    EmptyFold,
}

/// A model's risk scores along one episode, probed at strictly
/// increasing times, with the reference time the trajectory was
/// sampled around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    pub episode_id: String,
    pub reference_time_t: Timestamp,
    points: Vec<ProbePoint>,
}

impl RiskTrajectory {
    pub fn new(
        episode_id: impl Into<String>,
        reference_time_t: Timestamp,
        points: Vec<ProbePoint>,
    ) -> Result<Self, MetricError> {
        for (index, p) in points.iter().enumerate() {
            if !p.t.hours().is_finite() {
                return Err(MetricError::BadProbeTime { index });
            }
            if !(p.score >= 0.0 && p.score <= 1.0) {
                return Err(MetricError::ScoreOutOfRange {
                    index,
                    score: p.score,
                });
            }
            if index > 0 && points[index - 1].t.hours() >= p.t.hours() {
                return Err(MetricError::NonMonotonicProbes { index });
            }
        }
        Ok(RiskTrajectory {
            episode_id: episode_id.into(),
            reference_time_t,
            points,
        })
    }

    pub fn points(&self) -> &[ProbePoint] {
        &self.points
    }

    /// Score at the latest probe at or before `t`.
    pub fn score_at_or_before(&self, t: Timestamp) -> Option<f64> {
        let k = self.points.partition_point(|p| p.t.hours() <= t.hours());
        (k > 0).then(|| self.points[k - 1].score)
    }

    /// Probes with `|t - reference| <= b`, a contiguous slice.
    pub fn window(&self, b: f64) -> &[ProbePoint] {
        let t_ref = self.reference_time_t.hours();
        let lo = self.points.partition_point(|p| p.t.hours() < t_ref - b);
        let hi = self.points.partition_point(|p| p.t.hours() <= t_ref + b);
        &self.points[lo..hi]
    }
}

/// Local Lipschitz estimate for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub episode_id: String,
    /// Mean of `|score_i - score_j| / |t_i - t_j|` over admissible
    /// pairs; zero when no pair exists.
    pub l_c: f64,
    pub pair_count: usize,
    /// True when the window held fewer than two probes within the
    /// pairing distance, so `l_c` carries no signal.
    pub degenerate: bool,
}

/// Mean local Lipschitz quotient of the trajectory inside the window of
/// radius `b` around the reference time, over unordered probe pairs at
/// most `c` hours apart.
pub fn stability_lc(trajectory: &RiskTrajectory, b: f64, c: f64) -> StabilityResult {
    let w = trajectory.window(b);
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..w.len() {
        for j in (i + 1)..w.len() {
            let dt = w[j].t.hours() - w[i].t.hours();
            if dt > c {
                break;
            }
            sum += (w[j].score - w[i].score).abs() / dt;
            pairs += 1;
        }
    }
    StabilityResult {
        episode_id: trajectory.episode_id.clone(),
        l_c: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
        pair_count: pairs,
        degenerate: pairs == 0,
    }
}

/// Thresholded alert states along a trajectory window and the number of
/// adjacent state changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertTrace {
    pub episode_id: String,
    /// Probe time and alert state (1 iff score at or above threshold).
    pub states: Vec<(Timestamp, u8)>,
    pub flips: usize,
}

/// Alert flips inside the window of radius `b`: the number of adjacent
/// probes whose thresholded states differ. The threshold is inclusive.
pub fn flip_count(trajectory: &RiskTrajectory, b: f64, tau: f64) -> AlertTrace {
    let states: Vec<(Timestamp, u8)> = trajectory
        .window(b)
        .iter()
        .map(|p| (p.t, u8::from(p.score >= tau)))
        .collect();
    let flips = states.windows(2).filter(|w| w[0].1 != w[1].1).count();
    AlertTrace {
        episode_id: trajectory.episode_id.clone(),
        states,
        flips,
    }
}

fn check_finite(scores: &[f64]) -> Result<(), MetricError> {
    if scores.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NonFiniteScore)
    }
}

/// Area under the ROC curve via tie-averaged ranks: the probability
/// that a random positive outscores a random negative, with ties worth
/// one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64, MetricError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::OneClassOnly);
    }
    check_finite(pos)?;
    check_finite(neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average (i + 1 + j) / 2.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Area under the precision-recall curve as average precision with
/// step-wise integration; tied scores enter as one group.
pub fn auprc(pos: &[f64], neg: &[f64]) -> Result<f64, MetricError> {
    if pos.is_empty() {
        return Err(MetricError::NoPositives);
    }
    check_finite(pos)?;
    check_finite(neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let np = pos.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut dtp = 0.0;
        let mut dfp = 0.0;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            j += 1;
        }
        tp += dtp;
        fp += dfp;
        if dtp > 0.0 {
            ap += (dtp / np) * (tp / (tp + fp));
        }
        i = j;
    }
    Ok(ap)
}

/// F1 at the alert threshold (inclusive). Returns zero when no instance
/// is predicted or labeled positive, rather than dividing by zero.
pub fn f1_at_threshold(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let tp = pos.iter().filter(|&&s| s >= tau).count() as f64;
    let fp = neg.iter().filter(|&&s| s >= tau).count() as f64;
    let fn_ = pos.iter().filter(|&&s| s < tau).count() as f64;
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Times at which a model should be probed for one instance: the
/// probe-policy times inside `[reference - b, reference + b]`, with the
/// reference time itself always included, strictly increasing.
///
/// `b` should be the largest configured probe radius so that one
/// trajectory serves every radius. Fixed-grid probes are clamped to the
/// episode's observed span.
pub fn probe_times(
    episode: &Episode,
    reference: Timestamp,
    b: f64,
    policy: &ProbePolicy,
) -> Vec<Timestamp> {
    let t_ref = reference.hours();
    let (lo, hi) = (t_ref - b, t_ref + b);
    let mut times: Vec<f64> = match policy {
        ProbePolicy::EveryObservation => episode
            .observations
            .iter()
            .map(|o| o.t.hours())
            .filter(|&t| t >= lo && t <= hi)
            .collect(),
        ProbePolicy::FixedGrid { step_hours } => {
            let (first, last) = match (episode.first_time(), episode.last_time()) {
                (Some(f), Some(l)) => (f.hours(), l.hours()),
                _ => (t_ref, t_ref),
            };
            let start = lo.max(0.0).max(first);
            let stop = hi.min(last);
            let mut v = Vec::new();
            let mut k = 0usize;
            loop {
                let t = start + k as f64 * step_hours;
                if t > stop + 1e-12 {
                    break;
                }
                v.push(t);
                k += 1;
            }
            v
        }
    };
    times.push(t_ref);
    times.sort_by(f64::total_cmp);
    times.dedup();
    times.into_iter().map(Timestamp::new).collect()
}

/// Metrics for one fold at one probe radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub task: String,
    pub fold: usize,
    pub b: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    /// Mean local Lipschitz estimate over instances whose window held
    /// at least one admissible pair.
    pub stability: f64,
    /// Same mean with degenerate (pairless) windows counted as zero.
    pub stability_incl: f64,
    /// Mean alert flips per instance.
    pub flips: f64,
    pub n: usize,
    pub prevalence: f64,
    /// Instances whose stability window was degenerate.
    pub degenerate: usize,
}

/// Evaluates one fold: accuracy metrics once, stability metrics per
/// probe radius. Returns one row per configured radius.
pub fn evaluate_fold(
    task: &str,
    fold: usize,
    instances: &[EvalInstance],
    trajectories: &BTreeMap<String, RiskTrajectory>,
    config: &TaskConfig,
) -> Result<Vec<FoldRow>, MetricError> {
    if instances.is_empty() {
        return Err(MetricError::EmptyFold);
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut trajs: Vec<&RiskTrajectory> = Vec::with_capacity(instances.len());
    for inst in instances {
        let traj = trajectories
            .get(&inst.episode_id)
            .ok_or_else(|| MetricError::MissingTrajectory(inst.episode_id.clone()))?;
        if (traj.reference_time_t.hours() - inst.reference_time_t.hours()).abs() > 1e-9 {
            return Err(MetricError::ReferenceMismatch(inst.episode_id.clone()));
        }
        let score = traj
            .score_at_or_before(inst.reference_time_t)
            .ok_or_else(|| MetricError::NoProbeBeforeReference(inst.episode_id.clone()))?;
        if inst.label == 1 {
            pos.push(score);
        } else {
            neg.push(score);
        }
        trajs.push(traj);
    }
    let auroc_v = auroc(&pos, &neg)?;
    let auprc_v = auprc(&pos, &neg)?;
    let f1_v = f1_at_threshold(&pos, &neg, config.alert_threshold_tau);
    let n = instances.len();
    let prevalence = pos.len() as f64 / n as f64;

    let mut rows = Vec::with_capacity(config.probe_radius_b.len());
    for &b in &config.probe_radius_b {
        let mut informative = Vec::new();
        let mut incl_sum = 0.0;
        let mut flips_sum = 0.0;
        let mut degenerate = 0usize;
        for traj in &trajs {
            let s = stability_lc(traj, b, config.pairing_window_c);
            if s.degenerate {
                degenerate += 1;
            } else {
                informative.push(s.l_c);
            }
            incl_sum += s.l_c;
            flips_sum += flip_count(traj, b, config.alert_threshold_tau).flips as f64;
        }
        let stability = if informative.is_empty() {
            0.0
        } else {
            informative.iter().sum::<f64>() / informative.len() as f64
        };
        rows.push(FoldRow {
            task: task.to_string(),
            fold,
            b,
            auroc: auroc_v,
            auprc: auprc_v,
            f1: f1_v,
            stability,
            stability_incl: incl_sum / n as f64,
            flips: flips_sum / n as f64,
            n,
            prevalence,
            degenerate,
        });
    }
    Ok(rows)
}

/// Mean and population standard deviation of each metric across folds,
/// at one probe radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub b: f64,
    pub folds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub stability_mean: f64,
    pub stability_std: f64,
    pub stability_incl_mean: f64,
    pub stability_incl_std: f64,
    pub flips_mean: f64,
    pub flips_std: f64,
}

/// Full evaluation report: per-fold rows plus cross-fold aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub n_instances: usize,
    pub prevalence: f64,
    pub folds: Vec<FoldRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Groups fold rows by probe radius and reduces each metric to mean and
/// population standard deviation across folds.
pub fn aggregate_folds(rows: &[FoldRow]) -> MetricReport {
    let task = rows.first().map(|r| r.task.clone()).unwrap_or_default();
    let mut radii: Vec<f64> = Vec::new();
    for r in rows {
        if !radii.iter().any(|&b| b.total_cmp(&r.b).is_eq()) {
            radii.push(r.b);
        }
    }
    let mut aggregates = Vec::with_capacity(radii.len());
    let mut n_instances = 0usize;
    let mut weighted_pos = 0.0;
    for (gi, &b) in radii.iter().enumerate() {
        let group: Vec<&FoldRow> = rows
            .iter()
            .filter(|r| r.b.total_cmp(&b).is_eq())
            .collect();
        if gi == 0 {
            n_instances = group.iter().map(|r| r.n).sum();
            weighted_pos = group.iter().map(|r| r.prevalence * r.n as f64).sum();
        }
        let col = |f: &dyn Fn(&FoldRow) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
        let reduce = |f: &dyn Fn(&FoldRow) -> f64| -> (f64, f64) {
            let xs = col(f);
            let m = mean(&xs);
            (m, pop_std(&xs, m))
        };
        let (auroc_mean, auroc_std) = reduce(&|r| r.auroc);
        let (auprc_mean, auprc_std) = reduce(&|r| r.auprc);
        let (f1_mean, f1_std) = reduce(&|r| r.f1);
        let (stability_mean, stability_std) = reduce(&|r| r.stability);
        let (stability_incl_mean, stability_incl_std) = reduce(&|r| r.stability_incl);
        let (flips_mean, flips_std) = reduce(&|r| r.flips);
        aggregates.push(AggregateRow {
            task: task.clone(),
            b,
            folds: group.len(),
            auroc_mean,
            auroc_std,
            auprc_mean,
            auprc_std,
            f1_mean,
            f1_std,
            stability_mean,
            stability_std,
            stability_incl_mean,
            stability_incl_std,
            flips_mean,
            flips_std,
        });
    }
    MetricReport {
        task,
        n_instances,
        prevalence: if n_instances > 0 {
            weighted_pos / n_instances as f64
        } else {
            0.0
        },
        folds: rows.to_vec(),
        aggregates,
    }
}
