//! Reference-time sampling: horizon truncation, history-matched query
//! times for negatives, and stratified fold assignment.
//!
//! Naively drawing negative query times uniformly over each episode
//! makes elapsed history a giveaway feature: positives are queried close
//! to their event, negatives anywhere. Sampling negatives from the
//! positives' elapsed-history distribution (by decile bins) removes that
//! shortcut.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Episode, Timestamp};

/// One evaluation query: an episode, a reference time, and the label of
/// the horizon window after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub episode_id: String,
    pub reference_time_t: Timestamp,
    pub label: u8,
    /// Hours of history available at the reference time.
    pub elapsed_history: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("empty input")]
    EmptyInput,
    #[error(
        "elapsed-history bin {bin} (from {lower_hours} h) is unreachable by every negative episode"
    )]
    InsufficientSupport { bin: usize, lower_hours: f64 },
    #[error("{positives} positive instances cannot stratify across {folds} folds")]
    TooFewPositives { positives: usize, folds: usize },
    #[error("episode {episode_id}: no reference time can both see data and precede the event")]
    OnsetTooSoon { episode_id: String },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
}

/// Cuts the last `horizon_h` hours of every episode and removes
/// episodes that cannot yield a valid query.
///
/// Dropping the final horizon keeps models from being scored at times
/// where the recorded stream simply ends inside their prediction
/// window. Removed entirely are: episodes whose event falls within the
/// first `horizon_h` hours (no pre-event query time exists), episodes
/// left without observations, and positives whose remaining history
/// ends more than one horizon before the event.
pub fn truncate_horizon(cohort: Vec<Episode>, horizon_h: f64) -> Vec<Episode> {
    cohort
        .into_iter()
        .filter_map(|mut ep| {
            let last = ep.last_time()?.hours();
            let cutoff = last - horizon_h;
            ep.observations.retain(|o| o.t.hours() <= cutoff);
            let first = ep.first_time()?.hours();
            let last = ep.last_time()?.hours();
            if let Some(e) = ep.event_time {
                let e = e.hours();
                if e <= horizon_h || e <= first || e - horizon_h > last {
                    return None;
                }
            }
            Some(ep)
        })
        .collect()
}

const DECILES: usize = 10;

struct HistoryBins {
    /// Bin edges `q_0 <= ... <= q_10` over positives' elapsed history.
    edges: Vec<f64>,
    /// Positive count per bin `[q_j, q_{j+1})`, last bin closed.
    weights: Vec<usize>,
}

impl HistoryBins {
    fn from_elapsed(mut elapsed: Vec<f64>) -> Self {
        elapsed.sort_by(f64::total_cmp);
        let n = elapsed.len();
        let mut edges = Vec::with_capacity(DECILES + 1);
        for j in 0..DECILES {
            edges.push(elapsed[(j * n) / DECILES]);
        }
        edges.push(elapsed[n - 1]);
        let mut weights = vec![0usize; DECILES];
        for &v in &elapsed {
            weights[Self::bin_of(&edges, v)] += 1;
        }
        HistoryBins { edges, weights }
    }

    fn bin_of(edges: &[f64], v: f64) -> usize {
        let mut j = 0;
        for (i, &e) in edges.iter().take(DECILES).enumerate() {
            if v >= e {
                j = i;
            }
        }
        j
    }

    /// Bins a negative episode with `span` hours of history can land in.
    fn feasible(&self, span: f64) -> Vec<usize> {
        (0..DECILES)
            .filter(|&j| self.weights[j] > 0 && self.edges[j] <= span)
            .collect()
    }
}

/// Draws one reference time per episode, deterministically from `seed`.
///
/// Positives get `T` uniform over the part of `[event - h, event)` that
/// has data, so their label is 1 by construction. Negatives get `T`
/// placed to match the positives' elapsed-history distribution: a
/// positive-weighted decile bin is drawn among those the episode can
/// reach, then `T` is placed uniformly inside it. A negative too short
/// for every bin falls back to its last observation. Errors when some
/// bin is unreachable by every negative, since the matched distribution
/// would be silently biased.
pub fn sample_reference_times(
    cohort: &[Episode],
    horizon_h: f64,
    seed: u64,
) -> Result<Vec<EvalInstance>, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances: Vec<Option<EvalInstance>> = vec![None; cohort.len()];
    let mut positive_elapsed: Vec<f64> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();

    for (i, ep) in cohort.iter().enumerate() {
        let (Some(first), Some(last)) = (ep.first_time(), ep.last_time()) else {
            continue;
        };
        let (first, last) = (first.hours(), last.hours());
        match ep.event_time {
            Some(e) => {
                let e = e.hours();
                let lo = first.max(e - horizon_h);
                let hi = e.min(last);
                if e <= horizon_h || e <= first || lo > hi {
                    return Err(SampleError::OnsetTooSoon {
                        episode_id: ep.id.clone(),
                    });
                }
                // hi can equal lo when the data ends exactly one horizon
                // before the event; the single admissible time is used.
                let t = if hi > lo {
                    lo + rng.gen::<f64>() * (hi - lo)
                } else {
                    lo
                };
                let t = t.min(hi);
                let elapsed = t - first;
                positive_elapsed.push(elapsed);
                instances[i] = Some(EvalInstance {
                    episode_id: ep.id.clone(),
                    reference_time_t: Timestamp::new(t),
                    label: 1,
                    elapsed_history: elapsed,
                });
            }
            None => negatives.push(i),
        }
    }

    if positive_elapsed.is_empty() {
        // Nothing to match against: spread negatives uniformly.
        for &i in &negatives {
            let ep = &cohort[i];
            let first = ep.first_time().unwrap().hours();
            let span = ep.last_time().unwrap().hours() - first;
            let t = first + rng.gen::<f64>() * span;
            instances[i] = Some(EvalInstance {
                episode_id: ep.id.clone(),
                reference_time_t: Timestamp::new(t),
                label: 0,
                elapsed_history: t - first,
            });
        }
        return Ok(instances.into_iter().flatten().collect());
    }

    let bins = HistoryBins::from_elapsed(positive_elapsed);

    if !negatives.is_empty() {
        let spans: Vec<f64> = negatives
            .iter()
            .map(|&i| {
                let ep = &cohort[i];
                ep.last_time().unwrap().hours() - ep.first_time().unwrap().hours()
            })
            .collect();
        for j in 0..DECILES {
            if bins.weights[j] > 0 && !spans.iter().any(|&s| s >= bins.edges[j]) {
                return Err(SampleError::InsufficientSupport {
                    bin: j,
                    lower_hours: bins.edges[j],
                });
            }
        }
        for (&i, &span) in negatives.iter().zip(&spans) {
            let ep = &cohort[i];
            let first = ep.first_time().unwrap().hours();
            let feasible = bins.feasible(span);
            let t = if feasible.is_empty() {
                // Too short for every positive-weighted bin: use all the
                // history there is.
                first + span
            } else {
                let total: usize = feasible.iter().map(|&j| bins.weights[j]).sum();
                let mut pick = rng.gen_range(0..total);
                let mut chosen = feasible[0];
                for &j in &feasible {
                    if pick < bins.weights[j] {
                        chosen = j;
                        break;
                    }
                    pick -= bins.weights[j];
                }
                let lo = bins.edges[chosen];
                let hi = bins.edges[chosen + 1].min(span);
                let elapsed = if hi > lo {
                    lo + rng.gen::<f64>() * (hi - lo)
                } else {
                    lo
                };
                first + elapsed
            };
            instances[i] = Some(EvalInstance {
                episode_id: ep.id.clone(),
                reference_time_t: Timestamp::new(t),
                label: 0,
                elapsed_history: t - first,
            });
        }
    }

    Ok(instances.into_iter().flatten().collect())
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical distribution functions.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, SampleError> {
    if a.is_empty() || b.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut sup: f64 = 0.0;
    for &v in sa.iter().chain(sb.iter()) {
        let fa = sa.partition_point(|&x| x <= v) as f64 / na;
        let fb = sb.partition_point(|&x| x <= v) as f64 / nb;
        sup = sup.max((fa - fb).abs());
    }
    Ok(sup)
}

/// Stratified fold labels keyed by episode id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    assignments: BTreeMap<String, usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn fold_of(&self, episode_id: &str) -> Option<usize> {
        self.assignments.get(episode_id).copied()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.assignments.iter().map(|(id, &f)| (id.as_str(), f))
    }
}

/// Deals instances into `k` folds, stratified by label.
///
/// Both classes are shuffled (seeded) and dealt round-robin with one
/// rolling fold index, so per-fold sizes differ by at most one and so do
/// per-fold positive counts. Requires at least `k` positives; folds
/// without a positive would make fold-level ranking metrics undefined.
pub fn assign_folds(
    instances: &[EvalInstance],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, SampleError> {
    if k < 2 {
        return Err(SampleError::BadFoldCount(k));
    }
    if instances.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    let mut positives: Vec<&str> = instances
        .iter()
        .filter(|i| i.label == 1)
        .map(|i| i.episode_id.as_str())
        .collect();
    let mut negatives: Vec<&str> = instances
        .iter()
        .filter(|i| i.label == 0)
        .map(|i| i.episode_id.as_str())
        .collect();
    if positives.len() < k {
        return Err(SampleError::TooFewPositives {
            positives: positives.len(),
            folds: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(positives.as_mut_slice(), &mut rng);
    rand::seq::SliceRandom::shuffle(negatives.as_mut_slice(), &mut rng);

    let mut assignments = BTreeMap::new();
    let mut fold = 0usize;
    for id in positives.into_iter().chain(negatives) {
        assignments.insert(id.to_string(), fold);
        fold = (fold + 1) % k;
    }
    Ok(FoldAssignment { assignments, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{validate_episode, Modality, Observation, ObservationValue};
    use crate::label::label_at;
    use proptest::prelude::*;

    fn episode(id: &str, times: &[f64], event: Option<f64>) -> Episode {
        let obs = times
            .iter()
            .map(|&t| Observation::new(Modality::Vital, ObservationValue::Numeric(0.0), t))
            .collect();
        let mut ep = Episode::new(id, obs);
        ep.event_time = event.map(Timestamp::new);
        validate_episode(ep).unwrap()
    }

    fn grid(n: usize, step: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * step).collect()
    }

    #[test]
    fn truncate_drops_tail_and_hopeless_episodes() {
        let cohort = vec![
            // Spans [0, 10]; observations past 8.5 go.
            episode("a", &grid(21, 0.5), None),
            // Event inside the first horizon: gone.
            episode("b", &grid(21, 0.5), Some(1.0)),
            // All observations inside the final horizon: gone.
            episode("c", &[9.0, 9.5], None),
        ];
        let out = truncate_horizon(cohort, 1.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "a");
        assert_eq!(out[0].last_time().unwrap().hours(), 8.5);
        assert_eq!(out[0].observations.len(), 18);
    }

    #[test]
    fn truncate_keeps_reachable_positive() {
        let cohort = vec![episode("p", &grid(101, 0.1), Some(8.0))];
        let out = truncate_horizon(cohort, 1.5);
        assert_eq!(out.len(), 1);
        // Event at 8.0 with history to 8.5: still queryable.
        assert_eq!(out[0].event_time, Some(Timestamp::new(8.0)));
    }

    #[test]
    fn truncate_drops_positive_with_unreachable_event() {
        // After cutting to t <= 8.5, the only remaining observation is
        // at 0, more than one horizon before the event at 10.
        let cohort = vec![episode("p", &[0.0, 10.0], Some(10.0))];
        assert!(truncate_horizon(cohort, 1.5).is_empty());
    }

    #[test]
    fn positive_reference_times_precede_event_within_horizon() {
        let cohort: Vec<Episode> = (0..50)
            .map(|i| episode(&format!("p{i}"), &grid(200, 0.5), Some(40.0 + i as f64)))
            .collect();
        let instances = sample_reference_times(&cohort, 2.0, 7).unwrap();
        assert_eq!(instances.len(), 50);
        for (inst, ep) in instances.iter().zip(&cohort) {
            let e = ep.event_time.unwrap().hours();
            let t = inst.reference_time_t.hours();
            assert!(t < e && e <= t + 2.0, "T={t} e={e}");
            assert_eq!(inst.label, 1);
            assert_eq!(label_at(ep.event_time, inst.reference_time_t, 2.0), 1);
        }
    }

    #[test]
    fn negative_elapsed_matches_positive_range() {
        // Positives all have elapsed history pinned near 2.0 hours by a
        // tiny horizon; matched negatives must land in the same range.
        let mut cohort: Vec<Episode> = (0..40)
            .map(|i| episode(&format!("p{i}"), &grid(101, 0.1), Some(2.0 + 1e-7)))
            .collect();
        for i in 0..40 {
            cohort.push(episode(&format!("n{i}"), &grid(101, 0.1), None));
        }
        let instances = sample_reference_times(&cohort, 1e-6, 11).unwrap();
        let pos: Vec<f64> = instances
            .iter()
            .filter(|i| i.label == 1)
            .map(|i| i.elapsed_history)
            .collect();
        let neg: Vec<f64> = instances
            .iter()
            .filter(|i| i.label == 0)
            .map(|i| i.elapsed_history)
            .collect();
        assert_eq!(pos.len(), 40);
        assert_eq!(neg.len(), 40);
        let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &e in &neg {
            assert!(e >= lo - 1e-9 && e <= hi + 1e-9, "elapsed {e} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn unreachable_bin_is_an_error() {
        // Positives need ~50 h of elapsed history; negatives only span
        // 5 h, so every positive-weighted bin is unreachable.
        let mut cohort: Vec<Episode> = (0..10)
            .map(|i| episode(&format!("p{i}"), &grid(201, 0.5), Some(60.0 + i as f64 * 0.1)))
            .collect();
        cohort.push(episode("n0", &grid(11, 0.5), None));
        let err = sample_reference_times(&cohort, 1.0, 3).unwrap_err();
        assert!(matches!(err, SampleError::InsufficientSupport { .. }));
    }

    #[test]
    fn short_negative_falls_back_when_support_exists() {
        let mut cohort: Vec<Episode> = (0..10)
            .map(|i| episode(&format!("p{i}"), &grid(201, 0.5), Some(60.0 + i as f64 * 0.1)))
            .collect();
        // One long negative covers the bins; the short one falls back to
        // its last observation.
        cohort.push(episode("long", &grid(201, 0.5), None));
        cohort.push(episode("short", &grid(11, 0.5), None));
        let instances = sample_reference_times(&cohort, 1.0, 3).unwrap();
        let short = instances.iter().find(|i| i.episode_id == "short").unwrap();
        assert_eq!(short.reference_time_t.hours(), 5.0);
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let cohort: Vec<Episode> = (0..30)
            .map(|i| {
                let event = (i % 3 == 0).then_some(30.0 + i as f64);
                episode(&format!("e{i}"), &grid(200, 0.5), event)
            })
            .collect();
        let a = sample_reference_times(&cohort, 2.0, 42).unwrap();
        let b = sample_reference_times(&cohort, 2.0, 42).unwrap();
        let c = sample_reference_times(&cohort, 2.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ks_known_values() {
        assert_eq!(
            ks_distance(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap(),
            0.25
        );
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // Disjoint supports: maximal distance.
        assert_eq!(ks_distance(&[0.0, 0.1], &[5.0, 6.0]).unwrap(), 1.0);
        assert!(matches!(
            ks_distance(&[], &[1.0]),
            Err(SampleError::EmptyInput)
        ));
    }

    #[test]
    fn folds_stratify_positives_and_balance_sizes() {
        let instances: Vec<EvalInstance> = (0..103)
            .map(|i| EvalInstance {
                episode_id: format!("e{i}"),
                reference_time_t: Timestamp::new(1.0),
                label: u8::from(i < 17),
                elapsed_history: 1.0,
            })
            .collect();
        let folds = assign_folds(&instances, 5, 9).unwrap();
        let mut pos = vec![0usize; 5];
        let mut size = vec![0usize; 5];
        for inst in &instances {
            let f = folds.fold_of(&inst.episode_id).unwrap();
            size[f] += 1;
            pos[f] += usize::from(inst.label == 1);
        }
        assert_eq!(size.iter().sum::<usize>(), 103);
        assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        assert!(size.iter().max().unwrap() - size.iter().min().unwrap() <= 1);
    }

    #[test]
    fn folds_error_cases() {
        let one = vec![EvalInstance {
            episode_id: "a".into(),
            reference_time_t: Timestamp::new(1.0),
            label: 1,
            elapsed_history: 1.0,
        }];
        assert!(matches!(
            assign_folds(&one, 1, 0),
            Err(SampleError::BadFoldCount(1))
        ));
        assert!(matches!(
            assign_folds(&[], 2, 0),
            Err(SampleError::EmptyInput)
        ));
        assert!(matches!(
            assign_folds(&one, 2, 0),
            Err(SampleError::TooFewPositives {
                positives: 1,
                folds: 2
            })
        ));
    }

    proptest! {
        #[test]
        fn ks_is_bounded_and_symmetric(
            a in proptest::collection::vec(-50.0f64..50.0, 1..60),
            b in proptest::collection::vec(-50.0f64..50.0, 1..60),
        ) {
            let d = ks_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - ks_distance(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(ks_distance(&a, &a).unwrap() == 0.0);
        }

        #[test]
        fn sampled_labels_match_recomputation(
            seed in 0u64..1000,
            n_pos in 1usize..8,
            n_neg in 0usize..8,
        ) {
            let mut cohort = Vec::new();
            for i in 0..n_pos {
                cohort.push(episode(&format!("p{i}"), &grid(100, 0.5), Some(20.0 + i as f64)));
            }
            for i in 0..n_neg {
                cohort.push(episode(&format!("n{i}"), &grid(100, 0.5), None));
            }
            let instances = sample_reference_times(&cohort, 2.0, seed).unwrap();
            prop_assert_eq!(instances.len(), cohort.len());
            for (inst, ep) in instances.iter().zip(&cohort) {
                prop_assert_eq!(&inst.episode_id, &ep.id);
                prop_assert_eq!(label_at(ep.event_time, inst.reference_time_t, 2.0), inst.label);
                let first = ep.first_time().unwrap().hours();
                let last = ep.last_time().unwrap().hours();
                let t = inst.reference_time_t.hours();
                prop_assert!(t >= first && t <= last);
                prop_assert!((inst.elapsed_history - (t - first)).abs() < 1e-12);
            }
        }

        #[test]
        fn fold_positive_counts_differ_by_at_most_one(
            n_pos in 10usize..40,
            n_neg in 0usize..120,
            k in 2usize..6,
            seed in 0u64..500,
        ) {
            prop_assume!(n_pos >= k);
            let instances: Vec<EvalInstance> = (0..n_pos + n_neg)
                .map(|i| EvalInstance {
                    episode_id: format!("e{i}"),
                    reference_time_t: Timestamp::new(1.0),
                    label: u8::from(i < n_pos),
                    elapsed_history: 1.0,
                })
                .collect();
            let folds = assign_folds(&instances, k, seed).unwrap();
            let mut pos = vec![0usize; k];
            let mut size = vec![0usize; k];
            for inst in &instances {
                let f = folds.fold_of(&inst.episode_id).unwrap();
                prop_assert!(f < k);
                size[f] += 1;
                pos[f] += usize::from(inst.label == 1);
            }
            prop_assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
            prop_assert!(size.iter().max().unwrap() - size.iter().min().unwrap() <= 1);
            prop_assert!(*pos.iter().min().unwrap() >= 1);
        }
    }
}
