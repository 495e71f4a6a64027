//! Stratified random sampling by (question type, answer type).
//!
//! Quotas use largest-remainder apportionment of `gamma * N`: every stratum
//! gets `floor(gamma * size)`, and the seats left over to reach
//! `round(gamma * N)` go to the largest fractional remainders, ties broken by
//! stratum key order. Members are drawn uniformly without replacement with a
//! per-stratum generator derived from the run seed.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::rng::item_rng;
use crate::types::{AnswerType, QuestionType, SampleSet};

pub type StratumKey = (QuestionType, AnswerType);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratum {
    pub key: StratumKey,
    /// Positions in the input set, ascending.
    pub members: Vec<usize>,
}

/// Groups sample positions by stratum; strata come out in key order
/// (question type declaration order, then open before closed).
pub fn stratify(samples: &SampleSet) -> Vec<Stratum> {
    let mut groups: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.stratum_key()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(key, members)| Stratum { key, members })
        .collect()
}

/// Exact number of samples drawn for ratio `gamma` over `n` items.
pub fn sample_total(gamma: f64, n: usize) -> usize {
    (gamma * n as f64).round() as usize
}

/// Per-stratum quotas, aligned with `sizes`.
pub fn apportion(sizes: &[usize], gamma: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = sample_total(gamma, n);
    let exact: Vec<f64> = sizes.iter().map(|&s| gamma * s as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let seats = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // stable sort keeps key order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(seats) {
        quotas[i] += 1;
    }
    quotas
}

#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    /// Selected samples, in input order.
    pub selected: SampleSet,
    /// The remainder of the input, in input order.
    pub rest: SampleSet,
    /// Strata that received no seats.
    pub uncovered: Vec<StratumKey>,
    pub quotas: Vec<(StratumKey, usize)>,
}

/// Draws `round(gamma * N)` samples stratified by question and answer type.
///
/// # Panics
/// If `gamma` is outside `(0, 1]`.
pub fn stratified_sample(samples: &SampleSet, gamma: f64, seed: u64) -> SamplingOutcome {
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1], got {gamma}");
    let strata = stratify(samples);
    let sizes: Vec<usize> = strata.iter().map(|s| s.members.len()).collect();
    let quotas = apportion(&sizes, gamma);

    let mut chosen = vec![false; samples.len()];
    let mut uncovered = Vec::new();
    for (stratum, &quota) in strata.iter().zip(&quotas) {
        assert!(quota <= stratum.members.len(), "quota exceeds stratum size");
        if quota == 0 {
            uncovered.push(stratum.key);
            continue;
        }
        let key = format!("stratum:{}:{}", stratum.key.0, stratum.key.1);
        let mut rng = item_rng(seed, &key);
        for pick in index::sample(&mut rng, stratum.members.len(), quota) {
            chosen[stratum.members[pick]] = true;
        }
    }
    if !uncovered.is_empty() {
        let names: Vec<String> = uncovered.iter().map(|(q, a)| format!("{q}/{a}")).collect();
        log::warn!("strata with no samples at gamma {gamma}: {}", names.join(", "));
    }

    let mut flags = chosen.iter();
    let selected = samples.filter(|_| *flags.next().unwrap());
    let rest = samples.filter(|s| !selected.contains(&s.id));
    SamplingOutcome {
        selected,
        rest,
        uncovered,
        quotas: strata.iter().map(|s| s.key).zip(quotas).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Sample, Split};

    fn make(keys: &[(QuestionType, AnswerType, usize)]) -> SampleSet {
        let mut out = Vec::new();
        for &(q, a, count) in keys {
            for _ in 0..count {
                let id = format!("s{}", out.len());
                out.push(Sample {
                    id,
                    image_ids: vec!["i".into()],
                    question: "q?".into(),
                    answer: vec![if a == AnswerType::Closed { "yes" } else { "x" }.into()],
                    explanation: String::new(),
                    question_type: q,
                    answer_type: a,
                    split: Split::Train,
                });
            }
        }
        SampleSet::new(out).unwrap()
    }

    #[test]
    fn empty_input_has_no_strata() {
        assert!(stratify(&SampleSet::default()).is_empty());
    }

    #[test]
    fn single_key_single_stratum() {
        let set = make(&[(QuestionType::Presence, AnswerType::Closed, 3)]);
        let strata = stratify(&set);
        assert_eq!(strata.len(), 1);
        assert_eq!(strata[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn four_keys_partition_the_input() {
        let set = make(&[
            (QuestionType::Gender, AnswerType::Open, 2),
            (QuestionType::Presence, AnswerType::Closed, 5),
            (QuestionType::Anatomy, AnswerType::Open, 1),
            (QuestionType::Presence, AnswerType::Open, 4),
        ]);
        let strata = stratify(&set);
        let keys: Vec<StratumKey> = strata.iter().map(|s| s.key).collect();
        assert_eq!(
            keys,
            vec![
                (QuestionType::Presence, AnswerType::Open),
                (QuestionType::Presence, AnswerType::Closed),
                (QuestionType::Anatomy, AnswerType::Open),
                (QuestionType::Gender, AnswerType::Open),
            ]
        );
        let total: usize = strata.iter().map(|s| s.members.len()).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn proportional_without_remainders() {
        let keys: Vec<_> = QuestionType::ALL
            .iter()
            .map(|&q| (q, AnswerType::Open, 100))
            .collect();
        let set = make(&keys);
        let out = stratified_sample(&set, 0.10, 1);
        assert_eq!(out.selected.len(), 100);
        assert!(out.quotas.iter().all(|&(_, q)| q == 10));
    }

    #[test]
    fn tie_goes_to_first_stratum_key() {
        // strata A:7 and B:3 at gamma 0.5 -> exact 3.5 and 1.5, one seat left
        assert_eq!(apportion(&[7, 3], 0.5), vec![4, 1]);
    }

    #[test]
    fn full_ratio_is_identity() {
        let set = make(&[
            (QuestionType::Presence, AnswerType::Closed, 4),
            (QuestionType::Size, AnswerType::Open, 3),
        ]);
        for seed in [0, 1, 99] {
            let out = stratified_sample(&set, 1.0, seed);
            assert_eq!(out.selected.len(), set.len());
            assert!(out.rest.is_empty());
        }
    }

    #[test]
    fn tiny_gamma_reports_uncovered_strata() {
        let set = make(&[
            (QuestionType::Presence, AnswerType::Closed, 95),
            (QuestionType::Size, AnswerType::Open, 5),
        ]);
        let out = stratified_sample(&set, 0.01, 3);
        assert_eq!(out.selected.len(), 1);
        assert_eq!(out.uncovered, vec![(QuestionType::Size, AnswerType::Open)]);
    }

    #[test]
    fn seed_changes_selection_but_not_counts() {
        let set = make(&[(QuestionType::Presence, AnswerType::Closed, 200)]);
        let a = stratified_sample(&set, 0.1, 1);
        let b = stratified_sample(&set, 0.1, 2);
        let ids = |o: &SamplingOutcome| o.selected.ids().map(String::from).collect::<Vec<_>>();
        assert_eq!(a.selected.len(), b.selected.len());
        assert_ne!(ids(&a), ids(&b));
        assert_eq!(ids(&a), ids(&stratified_sample(&set, 0.1, 1)));
    }
}
