//! Evaluation metrics: strict accuracy, micro-F1 over answer elements, BLEU,
//! pairwise win rate and the failure distribution by question type.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::confidence::{answer_matches, neumaier_sum, TriageClass};
use crate::text::{normalize, split_answer};
use crate::types::{AnswerType, PredictionRecord, QuestionType, Sample, SampleSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no items to evaluate")]
    EmptyInput,
    #[error("empty prediction")]
    EmptyPrediction,
    #[error("no reference translations")]
    EmptyReferences,
    #[error("BLEU order must be 1..=4, got {0}")]
    InvalidOrder(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("prediction for unknown sample {0:?}")]
    UnknownSample(String),
}

/// Fraction of predictions that strictly match their gold answer.
pub fn strict_accuracy<S: AsRef<str>>(preds: &[(&Sample, S)]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = preds
        .iter()
        .filter(|(s, p)| answer_matches(p.as_ref(), &s.answer))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MicroF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
}

fn element_set<S: AsRef<str>>(items: &[S]) -> BTreeSet<String> {
    items
        .iter()
        .map(|s| normalize(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged precision/recall/F1. Each item is `(gold, predicted)`;
/// elements are normalized and compared as sets.
pub fn micro_f1<G: AsRef<str>, P: AsRef<str>>(items: &[(Vec<G>, Vec<P>)]) -> Result<MicroF1, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (gold, pred) in items {
        let g = element_set(gold);
        let p = element_set(pred);
        let hit = g.intersection(&p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MicroF1 {
        precision,
        recall,
        f1,
        tp,
        fp,
        r#fn: fn_,
    })
}

/// Whitespace tokens of the normalized text.
pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= k {
        for g in tokens.windows(k) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped k-gram matches and the number of k-grams in `pred`.
pub fn modified_precision_counts(pred: &[String], refs: &[Vec<String>], k: usize) -> (usize, usize) {
    let pc = ngram_counts(pred, k);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, k) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = pc
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, pred.len().saturating_sub(k - 1))
}

/// Reference length closest to `c`; ties go to the shorter reference.
pub fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Combines per-order counts into a cumulative BLEU score.
///
/// `counts[k-1]` holds (clipped matches, total k-grams). Orders with no
/// k-grams in the prediction (shorter than k tokens) are left out and the
/// uniform weights are spread over the remaining orders.
pub fn bleu_from_counts(counts: &[(usize, usize)], c: usize, r: usize) -> f64 {
    let usable: Vec<(usize, usize)> = counts.iter().copied().filter(|&(_, t)| t > 0).collect();
    if usable.is_empty() || usable.iter().any(|&(m, _)| m == 0) {
        return 0.0;
    }
    let log_sum: f64 = usable.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum();
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    bp * (log_sum / usable.len() as f64).exp()
}

/// Cumulative BLEU-n with uniform weights, no smoothing.
pub fn bleu_n(pred: &[String], refs: &[Vec<String>], n: usize) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::InvalidOrder(n));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyPrediction);
    }
    if refs.is_empty() {
        return Err(MetricsError::EmptyReferences);
    }
    let counts: Vec<(usize, usize)> = (1..=n).map(|k| modified_precision_counts(pred, refs, k)).collect();
    Ok(bleu_from_counts(&counts, pred.len(), closest_ref_len(pred.len(), refs)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinRate {
    /// a-wins over decisive items, 0.5 when nothing is decisive.
    pub decisive: f64,
    /// a-wins over all items.
    pub raw: f64,
    pub a_wins: usize,
    pub b_wins: usize,
    pub total: usize,
}

pub fn win_rate(a: &[bool], b: &[bool]) -> Result<WinRate, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let a_wins = a.iter().zip(b).filter(|(&x, &y)| x && !y).count();
    let b_wins = a.iter().zip(b).filter(|(&x, &y)| !x && y).count();
    let decisive = if a_wins + b_wins == 0 {
        0.5
    } else {
        a_wins as f64 / (a_wins + b_wins) as f64
    };
    Ok(WinRate {
        decisive,
        raw: a_wins as f64 / a.len() as f64,
        a_wins,
        b_wins,
        total: a.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeErrors {
    pub items: usize,
    pub fails: usize,
    /// This type's fraction of all failures.
    pub share: f64,
    pub mean_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorDistribution {
    pub total_items: usize,
    pub total_fails: usize,
    pub per_type: BTreeMap<QuestionType, TypeErrors>,
}

impl ErrorDistribution {
    /// Combined failure share of the given types; 0 when there are no fails.
    pub fn combined_share(&self, types: &[QuestionType]) -> f64 {
        let set: BTreeSet<_> = types.iter().collect();
        let fails: usize = self
            .per_type
            .iter()
            .filter(|(t, _)| set.contains(t))
            .map(|(_, e)| e.fails)
            .sum();
        ratio(fails, self.total_fails)
    }
}

/// Failure histogram by question type plus mean confidence per type.
pub fn error_distribution(triaged: &[(&Sample, TriageClass, f64)]) -> ErrorDistribution {
    let mut groups: BTreeMap<QuestionType, (usize, Vec<f64>)> = BTreeMap::new();
    for (s, class, p) in triaged {
        let g = groups.entry(s.question_type).or_default();
        if *class == TriageClass::Fail {
            g.0 += 1;
        }
        g.1.push(*p);
    }
    let total_fails = groups.values().map(|g| g.0).sum();
    let per_type = groups
        .into_iter()
        .map(|(t, (fails, mut ps))| {
            ps.sort_by(f64::total_cmp);
            let mean = neumaier_sum(&ps) / ps.len() as f64;
            (
                t,
                TypeErrors {
                    items: ps.len(),
                    fails,
                    share: ratio(fails, total_fails),
                    mean_logprob: mean,
                },
            )
        })
        .collect();
    ErrorDistribution {
        total_items: triaged.len(),
        total_fails,
        per_type,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl GroupAccuracy {
    fn new(correct: usize, total: usize) -> Self {
        GroupAccuracy {
            correct,
            total,
            accuracy: ratio(correct, total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: GroupAccuracy,
    pub per_question_type: BTreeMap<QuestionType, GroupAccuracy>,
    pub per_answer_type: BTreeMap<AnswerType, GroupAccuracy>,
    pub micro: MicroF1,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<[f64; 4]>,
}

/// Scores predictions against the dataset. Every prediction must name a
/// known sample; samples without a prediction are not counted.
pub fn evaluate(
    samples: &SampleSet,
    preds: &[PredictionRecord],
    with_bleu: bool,
) -> Result<EvalReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut qt: BTreeMap<QuestionType, (usize, usize)> = BTreeMap::new();
    let mut at: BTreeMap<AnswerType, (usize, usize)> = BTreeMap::new();
    let mut f1_items = Vec::with_capacity(preds.len());
    let mut bleu_scores: [Vec<f64>; 4] = Default::default();
    let mut correct = 0;
    for p in preds {
        let s = samples
            .get(&p.sample_id)
            .ok_or_else(|| MetricsError::UnknownSample(p.sample_id.clone()))?;
        let ok = answer_matches(&p.predicted_answer, &s.answer);
        correct += usize::from(ok);
        for (c, t) in [
            qt.entry(s.question_type).or_default(),
            at.entry(s.answer_type).or_default(),
        ]
        .into_iter()
        .map(|e| (&mut e.0, &mut e.1))
        {
            *c += usize::from(ok);
            *t += 1;
        }
        f1_items.push((s.answer.clone(), split_answer(&p.predicted_answer)));
        if with_bleu {
            let pred_tokens = tokenize(&p.predicted_answer);
            let refs = vec![tokenize(&s.answer_text())];
            for (n, out) in bleu_scores.iter_mut().enumerate() {
                // an empty prediction earns nothing rather than aborting the report
                let score = if pred_tokens.is_empty() {
                    0.0
                } else {
                    bleu_n(&pred_tokens, &refs, n + 1)?
                };
                out.push(score);
            }
        }
    }
    let bleu = with_bleu.then(|| {
        bleu_scores.map(|mut v| {
            v.sort_by(f64::total_cmp);
            neumaier_sum(&v) / v.len() as f64
        })
    });
    Ok(EvalReport {
        overall: GroupAccuracy::new(correct, preds.len()),
        per_question_type: qt.into_iter().map(|(k, (c, t))| (k, GroupAccuracy::new(c, t))).collect(),
        per_answer_type: at.into_iter().map(|(k, (c, t))| (k, GroupAccuracy::new(c, t))).collect(),
        micro: micro_f1(&f1_items)?,
        bleu,
    })
}

impl EvalReport {
    /// Aligned plain-text table: one row per group, accuracy in percent.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, GroupAccuracy)> = Vec::new();
        for (k, v) in &self.per_question_type {
            rows.push((k.as_str().to_string(), *v));
        }
        for (k, v) in &self.per_answer_type {
            rows.push((k.as_str().to_string(), *v));
        }
        rows.push(("overall".to_string(), self.overall));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>8}", "category", "correct", "total", "acc(%)");
        for (name, g) in &rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>8.2}",
                name,
                g.correct,
                g.total,
                100.0 * g.accuracy
            );
        }
        let _ = writeln!(
            out,
            "micro P/R/F1: {:.4} / {:.4} / {:.4}",
            self.micro.precision, self.micro.recall, self.micro.f1
        );
        if let Some(b) = self.bleu {
            let _ = writeln!(out, "BLEU-1..4: {:.4} {:.4} {:.4} {:.4}", b[0], b[1], b[2], b[3]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Split;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn sample(id: &str, qt: QuestionType, answer: &str) -> Sample {
        Sample {
            id: id.into(),
            image_ids: vec!["img".into()],
            question: "q?".into(),
            answer: vec![answer.into()],
            explanation: String::new(),
            question_type: qt,
            answer_type: AnswerType::Open,
            split: Split::Test,
        }
    }

    #[test]
    fn accuracy_examples() {
        let a = sample("a", QuestionType::Anatomy, "left lung");
        let b = sample("b", QuestionType::Anatomy, "right lung");
        assert_eq!(strict_accuracy(&[(&a, "Left  Lung"), (&b, "right lung")]).unwrap(), 1.0);
        assert_eq!(strict_accuracy(&[(&a, "left lung"), (&b, "left lung")]).unwrap(), 0.5);
        assert_eq!(strict_accuracy::<&str>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn micro_f1_examples() {
        let m = micro_f1(&[(vec!["a", "b"], vec!["a"])]).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let m = micro_f1(&[(vec!["a"], vec!["a"]), (vec!["b", "c"], vec!["C", "b"])]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = micro_f1(&[(vec!["a"], vec!["b"])]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bleu_examples() {
        let p = toks("a b c");
        assert!((bleu_n(&p, &[toks("a b d")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // exp(1 - 4), evaluated at 40 digits: 0.0497870683678639...
        let s = bleu_n(&toks("a"), &[toks("a b b b")], 1).unwrap();
        assert!((s - 0.049_787_068_367_863_94).abs() < 1e-15);
        for n in 1..=4 {
            assert_eq!(bleu_n(&p, std::slice::from_ref(&p), n).unwrap(), 1.0);
        }
        // no shared bigram
        assert_eq!(bleu_n(&toks("a c b"), &[toks("a b c")], 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_tokens() {
        let s = bleu_n(&toks("the the the the"), &[toks("the cat")], 1).unwrap();
        // clipped 1/4, brevity penalty 1 since c > r
        assert!((s - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bleu_errors() {
        assert_eq!(bleu_n(&[], &[toks("a")], 1), Err(MetricsError::EmptyPrediction));
        assert_eq!(bleu_n(&toks("a"), &[toks("a")], 5), Err(MetricsError::InvalidOrder(5)));
        assert_eq!(bleu_n(&toks("a"), &[], 1), Err(MetricsError::EmptyReferences));
    }

    #[test]
    fn closest_reference_prefers_shorter_on_ties() {
        assert_eq!(closest_ref_len(3, &[toks("a b"), toks("a b c d")]), 2);
        assert_eq!(closest_ref_len(3, &[toks("a b c d"), toks("a b c")]), 3);
    }

    #[test]
    fn win_rate_examples() {
        let w = win_rate(&[true, false, true], &[false, false, true]).unwrap();
        assert_eq!(w.decisive, 1.0);
        assert!((w.raw - 1.0 / 3.0).abs() < 1e-15);
        let a = [true, false, true, false];
        assert_eq!(win_rate(&a, &a).unwrap().decisive, 0.5);
        assert_eq!(win_rate(&[true; 3], &[false; 3]).unwrap().decisive, 1.0);
        let b = [false, true, true, true];
        let ab = win_rate(&a, &b).unwrap().decisive;
        let ba = win_rate(&b, &a).unwrap().decisive;
        assert_eq!(ab + ba, 1.0);
        assert_eq!(
            win_rate(&[true], &[true, false]),
            Err(MetricsError::LengthMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn error_distribution_shares() {
        let mut items = Vec::new();
        let mut owned = Vec::new();
        for (i, qt) in [QuestionType::Abnormality; 7]
            .into_iter()
            .chain([QuestionType::Anatomy; 2])
            .chain([QuestionType::Plane])
            .enumerate()
        {
            owned.push(sample(&format!("s{i}"), qt, "x"));
        }
        owned.push(sample("ok", QuestionType::Gender, "male"));
        for s in &owned[..10] {
            items.push((s, TriageClass::Fail, -1.0));
        }
        items.push((&owned[10], TriageClass::ConfidentCorrect, -0.1));
        let d = error_distribution(&items);
        assert_eq!(d.total_fails, 10);
        assert_eq!(d.per_type[&QuestionType::Abnormality].share, 0.7);
        assert_eq!(d.per_type[&QuestionType::Anatomy].share, 0.2);
        assert_eq!(d.per_type[&QuestionType::Plane].share, 0.1);
        assert_eq!(d.per_type[&QuestionType::Gender].share, 0.0);
        assert_eq!(d.per_type[&QuestionType::Gender].mean_logprob, -0.1);
        let total: f64 = d.per_type.values().map(|e| e.share).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(d.combined_share(&[QuestionType::Abnormality, QuestionType::Anatomy]), 0.9);
    }

    #[test]
    fn no_failures_gives_empty_histogram() {
        let s = sample("a", QuestionType::Size, "small");
        let d = error_distribution(&[(&s, TriageClass::ConfidentCorrect, -0.01)]);
        assert_eq!(d.total_fails, 0);
        assert_eq!(d.combined_share(&[QuestionType::Size]), 0.0);
    }

    #[test]
    fn report_counts_add_up() {
        let set = SampleSet::new(vec![
            sample("a", QuestionType::Anatomy, "left lung"),
            sample("b", QuestionType::Severity, "mild"),
            sample("c", QuestionType::Severity, "severe"),
        ])
        .unwrap();
        let pred = |id: &str, ans: &str| PredictionRecord {
            sample_id: id.into(),
            predicted_answer: ans.into(),
            explanation: String::new(),
            answer_token_logprobs: vec![-0.1],
            model_id: String::new(),
        };
        let preds = vec![pred("a", "left lung"), pred("b", "mild"), pred("c", "mild")];
        let r = evaluate(&set, &preds, true).unwrap();
        assert_eq!(r.overall.correct, 2);
        let per_qt: usize = r.per_question_type.values().map(|g| g.total).sum();
        let per_at: usize = r.per_answer_type.values().map(|g| g.total).sum();
        assert_eq!(per_qt, r.overall.total);
        assert_eq!(per_at, r.overall.total);
        // single-valued answers: accuracy equals micro recall
        assert_eq!(r.overall.accuracy, r.micro.recall);
        let table = r.to_table();
        assert!(table.contains("overall"));
        assert!(table.contains("66.67"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_question_type"]["severity"]["correct"], 1);

        let unknown = vec![pred("zzz", "x")];
        assert_eq!(evaluate(&set, &unknown, false), Err(MetricsError::UnknownSample("zzz".into())));
    }
}
