//! Answer-segment confidence and prediction triage.
//!
//! A prediction is scored by the mean per-token log-probability of its short
//! answer. Wrong answers are failures regardless of score; correct answers
//! below the threshold are low-confidence and get a synthesized rejection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::text::{join_answer, normalize, split_answer};
use crate::types::{PredictionRecord, Sample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfidenceError {
    #[error("empty token log-prob list")]
    EmptyInput,
    #[error("non-finite token log-prob at position {0}")]
    NonFiniteEntry(usize),
    #[error("positive token log-prob {value} at position {index}")]
    PositiveEntry { index: usize, value: f64 },
    #[error("prediction for {prediction:?} does not belong to sample {sample:?}")]
    IdMismatch { sample: String, prediction: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageClass {
    Fail,
    LowConfCorrect,
    ConfidentCorrect,
}

impl TriageClass {
    /// Fail and LowConfCorrect are hard examples.
    pub fn is_hard(self) -> bool {
        !matches!(self, TriageClass::ConfidentCorrect)
    }
}

/// Mean of the answer-token log-probabilities.
pub fn length_normalized_logprob(token_logprobs: &[f64]) -> Result<f64, ConfidenceError> {
    if token_logprobs.is_empty() {
        return Err(ConfidenceError::EmptyInput);
    }
    for (index, &value) in token_logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(ConfidenceError::NonFiniteEntry(index));
        }
        if value > 0.0 {
            return Err(ConfidenceError::PositiveEntry { index, value });
        }
    }
    let mut sorted = token_logprobs.to_vec();
    // summing in a fixed order keeps the mean permutation-invariant bit for bit
    sorted.sort_by(f64::total_cmp);
    let sum = neumaier_sum(&sorted);
    Ok((sum / token_logprobs.len() as f64).min(0.0))
}

pub(crate) fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Strict answer match after normalization. Multi-valued gold answers match
/// either their " and "-joined form or, order-insensitively, the same set of
/// elements.
pub fn answer_matches<S: AsRef<str>>(predicted: &str, gold: &[S]) -> bool {
    if gold.is_empty() {
        return false;
    }
    let pred_norm = normalize(predicted);
    if pred_norm == normalize(&join_answer(gold)) {
        return true;
    }
    let pred_set: BTreeSet<String> = split_answer(predicted).into_iter().collect();
    let gold_set: BTreeSet<String> = gold.iter().map(|g| normalize(g.as_ref())).collect();
    !pred_set.is_empty() && pred_set == gold_set
}

/// Classifies one prediction; returns the class and its confidence score.
/// A score exactly equal to `sigma` counts as confident.
pub fn triage(
    sample: &Sample,
    pred: &PredictionRecord,
    sigma: f64,
) -> Result<(TriageClass, f64), ConfidenceError> {
    if pred.sample_id != sample.id {
        return Err(ConfidenceError::IdMismatch {
            sample: sample.id.clone(),
            prediction: pred.sample_id.clone(),
        });
    }
    let p = length_normalized_logprob(&pred.answer_token_logprobs)?;
    let class = if !answer_matches(&pred.predicted_answer, &sample.answer) {
        TriageClass::Fail
    } else if p < sigma {
        TriageClass::LowConfCorrect
    } else {
        TriageClass::ConfidentCorrect
    };
    Ok((class, p))
}
