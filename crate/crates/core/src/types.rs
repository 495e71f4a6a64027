//! Domain types shared by every stage of the pipeline.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::counterfactual::SubstitutionStrategy;
use crate::text::{compose_rationale, join_answer, normalize};

/// The ten question categories of the chest X-ray VQA corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Presence,
    Abnormality,
    Anatomy,
    Severity,
    Plane,
    Type,
    Difference,
    Attribute,
    Size,
    Gender,
}

impl QuestionType {
    /// All variants in declaration order.
    pub const ALL: [QuestionType; 10] = [
        QuestionType::Presence,
        QuestionType::Abnormality,
        QuestionType::Anatomy,
        QuestionType::Severity,
        QuestionType::Plane,
        QuestionType::Type,
        QuestionType::Difference,
        QuestionType::Attribute,
        QuestionType::Size,
        QuestionType::Gender,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Presence => "presence",
            QuestionType::Abnormality => "abnormality",
            QuestionType::Anatomy => "anatomy",
            QuestionType::Severity => "severity",
            QuestionType::Plane => "plane",
            QuestionType::Type => "type",
            QuestionType::Difference => "difference",
            QuestionType::Attribute => "attribute",
            QuestionType::Size => "size",
            QuestionType::Gender => "gender",
        }
    }

    /// Parses a canonical name or one of the merged source-dataset labels
    /// (`view` → plane, `location` → anatomy, `level` → severity).
    pub fn parse_with_aliases(name: &str) -> Option<QuestionType> {
        if let Ok(q) = name.parse() {
            return Some(q);
        }
        match normalize(name).as_str() {
            "view" => Some(QuestionType::Plane),
            "location" => Some(QuestionType::Anatomy),
            "level" => Some(QuestionType::Severity),
            _ => None,
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} {value:?}")]
pub struct ParseEnumError {
    kind: &'static str,
    value: String,
}

impl FromStr for QuestionType {
    type Err = ParseEnumError;

    /// Strict: only the ten canonical names (case-insensitive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = normalize(s);
        QuestionType::ALL
            .into_iter()
            .find(|q| q.as_str() == n)
            .ok_or_else(|| ParseEnumError {
                kind: "question type",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Open,
    Closed,
}

impl AnswerType {
    pub const ALL: [AnswerType; 2] = [AnswerType::Open, AnswerType::Closed];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Open => "open",
            AnswerType::Closed => "closed",
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerType {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize(s).as_str() {
            "open" => Ok(AnswerType::Open),
            "closed" => Ok(AnswerType::Closed),
            _ => Err(ParseEnumError {
                kind: "answer type",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize(s).as_str() {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(ParseEnumError {
                kind: "split",
                value: s.to_string(),
            }),
        }
    }
}

/// A sample record as it appears on disk, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub answer: Vec<String>,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub question_type: String,
    #[serde(default)]
    pub answer_type: String,
    #[serde(default)]
    pub split: String,
}

/// Stable violation codes reported by [`validate_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Violation {
    EmptyId,
    EmptyImageIds,
    EmptyQuestion,
    EmptyAnswer,
    EmptyAnswerElement,
    UnknownQuestionType,
    UnknownAnswerType,
    UnknownSplit,
    ClosedAnswerNotYesNo,
    DuplicateId,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::EmptyId => "empty-id",
            Violation::EmptyImageIds => "empty-image-ids",
            Violation::EmptyQuestion => "empty-question",
            Violation::EmptyAnswer => "empty-answer",
            Violation::EmptyAnswerElement => "empty-answer-element",
            Violation::UnknownQuestionType => "unknown-question-type",
            Violation::UnknownAnswerType => "unknown-answer-type",
            Violation::UnknownSplit => "unknown-split",
            Violation::ClosedAnswerNotYesNo => "closed-answer-not-yes-no",
            Violation::DuplicateId => "duplicate-id",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Checks every per-record sample invariant. Question types must use one of
/// the ten canonical names here; alias canonicalization happens in
/// [`RawSample::into_sample`].
pub fn validate_sample(raw: &RawSample) -> Vec<Violation> {
    raw.violations(false)
}

impl RawSample {
    fn violations(&self, allow_aliases: bool) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.id.trim().is_empty() {
            out.push(Violation::EmptyId);
        }
        if self.image_ids.is_empty() {
            out.push(Violation::EmptyImageIds);
        }
        if self.question.trim().is_empty() {
            out.push(Violation::EmptyQuestion);
        }
        if self.answer.is_empty() {
            out.push(Violation::EmptyAnswer);
        } else if self.answer.iter().any(|a| a.trim().is_empty()) {
            out.push(Violation::EmptyAnswerElement);
        }
        let qt = if allow_aliases {
            QuestionType::parse_with_aliases(&self.question_type)
        } else {
            self.question_type.parse::<QuestionType>().ok()
        };
        if qt.is_none() {
            out.push(Violation::UnknownQuestionType);
        }
        match self.answer_type.parse::<AnswerType>() {
            Ok(AnswerType::Closed) => {
                let empty = out.contains(&Violation::EmptyAnswer);
                if !empty && (self.answer.len() != 1 || !is_yes_no(&self.answer[0])) {
                    out.push(Violation::ClosedAnswerNotYesNo);
                }
            }
            Ok(AnswerType::Open) => {}
            Err(_) => out.push(Violation::UnknownAnswerType),
        }
        if self.split.parse::<Split>().is_err() {
            out.push(Violation::UnknownSplit);
        }
        out
    }

    /// Validates (with question-type aliases) and converts to a [`Sample`].
    pub fn into_sample(self) -> Result<Sample, Vec<Violation>> {
        let violations = self.violations(true);
        if !violations.is_empty() {
            return Err(violations);
        }
        Ok(Sample {
            question_type: QuestionType::parse_with_aliases(&self.question_type)
                .expect("validated"),
            answer_type: self.answer_type.parse().expect("validated"),
            split: self.split.parse().expect("validated"),
            id: self.id,
            image_ids: self.image_ids,
            question: self.question,
            answer: self.answer,
            explanation: self.explanation,
        })
    }
}

fn is_yes_no(answer: &str) -> bool {
    matches!(normalize(answer).as_str(), "yes" | "no")
}

/// One validated dataset record. The rationale is the joined answer followed
/// by the explanation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub id: String,
    pub image_ids: Vec<String>,
    pub question: String,
    pub answer: Vec<String>,
    pub explanation: String,
    pub question_type: QuestionType,
    pub answer_type: AnswerType,
    pub split: Split,
}

impl Sample {
    /// Display form of the gold answer (" and "-joined for multi-answers).
    pub fn answer_text(&self) -> String {
        join_answer(&self.answer)
    }

    /// Gold rationale: short answer followed by explanation.
    pub fn rationale(&self) -> String {
        compose_rationale(&self.answer_text(), &self.explanation)
    }

    pub fn stratum_key(&self) -> (QuestionType, AnswerType) {
        (self.question_type, self.answer_type)
    }
}

impl From<&Sample> for RawSample {
    fn from(s: &Sample) -> Self {
        RawSample {
            id: s.id.clone(),
            image_ids: s.image_ids.clone(),
            question: s.question.clone(),
            answer: s.answer.clone(),
            explanation: s.explanation.clone(),
            question_type: s.question_type.as_str().to_string(),
            answer_type: s.answer_type.as_str().to_string(),
            split: match s.split {
                Split::Train => "train",
                Split::Valid => "valid",
                Split::Test => "test",
            }
            .to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("duplicate sample id {id:?} at position {position}")]
pub struct DuplicateIdError {
    pub id: String,
    pub position: usize,
}

/// Ordered, id-indexed collection of samples.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl SampleSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self, DuplicateIdError> {
        let mut index = HashMap::with_capacity(samples.len());
        for (position, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), position).is_some() {
                return Err(DuplicateIdError {
                    id: s.id.clone(),
                    position,
                });
            }
        }
        Ok(SampleSet { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn as_slice(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// Sub-set keeping only samples matching `keep`, in the original order.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> SampleSet {
        let kept: Vec<Sample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        SampleSet::new(kept).expect("subset of unique ids")
    }

    pub fn into_vec(self) -> Vec<Sample> {
        self.samples
    }
}

impl<'a> IntoIterator for &'a SampleSet {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// One model response to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted_answer: String,
    #[serde(default)]
    pub explanation: String,
    pub answer_token_logprobs: Vec<f64>,
    #[serde(default)]
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionViolation {
    EmptyTokenList,
    PositiveLogprob,
    NonFiniteLogprob,
}

impl PredictionRecord {
    pub fn check(&self) -> Result<(), PredictionViolation> {
        if self.answer_token_logprobs.is_empty() {
            return Err(PredictionViolation::EmptyTokenList);
        }
        for &lp in &self.answer_token_logprobs {
            if !lp.is_finite() {
                return Err(PredictionViolation::NonFiniteLogprob);
            }
            if lp > 0.0 {
                return Err(PredictionViolation::PositiveLogprob);
            }
        }
        Ok(())
    }

    /// The model's full response: short answer followed by explanation.
    pub fn response(&self) -> String {
        compose_rationale(&self.predicted_answer, &self.explanation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    SftFail,
    Counterfactual,
}

/// Which pipeline wave produced a pair: the stratified sample or the
/// retrieved neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStage {
    Sample,
    Neighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub stage: PairStage,
    /// Length-normalized answer log-probability of the triaged prediction.
    pub logprob: f64,
    /// Short answer leading the chosen response.
    pub chosen_answer: String,
    /// Short answer leading the rejected response.
    pub rejected_answer: String,
    /// Hard query that retrieved this sample (neighbor wave only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substituted_category: Option<SubstitutionStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_term: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_term: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_score: Option<f64>,
}

impl PairMeta {
    pub fn new(stage: PairStage, logprob: f64, chosen_answer: String, rejected_answer: String) -> Self {
        PairMeta {
            stage,
            logprob,
            chosen_answer,
            rejected_answer,
            seed_id: None,
            combined_score: None,
            substituted_category: None,
            original_term: None,
            replacement_term: None,
            corrupted_answer: None,
            retrieved_id: None,
            retrieved_score: None,
        }
    }
}

/// A DPO training unit: context, chosen response, rejected response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub sample_id: String,
    pub image_ids: Vec<String>,
    pub question: String,
    pub chosen: String,
    pub rejected: String,
    pub source: PairSource,
    pub meta: PairMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairViolation {
    ChosenEqualsRejected,
    ChosenMissingAnswer,
    RejectedMissingAnswer,
    RejectedAnswerMatchesGold,
}

impl PairViolation {
    pub fn code(self) -> &'static str {
        match self {
            PairViolation::ChosenEqualsRejected => "chosen-equals-rejected",
            PairViolation::ChosenMissingAnswer => "chosen-missing-answer",
            PairViolation::RejectedMissingAnswer => "rejected-missing-answer",
            PairViolation::RejectedAnswerMatchesGold => "rejected-answer-matches-gold",
        }
    }
}

impl fmt::Display for PairViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl PreferencePair {
    /// Checks the pair invariants: distinct responses, each response led by
    /// its recorded short answer, and a rejected answer that fails strict
    /// matching against the chosen one.
    pub fn check(&self) -> Result<(), PairViolation> {
        let chosen = normalize(&self.chosen);
        let rejected = normalize(&self.rejected);
        if chosen == rejected {
            return Err(PairViolation::ChosenEqualsRejected);
        }
        if !chosen.starts_with(&normalize(&self.meta.chosen_answer)) {
            return Err(PairViolation::ChosenMissingAnswer);
        }
        if !rejected.starts_with(&normalize(&self.meta.rejected_answer)) {
            return Err(PairViolation::RejectedMissingAnswer);
        }
        let gold = crate::text::split_answer(&self.meta.chosen_answer);
        if crate::confidence::answer_matches(&self.meta.rejected_answer, &gold) {
            return Err(PairViolation::RejectedAnswerMatchesGold);
        }
        Ok(())
    }
}
