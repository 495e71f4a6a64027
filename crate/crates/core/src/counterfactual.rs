//! Rejected-response construction.
//!
//! Failed predictions are rejected as-is. For correct but low-confidence
//! predictions the short answer is corrupted (pool substitution, opposite
//! answer, or a different answer of the same type), the corrupted answer is
//! re-attached to the model's explanation, and the closest existing rationale
//! from the remaining data becomes the rejected response. The rejected text is
//! therefore always a coherent rationale with a clinically wrong answer.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::confidence::{answer_matches, TriageClass};
use crate::embed::{EmbedError, TextEmbedder};
use crate::interchange::{EmbeddingSet, PoolKind, RejectionPools};
use crate::retrieval::{top1_filtered, RetrievalError};
use crate::rng::{item_rng, Rng};
use crate::text::{compose_rationale, normalize};
use crate::types::{
    AnswerType, PairMeta, PairSource, PairStage, PairViolation, PredictionRecord, PreferencePair,
    QuestionType, Sample, SampleSet,
};

#[derive(Debug, thiserror::Error)]
pub enum CounterfactualError {
    #[error("{term:?} is not in the {pool:?} pool")]
    TermNotInPool { term: String, pool: PoolKind },
    #[error("fewer than two distinct {0} answers to sample from")]
    VocabTooSmall(QuestionType),
    #[error("{0:?} has no opposite")]
    NotInOpposites(String),
    #[error("gallery has no rationale for {0:?}")]
    MissingSample(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionStrategy {
    PoolAnatomy,
    PoolAbnormality,
    PoolSeverity,
    Opposite,
    SameTypeRandom,
}

/// Default corruption strategy for a question type.
pub fn classify_substitution(q: QuestionType) -> SubstitutionStrategy {
    match q {
        QuestionType::Anatomy => SubstitutionStrategy::PoolAnatomy,
        QuestionType::Abnormality | QuestionType::Presence => SubstitutionStrategy::PoolAbnormality,
        QuestionType::Severity => SubstitutionStrategy::PoolSeverity,
        QuestionType::Gender | QuestionType::Plane => SubstitutionStrategy::Opposite,
        QuestionType::Size
        | QuestionType::Type
        | QuestionType::Attribute
        | QuestionType::Difference => SubstitutionStrategy::SameTypeRandom,
    }
}

/// Strategy for a concrete sample: closed (yes/no) answers are flipped when
/// `closed_flip` is set, everything else follows the question type.
pub fn resolve_strategy(
    q: QuestionType,
    answer_type: AnswerType,
    closed_flip: bool,
) -> SubstitutionStrategy {
    if closed_flip && answer_type == AnswerType::Closed {
        SubstitutionStrategy::Opposite
    } else {
        classify_substitution(q)
    }
}

/// Distinct normalized answers observed per question type, sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerVocab(BTreeMap<QuestionType, Vec<String>>);

impl AnswerVocab {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut map: BTreeMap<QuestionType, BTreeSet<String>> = BTreeMap::new();
        for s in samples {
            map.entry(s.question_type)
                .or_default()
                .insert(normalize(&s.answer_text()));
        }
        AnswerVocab(map.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
    }

    pub fn answers(&self, q: QuestionType) -> &[String] {
        self.0.get(&q).map_or(&[], Vec::as_slice)
    }
}

/// Result of corrupting one short answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Substitution {
    pub strategy: SubstitutionStrategy,
    /// The corrupted short answer.
    pub text: String,
    /// Term that was replaced (the whole answer unless a pool term was found
    /// inside a longer phrase).
    pub original_term: String,
    pub replacement_term: String,
}

fn pool_kind(strategy: SubstitutionStrategy) -> Option<PoolKind> {
    match strategy {
        SubstitutionStrategy::PoolAnatomy => Some(PoolKind::Anatomy),
        SubstitutionStrategy::PoolAbnormality => Some(PoolKind::Abnormality),
        SubstitutionStrategy::PoolSeverity => Some(PoolKind::Severity),
        _ => None,
    }
}

/// Byte offset of `needle` in `hay` where it starts and ends on word
/// boundaries.
fn find_word_span(hay: &str, needle: &str) -> Option<usize> {
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    hay.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        !is_word(before) && !is_word(after)
    })
}

fn pick_other<'a>(group: &'a [String], own: &str, rng: &mut Rng) -> &'a String {
    let others: Vec<&String> = group.iter().filter(|t| normalize(t) != own).collect();
    others[rng.gen_range(0..others.len())]
}

fn substitute_from_pool(
    answer: &str,
    kind: PoolKind,
    strategy: SubstitutionStrategy,
    pools: &RejectionPools,
    rng: &mut Rng,
) -> Result<Substitution, CounterfactualError> {
    let norm = normalize(answer);
    let groups = pools.groups(kind);
    if let Some(group) = groups.iter().find(|g| g.iter().any(|t| normalize(t) == norm)) {
        let replacement = pick_other(group, &norm, rng);
        return Ok(Substitution {
            strategy,
            text: replacement.clone(),
            original_term: norm,
            replacement_term: replacement.clone(),
        });
    }
    // longest pool term inside the answer; first group wins among equals
    let mut best: Option<(usize, String, usize)> = None;
    for (gi, group) in groups.iter().enumerate() {
        for term in group {
            let t = normalize(term);
            if best.as_ref().is_some_and(|(_, b, _)| b.len() >= t.len()) {
                continue;
            }
            if let Some(pos) = find_word_span(&norm, &t) {
                best = Some((gi, t, pos));
            }
        }
    }
    let (gi, term, pos) = best.ok_or_else(|| CounterfactualError::TermNotInPool {
        term: answer.to_string(),
        pool: kind,
    })?;
    let replacement = pick_other(&groups[gi], &term, rng);
    let text = format!("{}{}{}", &norm[..pos], replacement, &norm[pos + term.len()..]);
    Ok(Substitution {
        strategy,
        text,
        original_term: term,
        replacement_term: replacement.clone(),
    })
}

/// Opposite of a yes/no, gender or plane answer.
pub fn opposite_of(answer: &str, q: QuestionType, pools: &RejectionPools) -> Option<String> {
    let norm = normalize(answer);
    match norm.as_str() {
        "yes" => return Some("no".into()),
        "no" => return Some("yes".into()),
        _ => {}
    }
    let maps = match q {
        QuestionType::Gender => vec![&pools.opposites.gender],
        QuestionType::Plane => vec![&pools.opposites.plane],
        _ => vec![&pools.opposites.gender, &pools.opposites.plane],
    };
    maps.into_iter().find_map(|m| {
        m.iter()
            .find(|(k, _)| normalize(k) == norm)
            .map(|(_, v)| v.clone())
    })
}

/// Corrupts a short answer with the given strategy.
pub fn substitute_answer(
    answer: &str,
    strategy: SubstitutionStrategy,
    question_type: QuestionType,
    pools: &RejectionPools,
    vocab: &AnswerVocab,
    rng: &mut Rng,
) -> Result<Substitution, CounterfactualError> {
    if let Some(kind) = pool_kind(strategy) {
        return substitute_from_pool(answer, kind, strategy, pools, rng);
    }
    let norm = normalize(answer);
    match strategy {
        SubstitutionStrategy::Opposite => {
            let opp = opposite_of(answer, question_type, pools)
                .ok_or_else(|| CounterfactualError::NotInOpposites(answer.to_string()))?;
            Ok(Substitution {
                strategy,
                text: opp.clone(),
                original_term: norm,
                replacement_term: opp,
            })
        }
        SubstitutionStrategy::SameTypeRandom => {
            let answers = vocab.answers(question_type);
            if answers.len() < 2 {
                return Err(CounterfactualError::VocabTooSmall(question_type));
            }
            let others: Vec<&String> = answers.iter().filter(|a| **a != norm).collect();
            let pick = others[rng.gen_range(0..others.len())].clone();
            Ok(Substitution {
                strategy,
                text: pick.clone(),
                original_term: norm,
                replacement_term: pick,
            })
        }
        _ => unreachable!("pool strategies handled above"),
    }
}

/// Shared, read-only inputs for rejection synthesis.
pub struct CounterfactualContext<'a> {
    pub pools: &'a RejectionPools,
    pub vocab: &'a AnswerVocab,
    pub closed_flip: bool,
    /// Rationale embeddings; rows outside `allowed` are never retrieved.
    pub rationale_embeddings: &'a EmbeddingSet,
    /// Dataset used to look up retrieved rationales.
    pub samples: &'a SampleSet,
    /// Ids eligible as contrastive candidates (the remaining data).
    pub allowed: &'a HashSet<String>,
    pub embedder: &'a dyn TextEmbedder,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualRejection {
    pub rejected: String,
    pub rejected_answer: String,
    pub substitution: Substitution,
    pub corrupted_text: String,
    pub retrieved_id: String,
    pub retrieved_score: f64,
}

/// Corrupts the prediction's answer, embeds `[corrupted answer; explanation]`
/// and returns the closest allowed rationale whose answer differs from the
/// gold answer.
pub fn build_counterfactual_rejection(
    pred: &PredictionRecord,
    sample: &Sample,
    ctx: &CounterfactualContext,
) -> Result<CounterfactualRejection, CounterfactualError> {
    let strategy = resolve_strategy(sample.question_type, sample.answer_type, ctx.closed_flip);
    let mut rng = item_rng(ctx.seed, &sample.id);
    let substitution = substitute_answer(
        &pred.predicted_answer,
        strategy,
        sample.question_type,
        ctx.pools,
        ctx.vocab,
        &mut rng,
    )?;
    let corrupted_text = compose_rationale(&substitution.text, &pred.explanation);
    let query = ctx.embedder.embed(&corrupted_text)?;
    let (retrieved_id, retrieved_score) =
        top1_filtered(&query, ctx.rationale_embeddings, |id| {
            id != sample.id
                && ctx.allowed.contains(id)
                && ctx
                    .samples
                    .get(id)
                    .is_some_and(|s| !answer_matches(&s.answer_text(), &sample.answer))
        })?;
    let retrieved = ctx
        .samples
        .get(&retrieved_id)
        .ok_or_else(|| CounterfactualError::MissingSample(retrieved_id.clone()))?;
    Ok(CounterfactualRejection {
        rejected: retrieved.rationale(),
        rejected_answer: retrieved.answer_text(),
        substitution,
        corrupted_text,
        retrieved_id,
        retrieved_score,
    })
}

/// Result of trying to turn one triaged prediction into a pair.
#[derive(Debug)]
pub enum PairOutcome {
    Emitted(Box<PreferencePair>),
    /// Confident correct predictions produce no pair.
    NotHard,
    /// Degenerate pair that failed its invariants.
    Skipped(PairViolation),
}

/// Builds the preference pair for one triaged prediction. `counterfactual`
/// is only called for low-confidence correct predictions.
pub fn assemble_pair(
    sample: &Sample,
    pred: &PredictionRecord,
    class: TriageClass,
    logprob: f64,
    stage: PairStage,
    counterfactual: impl FnOnce() -> Result<CounterfactualRejection, CounterfactualError>,
) -> Result<PairOutcome, CounterfactualError> {
    let chosen = sample.rationale();
    let chosen_answer = sample.answer_text();
    let (rejected, source, meta) = match class {
        TriageClass::ConfidentCorrect => return Ok(PairOutcome::NotHard),
        TriageClass::Fail => {
            let meta = PairMeta::new(stage, logprob, chosen_answer, pred.predicted_answer.clone());
            (pred.response(), PairSource::SftFail, meta)
        }
        TriageClass::LowConfCorrect => {
            let cf = counterfactual()?;
            let mut meta = PairMeta::new(stage, logprob, chosen_answer, cf.rejected_answer);
            meta.substituted_category = Some(cf.substitution.strategy);
            meta.original_term = Some(cf.substitution.original_term);
            meta.replacement_term = Some(cf.substitution.replacement_term);
            meta.corrupted_answer = Some(cf.substitution.text);
            meta.retrieved_id = Some(cf.retrieved_id);
            meta.retrieved_score = Some(cf.retrieved_score);
            (cf.rejected, PairSource::Counterfactual, meta)
        }
    };
    let pair = PreferencePair {
        sample_id: sample.id.clone(),
        image_ids: sample.image_ids.clone(),
        question: sample.question.clone(),
        chosen,
        rejected,
        source,
        meta,
    };
    match pair.check() {
        Ok(()) => Ok(PairOutcome::Emitted(Box::new(pair))),
        Err(v) => {
            log::warn!("skipping pair for {}: {v}", sample.id);
            Ok(PairOutcome::Skipped(v))
        }
    }
}
