//! Deterministic synthetic corpora for tests, benchmarks and demos.
//!
//! Samples follow the ten question categories with answers drawn from the
//! built-in rejection pools where a category has one. Every (category,
//! answer) pair gets a hashed difficulty and an image centroid, so samples
//! that look alike also fail alike. That is the structure neighbor mining
//! relies on.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;

use crate::config::{PipelineConfig, PipelinePaths};
use crate::embed::{HashEmbedder, DEFAULT_HASH_SEED};
use crate::interchange::{
    write_predictions, write_samples, EmbeddingBundle, EmbeddingSet, InterchangeError, Modality,
    RejectionPools,
};
use crate::pipeline::PipelineInputs;
use crate::rng::{item_rng, Rng};
use crate::types::{AnswerType, PredictionRecord, QuestionType, Sample, SampleSet, Split};

/// Seed offset for question embeddings, so they differ from rationale ones.
const QUESTION_EMBED_SEED: u64 = 0x51;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub seed: u64,
    pub dim: usize,
    pub train_fraction: f64,
    /// Mean failure probability before per-answer difficulty is applied.
    pub fail_rate: f64,
    /// Probability that a correct prediction is low-confidence.
    pub low_conf_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            samples: 1000,
            seed: 7,
            dim: 32,
            train_fraction: 0.8,
            fail_rate: 0.2,
            low_conf_rate: 0.2,
        }
    }
}

const ABNORMALITIES: [&str; 10] = [
    "pneumonia",
    "pulmonary edema",
    "atelectasis",
    "pneumothorax",
    "consolidation",
    "pleural effusion",
    "cardiomegaly",
    "lung nodule",
    "emphysema",
    "fracture",
];

const LOCATIONS: [&str; 9] = [
    "left lung",
    "right lung",
    "left upper lobe",
    "right upper lobe",
    "left lower lobe",
    "right lower lobe",
    "right middle lobe",
    "left costophrenic angle",
    "right costophrenic angle",
];

/// Category mix, in per-mille.
const MIX: [(QuestionType, u32); 10] = [
    (QuestionType::Presence, 200),
    (QuestionType::Abnormality, 150),
    (QuestionType::Anatomy, 150),
    (QuestionType::Severity, 100),
    (QuestionType::Plane, 80),
    (QuestionType::Gender, 70),
    (QuestionType::Size, 70),
    (QuestionType::Type, 60),
    (QuestionType::Attribute, 60),
    (QuestionType::Difference, 60),
];

fn answers_for(q: QuestionType) -> &'static [&'static str] {
    match q {
        QuestionType::Presence => &["yes", "no"],
        QuestionType::Abnormality => &ABNORMALITIES,
        QuestionType::Anatomy => &LOCATIONS,
        QuestionType::Severity => &["mild", "moderate", "severe"],
        QuestionType::Plane => &["ap view", "pa view", "lateral view"],
        QuestionType::Gender => &["female", "male"],
        QuestionType::Size => &["small", "medium", "large"],
        QuestionType::Type => &["lobar", "interstitial", "alveolar"],
        QuestionType::Attribute => &["patchy", "diffuse", "focal"],
        QuestionType::Difference => &["increased", "decreased", "unchanged"],
    }
}

/// Failure multiplier: localisation, finding and grading questions are the
/// hard ones.
fn type_difficulty(q: QuestionType) -> f64 {
    match q {
        QuestionType::Abnormality | QuestionType::Anatomy | QuestionType::Severity => 2.0,
        _ => 0.5,
    }
}

fn question_and_explanation(q: QuestionType, answer: &str, finding: &str) -> (String, String) {
    match q {
        QuestionType::Presence => (
            format!("Is there evidence of {finding}?"),
            if answer == "yes" {
                format!("Findings consistent with {finding} are visible.")
            } else {
                format!("No sign of {finding} is seen.")
            },
        ),
        QuestionType::Abnormality => (
            "What abnormality is seen in the image?".into(),
            format!("The image shows findings consistent with {answer}."),
        ),
        QuestionType::Anatomy => (
            format!("Where is the {finding} located?"),
            format!("The abnormality projects over the {answer}."),
        ),
        QuestionType::Severity => (
            format!("How severe is the {finding}?"),
            format!("The {finding} appears {answer} in extent."),
        ),
        QuestionType::Plane => (
            "Which view is this image taken in?".into(),
            format!("The projection is consistent with {answer}."),
        ),
        QuestionType::Gender => (
            "What is the gender of the patient?".into(),
            if answer == "female" {
                "Breast shadows are visible over the lower chest.".into()
            } else {
                "No breast shadows are visible over the lower chest.".into()
            },
        ),
        QuestionType::Size => (
            format!("What is the size of the {finding}?"),
            format!("The {finding} is {answer} relative to the lung field."),
        ),
        QuestionType::Type => (
            format!("What type of {finding} is present?"),
            format!("The pattern suggests a {answer} process."),
        ),
        QuestionType::Attribute => (
            "What is the attribute of the opacity?".into(),
            format!("The opacity looks {answer}."),
        ),
        QuestionType::Difference => (
            "What has changed compared with the prior image?".into(),
            format!("The {finding} has {answer} since the prior study."),
        ),
    }
}

fn pick_type(rng: &mut Rng) -> QuestionType {
    let mut roll = rng.gen_range(0..1000u32);
    for (q, w) in MIX {
        if roll < w {
            return q;
        }
        roll -= w;
    }
    unreachable!("mix sums to 1000")
}

fn pick<'a>(items: &[&'a str], rng: &mut Rng) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn random_vec(rng: &mut Rng, dim: usize, scale: f32) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
}

fn jitter(center: &[f32], rng: &mut Rng, noise: f32) -> Vec<f32> {
    let mut v: Vec<f32> = center.iter().map(|&c| c + rng.gen_range(-1.0f32..1.0) * noise).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    v
}

/// Difficulty in [0, 1] of one (category, answer) pair.
fn difficulty(seed: u64, q: QuestionType, answer: &str) -> f64 {
    item_rng(seed, &format!("difficulty:{q}:{answer}")).gen_range(0.0..1.0)
}

fn token_logprobs(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub samples: SampleSet,
    pub embeddings: EmbeddingBundle,
    /// One prediction per sample, in sample order.
    pub predictions: Vec<PredictionRecord>,
}

impl SyntheticData {
    pub fn generate(config: &SyntheticConfig) -> Self {
        assert!(config.dim > 0, "dim must be positive");
        let seed = config.seed;
        let mut samples = Vec::with_capacity(config.samples);
        let mut predictions = Vec::with_capacity(config.samples);
        let mut q_rows = Vec::with_capacity(config.samples);
        let mut t_rows = Vec::with_capacity(config.samples);
        let mut v_rows = Vec::with_capacity(config.samples);
        let q_embed = HashEmbedder::new(config.dim, QUESTION_EMBED_SEED);
        let t_embed = HashEmbedder::new(config.dim, DEFAULT_HASH_SEED);

        for i in 0..config.samples {
            let id = format!("s{i:06}");
            let mut rng = item_rng(seed, &format!("sample:{id}"));
            let q = pick_type(&mut rng);
            let finding = pick(&ABNORMALITIES[..8], &mut rng);
            let answer = pick(answers_for(q), &mut rng);
            let (question, explanation) = question_and_explanation(q, answer, finding);
            let answer_type = if q == QuestionType::Presence {
                AnswerType::Closed
            } else {
                AnswerType::Open
            };
            let roll: f64 = rng.gen_range(0.0..1.0);
            let split = if roll < config.train_fraction {
                Split::Train
            } else if roll < config.train_fraction + (1.0 - config.train_fraction) / 2.0 {
                Split::Valid
            } else {
                Split::Test
            };
            let sample = Sample {
                id: id.clone(),
                image_ids: vec![format!("img{i:06}")],
                question,
                answer: vec![answer.to_string()],
                explanation,
                question_type: q,
                answer_type,
                split,
            };

            // prediction
            let d = difficulty(seed, q, answer);
            let p_fail = (config.fail_rate * type_difficulty(q) * 2.0 * d).min(0.95);
            let fails = rng.gen_range(0.0..1.0) < p_fail;
            let (predicted, logprobs) = if fails {
                let others: Vec<&str> = answers_for(q).iter().copied().filter(|a| *a != answer).collect();
                let wrong = pick(&others, &mut rng);
                let n = wrong.split_whitespace().count();
                (wrong, token_logprobs(&mut rng, n, -2.0, -0.05))
            } else {
                let n = answer.split_whitespace().count();
                let lp = if rng.gen_range(0.0..1.0) < config.low_conf_rate {
                    token_logprobs(&mut rng, n, -1.5, -0.35)
                } else {
                    token_logprobs(&mut rng, n, -0.25, -0.005)
                };
                (answer, lp)
            };
            let (_, pred_expl) = question_and_explanation(q, predicted, finding);
            predictions.push(PredictionRecord {
                sample_id: id.clone(),
                predicted_answer: predicted.to_string(),
                explanation: pred_expl,
                answer_token_logprobs: logprobs,
                model_id: "synthetic".into(),
            });

            // embeddings
            let mut centroid_rng = item_rng(seed, &format!("centroid:{q}:{answer}"));
            let centroid = random_vec(&mut centroid_rng, config.dim, 1.0);
            v_rows.push((id.clone(), jitter(&centroid, &mut rng, 0.6)));
            q_rows.push((id.clone(), q_embed.embed_text(&sample.question)));
            t_rows.push((id.clone(), t_embed.embed_text(&sample.rationale())));
            samples.push(sample);
        }

        let set = |m, rows| EmbeddingSet::from_rows(m, rows).expect("synthetic rows are well formed");
        let embeddings = EmbeddingBundle {
            question: set(Modality::Question, q_rows),
            rationale: set(Modality::Rationale, t_rows),
            image: set(Modality::Image, v_rows),
        };
        SyntheticData {
            config: config.clone(),
            samples: SampleSet::new(samples).expect("generated ids are unique"),
            embeddings,
            predictions,
        }
    }

    pub fn inputs(&self) -> PipelineInputs {
        PipelineInputs {
            samples: self.samples.clone(),
            embeddings: self.embeddings.clone(),
            pools: RejectionPools::builtin(),
        }
    }

    /// The embedder the rationale gallery was built with.
    pub fn text_embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.config.dim, DEFAULT_HASH_SEED)
    }

    /// Writes `dataset.jsonl`, `predictions.jsonl` and `embeddings/` under
    /// `dir` and returns a config pointing at them, with output in `dir/out`.
    pub fn write_to(&self, dir: &Path) -> Result<PipelineConfig, InterchangeError> {
        let dataset = dir.join("dataset.jsonl");
        let predictions = dir.join("predictions.jsonl");
        let embeddings = dir.join("embeddings");
        std::fs::create_dir_all(&embeddings).map_err(|source| InterchangeError::Io {
            path: embeddings.clone(),
            source,
        })?;
        write_samples(self.samples.as_slice(), &dataset)?;
        write_predictions(&self.predictions, &predictions)?;
        self.embeddings.write_dir(&embeddings)?;
        let mut config = PipelineConfig::with_paths(PipelinePaths {
            dataset,
            embeddings,
            predictions: Some(predictions),
            pools: None,
            output: dir.join("out"),
        });
        config.seed = self.config.seed;
        Ok(config)
    }
}

/// Gallery and queries for measuring how well combined similarity finds
/// items of a designated cluster.
#[derive(Debug, Clone)]
pub struct ClusterBenchmark {
    pub bundle: EmbeddingBundle,
    pub queries: Vec<String>,
    pub gallery: Vec<String>,
    /// Gallery ids in the queries' cluster.
    pub hard: HashSet<String>,
}

/// `gallery` items of which `hard_fraction` share a cluster with every query;
/// the rest spread over four other clusters. Each modality has its own
/// centroids, and item noise is as large as the centroid spread.
pub fn cluster_benchmark(
    gallery: usize,
    queries: usize,
    hard_fraction: f64,
    dim: usize,
    seed: u64,
) -> ClusterBenchmark {
    const EASY_CLUSTERS: usize = 4;
    let mut rng = item_rng(seed, "cluster-benchmark");
    let centroids: Vec<[Vec<f32>; 3]> = (0..=EASY_CLUSTERS)
        .map(|_| std::array::from_fn(|_| random_vec(&mut rng, dim, 1.0)))
        .collect();
    let n_hard = (hard_fraction * gallery as f64).round() as usize;
    let mut rows: [Vec<(String, Vec<f32>)>; 3] = Default::default();
    let mut push = |id: &str, cluster: usize, rng: &mut Rng| {
        for (m, out) in rows.iter_mut().enumerate() {
            out.push((id.to_string(), jitter(&centroids[cluster][m], rng, 1.0)));
        }
    };
    let mut gallery_ids = Vec::with_capacity(gallery);
    let mut hard = HashSet::new();
    for i in 0..gallery {
        let id = format!("g{i:05}");
        // interleave so the hard cluster is not a contiguous block
        let cluster = if i * n_hard / gallery.max(1) != (i + 1) * n_hard / gallery.max(1) {
            hard.insert(id.clone());
            0
        } else {
            1 + i % EASY_CLUSTERS
        };
        push(&id, cluster, &mut rng);
        gallery_ids.push(id);
    }
    let query_ids: Vec<String> = (0..queries).map(|i| format!("q{i:05}")).collect();
    for id in &query_ids {
        push(id, 0, &mut rng);
    }
    let [q, t, v] = rows;
    let set = |m, rows| EmbeddingSet::from_rows(m, rows).expect("benchmark rows are well formed");
    ClusterBenchmark {
        bundle: EmbeddingBundle {
            question: set(Modality::Question, q),
            rationale: set(Modality::Rationale, t),
            image: set(Modality::Image, v),
        },
        queries: query_ids,
        gallery: gallery_ids,
        hard,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::{triage, TriageClass};
    use crate::types::validate_sample;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            samples: 200,
            ..SyntheticConfig::default()
        };
        let a = SyntheticData::generate(&cfg);
        let b = SyntheticData::generate(&cfg);
        assert_eq!(a.samples.as_slice(), b.samples.as_slice());
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.embeddings.image.to_bytes(), b.embeddings.image.to_bytes());
        let c = SyntheticData::generate(&SyntheticConfig { seed: 8, ..cfg });
        assert_ne!(a.predictions, c.predictions);
    }

    #[test]
    fn samples_are_valid_and_all_classes_occur() {
        let data = SyntheticData::generate(&SyntheticConfig::default());
        let mut seen = HashSet::new();
        for (s, p) in data.samples.iter().zip(&data.predictions) {
            assert!(validate_sample(&s.into()).is_empty(), "{s:?}");
            p.check().unwrap();
            seen.insert(triage(s, p, -0.3).unwrap().0);
        }
        assert_eq!(seen.len(), 3);
        assert!(seen.contains(&TriageClass::LowConfCorrect));
    }

    #[test]
    fn benchmark_has_requested_shape() {
        let b = cluster_benchmark(1000, 100, 0.25, 16, 1);
        assert_eq!(b.gallery.len(), 1000);
        assert_eq!(b.queries.len(), 100);
        assert_eq!(b.hard.len(), 250);
        assert_eq!(b.bundle.image.len(), 1100);
    }
}
