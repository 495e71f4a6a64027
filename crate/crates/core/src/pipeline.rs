//! End-to-end orchestration: sample, forward, triage, mine neighbors, forward
//! and triage them, build pairs, write.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, EmbedderSpec, PipelineConfig, PipelinePaths};
use crate::confidence::{triage, ConfidenceError, TriageClass};
use crate::counterfactual::{
    assemble_pair, build_counterfactual_rejection, AnswerVocab, CounterfactualContext,
    CounterfactualError, PairOutcome,
};
use crate::embed::{CommandEmbedder, EmbedError, HashEmbedder, TextEmbedder, DEFAULT_HASH_SEED};
use crate::interchange::{
    read_predictions, read_pools, read_samples, write_neighbors, write_pairs, EmbeddingBundle,
    InterchangeError, NeighborRecord, RejectionPools,
};
use crate::retrieval::{topk_neighbors, NeighborSet, RetrievalError, SearchOptions, TripleIndex};
use crate::sampling::stratified_sample;
use crate::types::{PairSource, PairStage, PredictionRecord, PreferencePair, Sample, SampleSet, Split};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const NEIGHBORS_FILE: &str = "neighbors.jsonl";

/// Providers that stay silent this long are considered hung.
pub const PROVIDER_INACTIVITY_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("provider-extra-record: {0:?} was not requested")]
    ExtraRecord(String),
    #[error("provider-missing-record: no prediction for {0:?}")]
    MissingRecord(String),
    #[error("provider-duplicate-record: {0:?} returned twice")]
    DuplicateRecord(String),
    #[error("provider-invalid-record: {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("provider produced no output for {0:?}")]
    Timeout(Duration),
    #[error("provider output line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("provider command: {0}")]
    Command(String),
    #[error("provider io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Interchange(#[from] InterchangeError),
}

/// Runs the model on a batch of samples.
pub trait ForwardProvider {
    fn describe(&self) -> String;

    /// Should return exactly one record per requested sample, in any order.
    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<PredictionRecord>, ProviderError>;
}

/// Serves precomputed predictions keyed by sample id.
#[derive(Debug, Clone)]
pub struct FileBacked {
    origin: String,
    records: HashMap<String, PredictionRecord>,
}

impl FileBacked {
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        let records = read_predictions(path)?;
        Ok(Self::from_records(path.display().to_string(), records))
    }

    pub fn from_records(origin: impl Into<String>, records: Vec<PredictionRecord>) -> Self {
        FileBacked {
            origin: origin.into(),
            records: records.into_iter().map(|r| (r.sample_id.clone(), r)).collect(),
        }
    }
}

impl ForwardProvider for FileBacked {
    fn describe(&self) -> String {
        format!("file:{}", self.origin)
    }

    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<PredictionRecord>, ProviderError> {
        samples
            .iter()
            .map(|s| {
                self.records
                    .get(&s.id)
                    .cloned()
                    .ok_or_else(|| ProviderError::MissingRecord(s.id.clone()))
            })
            .collect()
    }
}

/// Spawns a command per batch, writes one sample id per line to its stdin
/// and reads prediction JSONL from its stdout.
#[derive(Debug, Clone)]
pub struct ExternalCommand {
    argv: Vec<String>,
    inactivity_timeout: Duration,
}

impl ExternalCommand {
    pub fn new(argv: Vec<String>) -> Result<Self, ProviderError> {
        if argv.is_empty() {
            return Err(ProviderError::Command("empty command".into()));
        }
        Ok(ExternalCommand {
            argv,
            inactivity_timeout: PROVIDER_INACTIVITY_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.inactivity_timeout = timeout;
        self
    }
}

/// Kills the child unless it was reaped normally.
struct ChildGuard(Option<Child>);

impl ChildGuard {
    fn wait(mut self) -> std::io::Result<std::process::ExitStatus> {
        self.0.take().expect("child present").wait()
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        if let Some(child) = self.0.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl ForwardProvider for ExternalCommand {
    fn describe(&self) -> String {
        format!("cmd:{}", self.argv.join(" "))
    }

    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<PredictionRecord>, ProviderError> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Command(format!("spawning {:?}: {e}", self.argv[0])))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let guard = ChildGuard(Some(child));

        let payload: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
        // a provider may exit without draining stdin; that surfaces later
        // as missing records, not as a write error
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(payload.as_bytes());
        });
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut records = Vec::with_capacity(samples.len());
        let mut line_no = 0;
        loop {
            match rx.recv_timeout(self.inactivity_timeout) {
                Ok(line) => {
                    let line = line?;
                    line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: PredictionRecord =
                        serde_json::from_str(&line).map_err(|e| ProviderError::Malformed {
                            line: line_no,
                            message: e.to_string(),
                        })?;
                    records.push(rec);
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(ProviderError::Timeout(self.inactivity_timeout));
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let status = guard.wait()?;
        let _ = writer.join();
        if !status.success() {
            return Err(ProviderError::Command(format!("{} exited with {status}", self.argv[0])));
        }
        Ok(records)
    }
}

/// Calls the provider and enforces its contract: one valid record per
/// requested sample. Records come back in request order.
pub fn forward(
    provider: &mut dyn ForwardProvider,
    samples: &[&Sample],
) -> Result<Vec<PredictionRecord>, ProviderError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let wanted: HashMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut slots: Vec<Option<PredictionRecord>> = vec![None; samples.len()];
    for rec in provider.predict(samples)? {
        let Some(&i) = wanted.get(rec.sample_id.as_str()) else {
            return Err(ProviderError::ExtraRecord(rec.sample_id));
        };
        if slots[i].is_some() {
            return Err(ProviderError::DuplicateRecord(rec.sample_id));
        }
        if let Err(v) = rec.check() {
            return Err(ProviderError::InvalidRecord {
                id: rec.sample_id,
                reason: format!("{v:?}"),
            });
        }
        slots[i] = Some(rec);
    }
    slots
        .into_iter()
        .zip(samples)
        .map(|(slot, s)| slot.ok_or_else(|| ProviderError::MissingRecord(s.id.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Sample,
    Forward,
    Triage,
    Mine,
    ForwardNeighbors,
    TriageNeighbors,
    BuildPairs,
    Write,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Sample => "sample",
            Stage::Forward => "forward",
            Stage::Triage => "triage",
            Stage::Mine => "mine",
            Stage::ForwardNeighbors => "forward-neighbors",
            Stage::TriageNeighbors => "triage-neighbors",
            Stage::BuildPairs => "build-pairs",
            Stage::Write => "write",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Interchange(#[from] InterchangeError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Provider,
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::Stage { source, .. } => match source {
                StageError::Provider(_) | StageError::Embed(_) => ErrorKind::Provider,
                StageError::Counterfactual(CounterfactualError::Embed(_)) => ErrorKind::Provider,
                _ => ErrorKind::Data,
            },
        }
    }
}

fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub train: usize,
    pub sampled: usize,
    pub forwarded: usize,
    pub fails: usize,
    pub low_conf: usize,
    pub confident: usize,
    pub hard: usize,
    pub rest: usize,
    /// Neighbor slots returned by the search, before de-duplication.
    pub neighbors_retrieved: usize,
    pub neighbors_unique: usize,
    pub neighbor_forwarded: usize,
    pub neighbor_fails: usize,
    pub neighbor_low_conf: usize,
    pub neighbor_confident: usize,
    /// Low-confidence items for which no counterfactual could be formed.
    pub counterfactual_unavailable: usize,
    /// Pairs dropped because they failed their invariants.
    pub pairs_skipped: usize,
    pub pairs_sft_fail: usize,
    pub pairs_counterfactual: usize,
    pub duplicates_removed: usize,
    pub pairs_total: usize,
}

impl StageCounts {
    /// Cross-checks between stage counts; returns the first broken relation.
    pub fn reconcile(&self, top_k: usize) -> Result<(), String> {
        let checks = [
            (self.forwarded == self.sampled, "forwarded == sampled"),
            (
                self.fails + self.low_conf + self.confident == self.forwarded,
                "sample-wave classes sum to forwarded",
            ),
            (self.hard == self.fails + self.low_conf, "hard == fails + low_conf"),
            (self.sampled + self.rest <= self.train, "sampled + rest <= train"),
            (self.neighbors_unique <= self.neighbors_retrieved, "unique <= retrieved"),
            (self.neighbors_retrieved <= self.hard * top_k, "retrieved <= hard * K"),
            (self.neighbor_forwarded == self.neighbors_unique, "neighbor forwards == unique neighbors"),
            (
                self.neighbor_fails + self.neighbor_low_conf + self.neighbor_confident
                    == self.neighbor_forwarded,
                "neighbor-wave classes sum to forwarded",
            ),
            (
                self.pairs_total == self.pairs_sft_fail + self.pairs_counterfactual,
                "total == sft fails + counterfactuals",
            ),
            (
                self.pairs_total + self.duplicates_removed + self.pairs_skipped + self.counterfactual_unavailable
                    == self.fails + self.low_conf + self.neighbor_fails + self.neighbor_low_conf,
                "every hard item is accounted for",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(format!("report counts do not reconcile: {what}")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub provider: String,
    pub counts: StageCounts,
    pub uncovered_strata: Vec<String>,
    pub timings: Vec<StageTiming>,
}

/// Orders pairs by wave, then sample id, and keeps the first pair per sample.
pub fn dedupe_pairs(mut pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    pairs.sort_by(|a, b| (a.meta.stage, &a.sample_id).cmp(&(b.meta.stage, &b.sample_id)));
    let mut seen = HashSet::new();
    pairs.retain(|p| seen.insert(p.sample_id.clone()));
    pairs
}

/// One hard item waiting for its pair.
#[derive(Debug, Clone)]
pub struct PairJob<'a> {
    pub sample: &'a Sample,
    pub prediction: &'a PredictionRecord,
    pub class: TriageClass,
    pub logprob: f64,
    pub stage: PairStage,
    /// Query that retrieved this sample and its combined score.
    pub seed: Option<(String, f64)>,
}

#[derive(Debug, Default)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub skipped: usize,
    pub unavailable: usize,
}

/// Whether a counterfactual failure is a per-item coverage gap (skip) rather
/// than a fault of the run (abort).
fn is_coverage_gap(e: &CounterfactualError) -> bool {
    matches!(
        e,
        CounterfactualError::TermNotInPool { .. }
            | CounterfactualError::VocabTooSmall(_)
            | CounterfactualError::NotInOpposites(_)
            | CounterfactualError::Retrieval(RetrievalError::EmptyAfterExclusion)
    )
}

/// Assembles pairs for every job in parallel; output keeps job order.
pub fn build_pairs(jobs: &[PairJob], ctx: &CounterfactualContext) -> Result<PairBuild, CounterfactualError> {
    let outcomes: Vec<Result<PairOutcome, CounterfactualError>> = jobs
        .par_iter()
        .map(|job| {
            assemble_pair(job.sample, job.prediction, job.class, job.logprob, job.stage, || {
                build_counterfactual_rejection(job.prediction, job.sample, ctx)
            })
        })
        .collect();
    let mut out = PairBuild::default();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(PairOutcome::Emitted(mut pair)) => {
                if let Some((seed_id, score)) = &job.seed {
                    pair.meta.seed_id = Some(seed_id.clone());
                    pair.meta.combined_score = Some(*score);
                }
                out.pairs.push(*pair);
            }
            Ok(PairOutcome::NotHard) => {}
            Ok(PairOutcome::Skipped(_)) => out.skipped += 1,
            Err(e) if is_coverage_gap(&e) => {
                log::warn!("no counterfactual for {}: {e}", job.sample.id);
                out.unavailable += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Triage for aligned samples and predictions.
pub fn triage_all(
    samples: &[&Sample],
    preds: &[PredictionRecord],
    sigma: f64,
) -> Result<Vec<(TriageClass, f64)>, ConfidenceError> {
    samples
        .par_iter()
        .zip(preds.par_iter())
        .map(|(s, p)| triage(s, p, sigma))
        .collect()
}

/// Everything the pipeline reads, already loaded.
pub struct PipelineInputs {
    pub samples: SampleSet,
    pub embeddings: EmbeddingBundle,
    pub pools: RejectionPools,
}

impl PipelineInputs {
    pub fn load(paths: &PipelinePaths) -> Result<Self, InterchangeError> {
        let samples = read_samples(&paths.dataset)?;
        let embeddings = EmbeddingBundle::read_dir(&paths.embeddings)?;
        let pools = match &paths.pools {
            Some(p) => read_pools(p)?,
            None => RejectionPools::builtin(),
        };
        Ok(PipelineInputs {
            samples,
            embeddings,
            pools,
        })
    }
}

/// Text embedder for the contrastive lookup; `dim` must match the rationale
/// gallery.
pub fn make_embedder(spec: &EmbedderSpec, dim: usize) -> Result<Box<dyn TextEmbedder>, EmbedError> {
    Ok(match spec {
        EmbedderSpec::Hash => Box::new(HashEmbedder::new(dim, DEFAULT_HASH_SEED)),
        EmbedderSpec::Command(argv) => Box::new(CommandEmbedder::spawn(argv, dim)?),
    })
}

pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub pairs: Vec<PreferencePair>,
    pub neighbors: Vec<NeighborSet>,
}

struct Timer {
    timings: Vec<StageTiming>,
    started: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.as_str(),
            seconds: (now - self.started).as_secs_f64(),
        });
        log::info!("stage {stage} done in {:.3}s", (now - self.started).as_secs_f64());
        self.started = now;
    }
}

fn count(classes: &[(TriageClass, f64)], which: TriageClass) -> usize {
    classes.iter().filter(|(c, _)| *c == which).count()
}

/// Runs every stage in memory. Nothing is written.
pub fn execute(
    config: &PipelineConfig,
    inputs: &PipelineInputs,
    provider: &mut dyn ForwardProvider,
    embedder: &dyn TextEmbedder,
) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let mut timer = Timer::new();
    let mut counts = StageCounts::default();

    // 1: stratified probe of the training split
    let train = inputs.samples.filter(|s| s.split == Split::Train);
    if train.is_empty() {
        return Err(at(Stage::Sample)(StageError::Data("training split is empty".into())));
    }
    counts.train = train.len();
    let sampling = stratified_sample(&train, config.gamma, config.seed);
    counts.sampled = sampling.selected.len();
    counts.rest = sampling.rest.len();
    timer.lap(Stage::Sample);

    // 2: forward the probe
    let probe: Vec<&Sample> = sampling.selected.iter().collect();
    let preds = forward(provider, &probe).map_err(at(Stage::Forward))?;
    counts.forwarded = preds.len();
    timer.lap(Stage::Forward);

    // 3: triage
    let classes = triage_all(&probe, &preds, config.sigma).map_err(at(Stage::Triage))?;
    counts.fails = count(&classes, TriageClass::Fail);
    counts.low_conf = count(&classes, TriageClass::LowConfCorrect);
    counts.confident = count(&classes, TriageClass::ConfidentCorrect);
    let hard: Vec<usize> = (0..probe.len()).filter(|&i| classes[i].0.is_hard()).collect();
    counts.hard = hard.len();
    timer.lap(Stage::Triage);

    // 4: mine neighbors of hard examples in the untouched remainder
    let rest_ids: Vec<String> = sampling.rest.ids().map(str::to_string).collect();
    let neighbors = if hard.is_empty() {
        Vec::new()
    } else if rest_ids.is_empty() {
        log::warn!("nothing left to mine: the sample covers the whole training split");
        Vec::new()
    } else {
        let index = TripleIndex::new(&inputs.embeddings);
        let queries: Vec<String> = hard.iter().map(|&i| probe[i].id.clone()).collect();
        let opts = SearchOptions {
            mask: config.modality_mask,
            block_size: config.block_size,
        };
        topk_neighbors(&index, &queries, &rest_ids, config.top_k, opts).map_err(at(Stage::Mine))?
    };
    counts.neighbors_retrieved = neighbors.iter().map(|n| n.neighbors.len()).sum();
    // first query wins
    let mut retrieved: Vec<(&Sample, String, f64)> = Vec::new();
    let mut seen = HashSet::new();
    for set in &neighbors {
        for n in &set.neighbors {
            if seen.insert(n.id.as_str()) {
                let s = sampling.rest.get(&n.id).expect("neighbors come from the remainder");
                retrieved.push((s, set.query_id.clone(), n.score));
            }
        }
    }
    counts.neighbors_unique = retrieved.len();
    timer.lap(Stage::Mine);

    // 5: forward neighbors
    let neighbor_samples: Vec<&Sample> = retrieved.iter().map(|(s, _, _)| *s).collect();
    let neighbor_preds = forward(provider, &neighbor_samples).map_err(at(Stage::ForwardNeighbors))?;
    counts.neighbor_forwarded = neighbor_preds.len();
    timer.lap(Stage::ForwardNeighbors);

    // 6: triage neighbors
    let neighbor_classes =
        triage_all(&neighbor_samples, &neighbor_preds, config.sigma).map_err(at(Stage::TriageNeighbors))?;
    counts.neighbor_fails = count(&neighbor_classes, TriageClass::Fail);
    counts.neighbor_low_conf = count(&neighbor_classes, TriageClass::LowConfCorrect);
    counts.neighbor_confident = count(&neighbor_classes, TriageClass::ConfidentCorrect);
    timer.lap(Stage::TriageNeighbors);

    // 7: pairs from both waves; retrieved ids leave the contrastive gallery
    let mut jobs: Vec<PairJob> = hard
        .iter()
        .map(|&i| PairJob {
            sample: probe[i],
            prediction: &preds[i],
            class: classes[i].0,
            logprob: classes[i].1,
            stage: PairStage::Sample,
            seed: None,
        })
        .collect();
    for (i, (s, seed_id, score)) in retrieved.iter().enumerate() {
        if neighbor_classes[i].0.is_hard() {
            jobs.push(PairJob {
                sample: s,
                prediction: &neighbor_preds[i],
                class: neighbor_classes[i].0,
                logprob: neighbor_classes[i].1,
                stage: PairStage::Neighbor,
                seed: Some((seed_id.clone(), *score)),
            });
        }
    }
    let allowed: HashSet<String> = rest_ids.into_iter().filter(|id| !seen.contains(id.as_str())).collect();
    let vocab = AnswerVocab::from_samples(train.iter());
    if embedder.dim() != inputs.embeddings.rationale.dim() {
        return Err(at(Stage::BuildPairs)(EmbedError::DimMismatch {
            expected: inputs.embeddings.rationale.dim(),
            got: embedder.dim(),
        }));
    }
    let ctx = CounterfactualContext {
        pools: &inputs.pools,
        vocab: &vocab,
        closed_flip: config.closed_answer_flip,
        rationale_embeddings: &inputs.embeddings.rationale,
        samples: &train,
        allowed: &allowed,
        embedder,
        seed: config.seed,
    };
    let built = build_pairs(&jobs, &ctx).map_err(at(Stage::BuildPairs))?;
    counts.pairs_skipped = built.skipped;
    counts.counterfactual_unavailable = built.unavailable;
    let emitted = built.pairs.len();
    let pairs = dedupe_pairs(built.pairs);
    counts.duplicates_removed = emitted - pairs.len();
    counts.pairs_sft_fail = pairs.iter().filter(|p| p.source == PairSource::SftFail).count();
    counts.pairs_counterfactual = pairs.iter().filter(|p| p.source == PairSource::Counterfactual).count();
    counts.pairs_total = pairs.len();
    counts
        .reconcile(config.top_k)
        .map_err(|m| at(Stage::BuildPairs)(StageError::Data(m)))?;
    timer.lap(Stage::BuildPairs);

    Ok(PipelineOutcome {
        report: PipelineReport {
            provider: provider.describe(),
            counts,
            uncovered_strata: sampling
                .uncovered
                .iter()
                .map(|(q, a)| format!("{q}/{a}"))
                .collect(),
            timings: timer.timings,
        },
        pairs,
        neighbors,
    })
}

/// Output locations inside the configured output directory.
pub fn output_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(PAIRS_FILE), dir.join(REPORT_FILE), dir.join(NEIGHBORS_FILE))
}

/// Loads inputs, runs every stage and writes `pairs.jsonl`, `neighbors.jsonl`
/// and `report.json` to the output directory. A stale pairs file is removed
/// up front so a failed run never leaves one behind.
pub fn run_pipeline(
    config: &PipelineConfig,
    provider: &mut dyn ForwardProvider,
) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let out_dir = &config.paths.output;
    let (pairs_path, report_path, neighbors_path) = output_paths(out_dir);
    fs::create_dir_all(out_dir).map_err(|e| at(Stage::Load)(io_stage(out_dir, e)))?;
    for p in [&pairs_path, &report_path] {
        if p.exists() {
            fs::remove_file(p).map_err(|e| at(Stage::Load)(io_stage(p, e)))?;
        }
    }

    let inputs = PipelineInputs::load(&config.paths).map_err(at(Stage::Load))?;
    let embedder = make_embedder(&config.text_embedder, inputs.embeddings.rationale.dim())
        .map_err(at(Stage::Load))?;
    let mut outcome = execute(config, &inputs, provider, embedder.as_ref())?;

    let started = Instant::now();
    let tmp = pairs_path.with_extension("jsonl.partial");
    let written = (|| -> Result<(), InterchangeError> {
        let records: Vec<NeighborRecord> = outcome.neighbors.iter().map(NeighborRecord::from).collect();
        write_neighbors(&records, &neighbors_path)?;
        write_pairs(&outcome.pairs, &tmp)?;
        fs::rename(&tmp, &pairs_path).map_err(|e| io_stage(&pairs_path, e))?;
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_file(&tmp);
        let _ = fs::remove_file(&pairs_path);
        return Err(at(Stage::Write)(e));
    }
    outcome.report.timings.push(StageTiming {
        stage: Stage::Write.as_str(),
        seconds: started.elapsed().as_secs_f64(),
    });
    let report_json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    if let Err(e) = fs::write(&report_path, report_json + "\n") {
        let _ = fs::remove_file(&pairs_path);
        return Err(at(Stage::Write)(io_stage(&report_path, e)));
    }
    Ok(outcome)
}

fn io_stage(path: &Path, source: std::io::Error) -> InterchangeError {
    InterchangeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticConfig, SyntheticData};
    use crate::types::PairMeta;

    fn pair(id: &str, stage: PairStage, tag: &str) -> PreferencePair {
        PreferencePair {
            sample_id: id.into(),
            image_ids: vec!["i".into()],
            question: "q".into(),
            chosen: "yes a".into(),
            rejected: format!("no {tag}"),
            source: PairSource::SftFail,
            meta: PairMeta::new(stage, -1.0, "yes".into(), "no".into()),
        }
    }

    #[test]
    fn dedupe_keeps_first_by_stage_then_id() {
        let pairs = vec![
            pair("b", PairStage::Neighbor, "1"),
            pair("a", PairStage::Sample, "2"),
            pair("b", PairStage::Sample, "3"),
            pair("b", PairStage::Sample, "4"),
        ];
        let out = dedupe_pairs(pairs);
        let got: Vec<(&str, &str)> = out.iter().map(|p| (p.sample_id.as_str(), p.rejected.as_str())).collect();
        assert_eq!(got, vec![("a", "no 2"), ("b", "no 3")]);
        let unique = vec![pair("x", PairStage::Sample, "1"), pair("y", PairStage::Sample, "2")];
        assert_eq!(dedupe_pairs(unique.clone()), unique);
    }

    struct Scripted {
        inner: FileBacked,
        extra: Option<PredictionRecord>,
        calls: Vec<usize>,
    }

    impl ForwardProvider for Scripted {
        fn describe(&self) -> String {
            "scripted".into()
        }

        fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<PredictionRecord>, ProviderError> {
            self.calls.push(samples.len());
            let mut out = self.inner.predict(samples)?;
            out.extend(self.extra.take());
            Ok(out)
        }
    }

    fn small() -> SyntheticData {
        SyntheticData::generate(&SyntheticConfig {
            samples: 400,
            ..SyntheticConfig::default()
        })
    }

    fn config(gamma: f64, k: usize) -> PipelineConfig {
        let mut c = PipelineConfig::with_paths(PipelinePaths {
            dataset: "unused".into(),
            embeddings: "unused".into(),
            predictions: None,
            pools: None,
            output: "unused".into(),
        });
        c.gamma = gamma;
        c.top_k = k;
        c
    }

    fn run(data: &SyntheticData, cfg: &PipelineConfig) -> (PipelineOutcome, Vec<usize>) {
        let inputs = data.inputs();
        let mut provider = Scripted {
            inner: FileBacked::from_records("mem", data.predictions.clone()),
            extra: None,
            calls: Vec::new(),
        };
        let embedder = data.text_embedder();
        let out = execute(cfg, &inputs, &mut provider, &embedder).unwrap();
        (out, provider.calls)
    }

    #[test]
    fn forward_counts_follow_the_stages() {
        let data = small();
        let cfg = config(0.05, 3);
        let (out, calls) = run(&data, &cfg);
        let c = &out.report.counts;
        c.reconcile(cfg.top_k).unwrap();
        assert_eq!(calls[0], c.sampled);
        assert!(c.hard > 0, "fixture should produce hard examples");
        assert_eq!(calls.get(1).copied().unwrap_or(0), c.neighbors_unique);
        assert!(c.neighbors_unique <= c.hard * cfg.top_k);
        assert!(c.pairs_total > 0);
    }

    #[test]
    fn pairs_trace_back_to_their_wave() {
        let data = small();
        let cfg = config(0.05, 3);
        let (out, _) = run(&data, &cfg);
        let sampled: HashSet<&str> = out.neighbors.iter().map(|n| n.query_id.as_str()).collect();
        let train = data.samples.filter(|s| s.split == Split::Train);
        for p in &out.pairs {
            assert!(train.contains(&p.sample_id));
            p.check().unwrap();
            match p.meta.stage {
                PairStage::Sample => assert!(p.meta.seed_id.is_none()),
                PairStage::Neighbor => {
                    let seed = p.meta.seed_id.as_deref().unwrap();
                    assert!(sampled.contains(seed));
                    assert!(!sampled.contains(p.sample_id.as_str()));
                }
            }
            if p.source == PairSource::Counterfactual {
                let rid = p.meta.retrieved_id.as_deref().unwrap();
                // retrieved from the remainder, never a mined or probed sample
                assert!(!sampled.contains(rid));
                assert!(out.neighbors.iter().all(|n| n.neighbors.iter().all(|x| x.id != rid)));
            }
        }
    }

    #[test]
    fn empty_probe_gives_empty_run() {
        let data = SyntheticData::generate(&SyntheticConfig {
            samples: 20,
            ..SyntheticConfig::default()
        });
        // round(0.01 * N) is zero for this tiny training split
        let (out, calls) = run(&data, &config(0.01, 1));
        assert_eq!(out.report.counts, StageCounts {
            train: out.report.counts.train,
            rest: out.report.counts.rest,
            ..StageCounts::default()
        });
        assert!(out.pairs.is_empty());
        assert!(calls.is_empty());
    }

    #[test]
    fn extra_provider_record_aborts_forward() {
        let data = small();
        let inputs = data.inputs();
        let mut extra = data.predictions[0].clone();
        extra.sample_id = "not-requested".into();
        let mut provider = Scripted {
            inner: FileBacked::from_records("mem", data.predictions.clone()),
            extra: Some(extra),
            calls: Vec::new(),
        };
        let err = execute(&config(0.05, 1), &inputs, &mut provider, &data.text_embedder())
            .err()
            .unwrap();
        assert!(matches!(
            err,
            PipelineError::Stage {
                stage: Stage::Forward,
                source: StageError::Provider(ProviderError::ExtraRecord(_))
            }
        ));
        assert!(err.to_string().contains("provider-extra-record"));
        assert_eq!(err.kind(), ErrorKind::Provider);
    }

    #[test]
    fn missing_provider_record_is_reported() {
        let data = small();
        let mut p = FileBacked::from_records("mem", Vec::new());
        let s = &data.samples.as_slice()[0];
        let err = forward(&mut p, &[s]).unwrap_err();
        assert!(err.to_string().starts_with("provider-missing-record"));
    }

    #[cfg(unix)]
    #[test]
    fn external_command_round_trip() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        let preds = dir.path().join("p.jsonl");
        crate::interchange::write_predictions(&data.predictions, &preds).unwrap();
        // answers each requested id with the matching line of the file
        let script = format!(
            r#"while read -r id; do grep -F "\"sample_id\":\"$id\"" {}; done"#,
            preds.display()
        );
        let mut p = ExternalCommand::new(vec!["sh".into(), "-c".into(), script]).unwrap();
        let wanted: Vec<&Sample> = data.samples.iter().take(5).collect();
        let got = forward(&mut p, &wanted).unwrap();
        assert_eq!(got.len(), 5);
        for (s, r) in wanted.iter().zip(&got) {
            assert_eq!(s.id, r.sample_id);
        }
    }

    #[cfg(unix)]
    #[test]
    fn external_command_timeout_and_failure() {
        let data = small();
        let wanted: Vec<&Sample> = data.samples.iter().take(1).collect();
        let mut slow = ExternalCommand::new(vec!["sh".into(), "-c".into(), "sleep 5".into()])
            .unwrap()
            .with_timeout(Duration::from_millis(100));
        assert!(matches!(forward(&mut slow, &wanted), Err(ProviderError::Timeout(_))));
        let mut failing = ExternalCommand::new(vec!["sh".into(), "-c".into(), "exit 3".into()]).unwrap();
        assert!(matches!(forward(&mut failing, &wanted), Err(ProviderError::Command(_))));
    }

    #[test]
    fn run_pipeline_writes_outputs_and_cleans_up_on_failure() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = data.write_to(dir.path()).unwrap();
        cfg.gamma = 0.05;
        cfg.top_k = 2;
        let mut provider = FileBacked::open(cfg.paths.predictions.as_ref().unwrap()).unwrap();
        let out = run_pipeline(&cfg, &mut provider).unwrap();
        let (pairs_path, report_path, neighbors_path) = output_paths(&cfg.paths.output);
        assert!(pairs_path.exists() && report_path.exists() && neighbors_path.exists());
        assert_eq!(crate::interchange::read_pairs(&pairs_path).unwrap(), out.pairs);

        let mut empty = FileBacked::from_records("empty", Vec::new());
        let err = run_pipeline(&cfg, &mut empty).err().unwrap();
        assert_eq!(err.kind(), ErrorKind::Provider);
        assert!(!pairs_path.exists(), "stale pairs file must not survive a failed run");
    }
}
