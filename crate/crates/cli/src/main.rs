use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use chexpo::config::{EmbedderSpec, PipelineConfig};
use chexpo::confidence::TriageClass;
use chexpo::counterfactual::{AnswerVocab, CounterfactualContext};
use chexpo::dpo::{self, LossType, Objective, ToyPolicy, TrainConfig};
use chexpo::interchange::{
    read_pools, read_predictions, read_samples, read_triage, write_neighbors, write_pairs,
    write_samples, write_triage, EmbeddingBundle, NeighborRecord, RejectionPools, TriageRecord,
};
use chexpo::metrics::{error_distribution, evaluate, win_rate};
use chexpo::pipeline::{
    build_pairs, dedupe_pairs, make_embedder, run_pipeline, triage_all, ErrorKind, ExternalCommand,
    FileBacked, ForwardProvider, PairJob,
};
use chexpo::retrieval::{topk_neighbors, SearchOptions, TripleIndex};
use chexpo::rng::rng_from_seed;
use chexpo::sampling::stratified_sample;
use chexpo::synthetic::{SyntheticConfig, SyntheticData};
use chexpo::types::{PairStage, PredictionRecord, Sample, SampleSet, Split};

#[derive(Parser)]
#[command(name = "chexpo", version, about = "Preference-pair mining for chest X-ray VQA")]
struct Cli {
    /// Pipeline config (JSON). Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output path, then ".".
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stratified sample of the training split -> sample.jsonl
    Sample {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Confidence triage of predictions -> triage.jsonl, error_distribution.json
    Score {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        sigma: Option<f64>,
        /// Only triage predictions for the samples in this file (e.g. the
        /// output of `sample`).
        #[arg(long)]
        subset: Option<PathBuf>,
    },
    /// Top-K neighbors of the hard examples in a triage file -> neighbors.jsonl
    Mine {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Triage file whose Fail / LowConfCorrect rows are the queries.
        #[arg(long)]
        triage: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
    },
    /// Preference pairs for the hard rows of a triage file -> pairs.jsonl
    Pairs {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        triage: PathBuf,
        /// Further triage files whose ids are not eligible as contrastive
        /// rationales.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long)]
        pools: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::Sample)]
        stage: StageArg,
    },
    /// Train a toy softmax policy on random consistent preferences -> dpo_history.csv
    DpoTrain {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        loss_type: Option<LossType>,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 10)]
        contexts: usize,
        #[arg(long, default_value_t = 4)]
        responses: usize,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Strict accuracy, micro-F1, optional BLEU and win rate -> eval.json
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Second prediction file; reports the win rate against it.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        bleu: bool,
    },
    /// Full run: sample, forward, triage, mine, forward, triage, pairs
    Pipeline {
        /// `file:<predictions.jsonl>` or `cmd:<argv>`; defaults to the
        /// config's predictions file.
        #[arg(long)]
        provider: Option<String>,
        /// `hash` or `cmd:<argv>`, overriding the config.
        #[arg(long)]
        text_embedder: Option<EmbedderSpec>,
    },
    /// Write a deterministic synthetic corpus and a config for it
    Synth {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sample,
    Neighbor,
}

/// Error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Tag<T> {
    fn config(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn provider(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 2,
            error: e.into(),
        })
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 3,
            error: e.into(),
        })
    }
    fn provider(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 4,
            error: e.into(),
        })
    }
}

struct Ctx {
    config: Option<PipelineConfig>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }

    /// Defaults come from the config when there is one.
    fn defaults(&self) -> PipelineConfig {
        self.config.clone().unwrap_or_else(|| {
            PipelineConfig::with_paths(chexpo::config::PipelinePaths {
                dataset: PathBuf::new(),
                embeddings: PathBuf::new(),
                predictions: None,
                pools: None,
                output: PathBuf::from("."),
            })
        })
    }

    fn path(
        &self,
        flag: Option<PathBuf>,
        from_config: impl Fn(&PipelineConfig) -> Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf, Failure> {
        flag.or_else(|| self.config.as_ref().and_then(from_config))
            .ok_or_else(|| anyhow!("--{name} is required (or set it in --config)"))
            .config()
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = self
            .out_dir
            .clone()
            .or(self.config.as_ref().map(|c| c.paths.output.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .data()?;
        Ok(dir)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(p) => Some(PipelineConfig::from_path(p).config()?),
        None => None,
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Cmd::Sample { dataset, gamma } => cmd_sample(&ctx, dataset, gamma),
        Cmd::Score {
            dataset,
            predictions,
            sigma,
            subset,
        } => cmd_score(&ctx, dataset, predictions, sigma, subset),
        Cmd::Mine {
            dataset,
            embeddings,
            triage,
            top_k,
            block_size,
        } => cmd_mine(&ctx, dataset, embeddings, &triage, top_k, block_size),
        Cmd::Pairs {
            dataset,
            embeddings,
            predictions,
            triage,
            exclude,
            pools,
            stage,
        } => cmd_pairs(&ctx, dataset, embeddings, predictions, &triage, &exclude, pools, stage),
        Cmd::DpoTrain {
            beta,
            loss_type,
            lr,
            steps,
            epsilon,
            contexts,
            responses,
            pairs,
        } => cmd_dpo_train(&ctx, beta, loss_type, lr, steps, epsilon, contexts, responses, pairs),
        Cmd::Eval {
            dataset,
            predictions,
            baseline,
            bleu,
        } => cmd_eval(&ctx, dataset, predictions, baseline, bleu),
        Cmd::Pipeline {
            provider,
            text_embedder,
        } => cmd_pipeline(&ctx, provider, text_embedder),
        Cmd::Synth { samples, dim } => cmd_synth(&ctx, samples, dim),
    }
}

fn load_train(path: &Path) -> Result<(SampleSet, SampleSet), Failure> {
    let all = read_samples(path).data()?;
    let train = all.filter(|s| s.split == Split::Train);
    Ok((all, train))
}

fn cmd_sample(ctx: &Ctx, dataset: Option<PathBuf>, gamma: Option<f64>) -> Result<(), Failure> {
    let dataset = ctx.path(dataset, |c| Some(c.paths.dataset.clone()), "dataset")?;
    let gamma = gamma.unwrap_or(ctx.defaults().gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(anyhow!("gamma must be in (0, 1], got {gamma}")).config();
    }
    let (_, train) = load_train(&dataset)?;
    let outcome = stratified_sample(&train, gamma, ctx.seed());
    let out = ctx.out_dir()?.join("sample.jsonl");
    write_samples(outcome.selected.as_slice(), &out).data()?;
    println!(
        "sampled {} of {} training samples -> {}",
        outcome.selected.len(),
        train.len(),
        out.display()
    );
    for (q, a) in &outcome.uncovered {
        println!("  uncovered stratum: {q}/{a}");
    }
    Ok(())
}

/// Predictions aligned with their samples; unknown ids are a data error.
fn align<'a>(
    samples: &'a SampleSet,
    preds: &[PredictionRecord],
) -> Result<Vec<&'a Sample>, Failure> {
    preds
        .iter()
        .map(|p| {
            samples
                .get(&p.sample_id)
                .ok_or_else(|| anyhow!("prediction for unknown sample {:?}", p.sample_id))
        })
        .collect::<Result<_, _>>()
        .data()
}

fn cmd_score(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    predictions: Option<PathBuf>,
    sigma: Option<f64>,
    subset: Option<PathBuf>,
) -> Result<(), Failure> {
    let dataset = ctx.path(dataset, |c| Some(c.paths.dataset.clone()), "dataset")?;
    let predictions = ctx.path(predictions, |c| c.paths.predictions.clone(), "predictions")?;
    let sigma = sigma.unwrap_or(ctx.defaults().sigma);
    if !(sigma.is_finite() && sigma < 0.0) {
        return Err(anyhow!("sigma must be negative, got {sigma}")).config();
    }
    let samples = read_samples(&dataset).data()?;
    let mut preds = read_predictions(&predictions).data()?;
    if let Some(path) = subset {
        let keep = read_samples(&path).data()?;
        preds.retain(|p| keep.contains(&p.sample_id));
    }
    let aligned = align(&samples, &preds)?;
    let classes = triage_all(&aligned, &preds, sigma).data()?;
    let records: Vec<TriageRecord> = preds
        .iter()
        .zip(&classes)
        .map(|(p, (class, logprob))| TriageRecord {
            sample_id: p.sample_id.clone(),
            class: *class,
            logprob: *logprob,
        })
        .collect();
    let dir = ctx.out_dir()?;
    write_triage(&records, &dir.join("triage.jsonl")).data()?;

    let triaged: Vec<(&Sample, TriageClass, f64)> =
        aligned.iter().zip(&classes).map(|(s, (c, p))| (*s, *c, *p)).collect();
    let dist = error_distribution(&triaged);
    let json = serde_json::to_string_pretty(&dist).expect("distribution serializes");
    std::fs::write(dir.join("error_distribution.json"), json + "\n").data()?;

    let n = |c| classes.iter().filter(|(k, _)| *k == c).count();
    println!(
        "fail {}  low-confidence {}  confident {}",
        n(TriageClass::Fail),
        n(TriageClass::LowConfCorrect),
        n(TriageClass::ConfidentCorrect)
    );
    println!("{:<12} {:>6} {:>8} {:>10}", "type", "fails", "share", "mean p");
    for (q, e) in &dist.per_type {
        println!("{:<12} {:>6} {:>8.4} {:>10.4}", q.as_str(), e.fails, e.share, e.mean_logprob);
    }
    Ok(())
}

fn cmd_mine(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    triage: &Path,
    top_k: Option<usize>,
    block_size: Option<usize>,
) -> Result<(), Failure> {
    let dataset = ctx.path(dataset, |c| Some(c.paths.dataset.clone()), "dataset")?;
    let embeddings = ctx.path(embeddings, |c| Some(c.paths.embeddings.clone()), "embeddings")?;
    let defaults = ctx.defaults();
    let k = top_k.unwrap_or(defaults.top_k);
    let block = block_size.unwrap_or(defaults.block_size);
    if k == 0 || block == 0 {
        return Err(anyhow!("--top-k and --block-size must be at least 1")).config();
    }
    let (_, train) = load_train(&dataset)?;
    let rows = read_triage(triage).data()?;
    let probed: HashSet<&str> = rows.iter().map(|r| r.sample_id.as_str()).collect();
    let queries: Vec<String> = rows
        .iter()
        .filter(|r| r.class.is_hard())
        .map(|r| r.sample_id.clone())
        .collect();
    let gallery: Vec<String> = train.ids().filter(|id| !probed.contains(id)).map(str::to_string).collect();
    let bundle = EmbeddingBundle::read_dir(&embeddings).data()?;
    let index = TripleIndex::new(&bundle);
    let opts = SearchOptions {
        mask: defaults.modality_mask,
        block_size: block,
    };
    let sets = if queries.is_empty() {
        Vec::new()
    } else {
        topk_neighbors(&index, &queries, &gallery, k, opts).data()?
    };
    let records: Vec<NeighborRecord> = sets.iter().map(NeighborRecord::from).collect();
    let out = ctx.out_dir()?.join("neighbors.jsonl");
    write_neighbors(&records, &out).data()?;
    println!(
        "{} queries x top-{k} over {} gallery items -> {}",
        queries.len(),
        gallery.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pairs(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    predictions: Option<PathBuf>,
    triage: &Path,
    exclude: &[PathBuf],
    pools: Option<PathBuf>,
    stage: StageArg,
) -> Result<(), Failure> {
    let dataset = ctx.path(dataset, |c| Some(c.paths.dataset.clone()), "dataset")?;
    let embeddings = ctx.path(embeddings, |c| Some(c.paths.embeddings.clone()), "embeddings")?;
    let predictions = ctx.path(predictions, |c| c.paths.predictions.clone(), "predictions")?;
    let pools = match pools.or_else(|| ctx.config.as_ref().and_then(|c| c.paths.pools.clone())) {
        Some(p) => read_pools(&p).data()?,
        None => RejectionPools::builtin(),
    };
    let defaults = ctx.defaults();
    let (_, train) = load_train(&dataset)?;
    let rows = read_triage(triage).data()?;
    let preds = read_predictions(&predictions).data()?;
    let by_id: std::collections::HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();

    let mut taken: HashSet<String> = rows.iter().map(|r| r.sample_id.clone()).collect();
    for path in exclude {
        taken.extend(read_triage(path).data()?.into_iter().map(|r| r.sample_id));
    }
    let allowed: HashSet<String> = train.ids().filter(|id| !taken.contains(*id)).map(str::to_string).collect();

    let stage = match stage {
        StageArg::Sample => PairStage::Sample,
        StageArg::Neighbor => PairStage::Neighbor,
    };
    let mut jobs = Vec::new();
    for r in rows.iter().filter(|r| r.class.is_hard()) {
        let sample = train
            .get(&r.sample_id)
            .ok_or_else(|| anyhow!("triage row for {:?} is not a training sample", r.sample_id))
            .data()?;
        let prediction = by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| anyhow!("no prediction for {:?}", r.sample_id))
            .data()?;
        jobs.push(PairJob {
            sample,
            prediction,
            class: r.class,
            logprob: r.logprob,
            stage,
            seed: None,
        });
    }

    let bundle = EmbeddingBundle::read_dir(&embeddings).data()?;
    let embedder = make_embedder(&defaults.text_embedder, bundle.rationale.dim()).provider()?;
    let vocab = AnswerVocab::from_samples(train.iter());
    let cf = CounterfactualContext {
        pools: &pools,
        vocab: &vocab,
        closed_flip: defaults.closed_answer_flip,
        rationale_embeddings: &bundle.rationale,
        samples: &train,
        allowed: &allowed,
        embedder: embedder.as_ref(),
        seed: ctx.seed(),
    };
    let built = build_pairs(&jobs, &cf).data()?;
    let pairs = dedupe_pairs(built.pairs);
    let out = ctx.out_dir()?.join("pairs.jsonl");
    write_pairs(&pairs, &out).data()?;
    println!(
        "{} pairs ({} skipped, {} without counterfactual) -> {}",
        pairs.len(),
        built.skipped,
        built.unavailable,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_dpo_train(
    ctx: &Ctx,
    beta: Option<f64>,
    loss_type: Option<LossType>,
    lr: f64,
    steps: usize,
    epsilon: Option<f64>,
    contexts: usize,
    responses: usize,
    pairs: usize,
) -> Result<(), Failure> {
    let defaults = ctx.defaults();
    let objective = Objective::new(
        beta.unwrap_or(defaults.beta),
        loss_type.unwrap_or(defaults.loss_type),
        epsilon.unwrap_or(defaults.robust_epsilon),
    )
    .config()?;
    if contexts == 0 || responses < 2 {
        return Err(anyhow!("need at least one context and two responses")).config();
    }
    let mut rng = rng_from_seed(ctx.seed());
    let items = dpo::random_preferences(contexts, responses, pairs, &mut rng);
    let reference = ToyPolicy::uniform(&vec![responses; contexts]).config()?;
    let cfg = TrainConfig {
        learning_rate: lr,
        steps,
        objective,
    };
    let (theta, history) = dpo::train_toy(&reference, &reference, &items, &cfg).config()?;

    let out = ctx.out_dir()?.join("dpo_history.csv");
    let mut w = csv::Writer::from_path(&out).data()?;
    for rec in &history {
        w.serialize(rec).data()?;
    }
    w.flush().data()?;

    let satisfied = items
        .iter()
        .filter(|i| {
            let p = theta.probs(i.context);
            p[i.chosen] > p[i.rejected]
        })
        .count();
    let (loss, margin) = dpo::batch_loss(&theta, &reference, &items, &objective).config()?;
    println!(
        "{} loss {:.6}, mean reward margin {:.6}, {satisfied}/{} pairs ordered -> {}",
        objective.loss_type,
        loss,
        margin,
        items.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    dataset: Option<PathBuf>,
    predictions: Option<PathBuf>,
    baseline: Option<PathBuf>,
    bleu: bool,
) -> Result<(), Failure> {
    let dataset = ctx.path(dataset, |c| Some(c.paths.dataset.clone()), "dataset")?;
    let predictions = ctx.path(predictions, |c| c.paths.predictions.clone(), "predictions")?;
    let samples = read_samples(&dataset).data()?;
    let preds = read_predictions(&predictions).data()?;
    let report = evaluate(&samples, &preds, bleu).data()?;
    let mut json = serde_json::to_value(&report).expect("report serializes");

    if let Some(path) = baseline {
        let other = read_predictions(&path).data()?;
        let other: std::collections::HashMap<&str, &PredictionRecord> =
            other.iter().map(|p| (p.sample_id.as_str(), p)).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for p in &preds {
            if let (Some(s), Some(o)) = (samples.get(&p.sample_id), other.get(p.sample_id.as_str())) {
                a.push(chexpo::confidence::answer_matches(&p.predicted_answer, &s.answer));
                b.push(chexpo::confidence::answer_matches(&o.predicted_answer, &s.answer));
            }
        }
        let w = win_rate(&a, &b).data()?;
        println!(
            "win rate vs baseline: {:.4} over decisive items, {:.4} over all {}",
            w.decisive, w.raw, w.total
        );
        json["win_rate"] = serde_json::to_value(w).expect("win rate serializes");
    }
    let out = ctx.out_dir()?.join("eval.json");
    std::fs::write(&out, serde_json::to_string_pretty(&json).expect("json") + "\n").data()?;
    print!("{}", report.to_table());
    Ok(())
}

fn parse_provider(spec: &str) -> anyhow::Result<Box<dyn ForwardProvider>> {
    if let Some(path) = spec.strip_prefix("file:") {
        return Ok(Box::new(FileBacked::open(Path::new(path))?));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        return Ok(Box::new(ExternalCommand::new(argv)?));
    }
    Err(anyhow!("unknown provider {spec:?} (expected file:<path> or cmd:<argv>)"))
}

fn cmd_pipeline(
    ctx: &Ctx,
    provider: Option<String>,
    text_embedder: Option<EmbedderSpec>,
) -> Result<(), Failure> {
    let mut config = ctx
        .config
        .clone()
        .ok_or_else(|| anyhow!("pipeline needs --config"))
        .config()?;
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    if let Some(dir) = &ctx.out_dir {
        config.paths.output = dir.clone();
    }
    if let Some(e) = text_embedder {
        config.text_embedder = e;
    }
    let spec = match provider {
        Some(p) => p,
        None => match &config.paths.predictions {
            Some(p) => format!("file:{}", p.display()),
            None => return Err(anyhow!("no --provider and no predictions path in the config")).config(),
        },
    };
    let mut provider = parse_provider(&spec).provider()?;
    let outcome = match run_pipeline(&config, provider.as_mut()) {
        Ok(o) => o,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Provider => 4,
            };
            return Err(Failure {
                code,
                error: e.into(),
            });
        }
    };
    let c = &outcome.report.counts;
    println!(
        "sampled {}  hard {}  neighbors {}  pairs {} (sft-fail {}, counterfactual {}) -> {}",
        c.sampled,
        c.hard,
        c.neighbors_unique,
        c.pairs_total,
        c.pairs_sft_fail,
        c.pairs_counterfactual,
        config.paths.output.display()
    );
    Ok(())
}

fn cmd_synth(ctx: &Ctx, samples: usize, dim: usize) -> Result<(), Failure> {
    if dim == 0 {
        return Err(anyhow!("--dim must be positive")).config();
    }
    let data = SyntheticData::generate(&SyntheticConfig {
        samples,
        dim,
        seed: ctx.seed(),
        ..SyntheticConfig::default()
    });
    let dir = ctx.out_dir()?;
    let config = data.write_to(&dir).data()?;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).expect("config serializes") + "\n").data()?;
    println!("{samples} synthetic samples -> {} (config {})", dir.display(), path.display());
    Ok(())
}
