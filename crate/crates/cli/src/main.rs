use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use parajoint::checkpoint::Checkpoint;
use parajoint::data::{build_instances, load_claims, load_corpus, load_fever, read_instances, write_instances};
use parajoint::evaluation::{evaluate, gold_evidence_docs, retrieval_metrics, EvalOptions, GoldSet};
use parajoint::model::StanceHeadKind;
use parajoint::pipeline::{read_predictions, run_pipeline, to_submission, write_jsonl, PipelineConfig, Task};
use parajoint::retrieval::{Backend, HashedBowEmbedder, RetrievalIndex, Retriever, SentenceEmbedder};
use parajoint::selftest::run_selftest;
use parajoint::training::{train, TrainConfig, TrainData, TrainError, TrainMode};
use parajoint::JointModelF64;
use serde_json::json;

const BUILD_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("PARAJOINT_GIT_REV"), ")");

#[derive(Parser, Debug)]
#[command(name = "parajoint", version = BUILD_VERSION, about = "Paragraph-level joint claim verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank corpus abstracts for each claim.
    Retrieve(RetrieveArgs),
    /// Build training instances (gold, negatives, optional FEVER).
    BuildData(BuildDataArgs),
    /// Train the joint model.
    Train(TrainArgs),
    /// Run the end-to-end pipeline with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold claims.
    Evaluate(EvaluateArgs),
    /// Run the gradient-check and metric-oracle suites.
    Selftest(SelftestArgs),
}

#[derive(clap::Args, Debug)]
struct IndexArgs {
    #[arg(long, default_value = "tfidf")]
    backend: Backend,
    /// Load a saved index instead of building one.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Save the built index.
    #[arg(long)]
    save_index: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    claims: PathBuf,
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct BuildDataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    claims: PathBuf,
    #[arg(long, default_value_t = 12)]
    k_train: usize,
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long)]
    out: PathBuf,
    /// FEVER claims in the adapted paragraph format.
    #[arg(long, requires_all = ["fever_pages", "fever_out"])]
    fever: Option<PathBuf>,
    /// Wikipedia pages in corpus format.
    #[arg(long)]
    fever_pages: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k_fever: usize,
    #[arg(long)]
    fever_out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// JSON file mirroring the training config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training instances (from build-data).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// FEVER instances for pre-training or domain adaptation.
    #[arg(long)]
    fever: Option<PathBuf>,
    /// Start from this checkpoint (e.g. a FEVER pre-trained model).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One JSON line per epoch.
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k_retrieval: Option<usize>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    k_fever: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long, value_parser = parse_head)]
    stance_head: Option<StanceHeadKind>,
}

#[derive(clap::Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    claims: PathBuf,
    #[arg(long, default_value = "open")]
    task: Task,
    #[arg(long, default_value_t = 30)]
    k_retrieval: usize,
    #[command(flatten)]
    index: IndexArgs,
    /// Model outputs, one JSON line per (claim, abstract).
    #[arg(long)]
    out: PathBuf,
    /// Predictions in the SciFact submission format.
    #[arg(long)]
    submission: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    /// Model-output or submission JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// Gold claims JSONL.
    #[arg(long)]
    gold: PathBuf,
    /// Per-abstract rationale cap (off by default).
    #[arg(long)]
    max_sentences: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| {
        "expected scifact_only, fever_pretrain_then_finetune or domain_adaptation".to_string()
    })
}

fn parse_head(s: &str) -> Result<StanceHeadKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| "expected simple or kgat".to_string())
}

/// Errors the user can fix by changing inputs or flags.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: parajoint::Error) -> anyhow::Error {
    match e {
        parajoint::Error::Config(_) | parajoint::Error::Version { .. } | parajoint::Error::UnknownLabel(_) => {
            Invalid(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn log_resolved(command: &str, config: &serde_json::Value) {
    log::info!("parajoint {BUILD_VERSION} {command}");
    log::info!("resolved configuration: {config}");
}

fn open_index(args: &IndexArgs, corpus: &parajoint::data::Corpus) -> anyhow::Result<RetrievalIndex> {
    let embedder: Arc<dyn SentenceEmbedder> = Arc::new(HashedBowEmbedder::default());
    let index = match &args.index {
        Some(path) => RetrievalIndex::load(path, Some(embedder)).map_err(invalid)?,
        None => RetrievalIndex::build(corpus, args.backend, Some(embedder)).map_err(invalid)?,
    };
    if let Some(path) = &args.save_index {
        index.save(path)?;
    }
    Ok(index)
}

fn retrieve(args: RetrieveArgs) -> anyhow::Result<()> {
    log_resolved(
        "retrieve",
        &json!({"corpus": args.corpus, "claims": args.claims, "k": args.k, "backend": args.index.backend,
                "index": args.index.index, "out": args.out}),
    );
    let corpus = load_corpus(&args.corpus)?;
    let claims = load_claims(&args.claims)?;
    let index = open_index(&args.index, &corpus)?;
    let mut lines = Vec::new();
    let mut ranked = BTreeMap::new();
    for c in &claims {
        let hits = index.retrieve(&c.text, args.k);
        ranked.insert(c.id, hits.iter().map(|h| h.doc_id).collect::<Vec<_>>());
        lines.push(json!({
            "claim_id": c.id,
            "doc_ids": hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(),
            "scores": hits.iter().map(|h| h.score).collect::<Vec<_>>(),
        }));
    }
    write_jsonl(&args.out, &lines)?;
    let gold = gold_evidence_docs(&claims);
    if gold.values().any(|d| !d.is_empty()) {
        let m = retrieval_metrics(&ranked, &gold, args.k);
        println!(
            "retrieval@{}: precision {:.4} recall {:.4} f1 {:.4}",
            args.k, m.precision, m.recall, m.f1
        );
    }
    log::info!("wrote {} rankings to {}", lines.len(), args.out.display());
    Ok(())
}

fn build_data(args: BuildDataArgs) -> anyhow::Result<()> {
    log_resolved(
        "build-data",
        &json!({"corpus": args.corpus, "claims": args.claims, "k_train": args.k_train,
                "backend": args.index.backend, "out": args.out, "fever": args.fever,
                "fever_pages": args.fever_pages, "k_fever": args.k_fever, "fever_out": args.fever_out}),
    );
    let corpus = load_corpus(&args.corpus)?;
    let claims = load_claims(&args.claims)?;
    let index = open_index(&args.index, &corpus)?;
    let instances = build_instances(&claims, &corpus, &index, args.k_train)?;
    write_instances(&args.out, &instances)?;
    log::info!("wrote {} instances to {}", instances.len(), args.out.display());
    if let (Some(fever), Some(pages), Some(out)) = (&args.fever, &args.fever_pages, &args.fever_out) {
        let pages = load_corpus(pages)?;
        let page_index = RetrievalIndex::build_tfidf(&pages, Default::default());
        let fever_instances = load_fever(fever, &pages, &page_index, args.k_fever)?;
        write_instances(out, &fever_instances)?;
        log::info!("wrote {} FEVER instances to {}", fever_instances.len(), out.display());
    }
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { config.$field = v; })*
        };
    }
    set!(gamma => gamma, k_retrieval => k_retrieval, k_train => k_train, k_fever => k_fever,
         lr => learning_rate, encoder_lr => encoder_learning_rate, batch_size => batch_size,
         dropout => dropout, epochs => total_epochs, seed => seed, mode => mode, stance_head => stance_head);
    config.validate().map_err(invalid)?;
    Ok(config)
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let config = resolve_train_config(&args)?;
    log_resolved(
        "train",
        &json!({"config": config, "train": args.train, "dev": args.dev, "fever": args.fever,
                "init_checkpoint": args.init_checkpoint, "out": args.out, "metrics_log": args.metrics_log}),
    );
    let (Some(train_path), Some(out)) = (&args.train, &args.out) else {
        bail!(Invalid("train needs --train and --out".into()));
    };
    let train_set = read_instances(train_path)?;
    let dev_set = match &args.dev {
        Some(p) => read_instances(p)?,
        None => Vec::new(),
    };
    let fever_set = match &args.fever {
        Some(p) => read_instances(p)?,
        None => Vec::new(),
    };
    let (model, parent) = match &args.init_checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(invalid)?;
            let mut model: JointModelF64 = ck.to_model().map_err(invalid)?;
            let wanted = config.model_config(model.tokenizer.vocab_size());
            if wanted.domains != model.config.domains || wanted.stance_head != model.config.stance_head {
                log::info!("re-binding heads for the requested mode and stance head");
                let tokenizer = model.tokenizer.clone();
                let mut fresh = JointModelF64::new(wanted, tokenizer, config.seed).map_err(invalid)?;
                for (_, p) in model.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
                    fresh.store.insert(p.name.clone(), p.value.clone());
                }
                model = fresh;
            }
            (model, Some(ck.hash()))
        }
        None => (
            config.init_model(&[&train_set, &fever_set]).map_err(invalid)?,
            None,
        ),
    };
    let data = TrainData {
        train: &train_set,
        dev: &dev_set,
        fever: &fever_set,
        parent: parent.as_deref(),
    };
    match train(&config, data, model) {
        Ok(outcome) => {
            outcome.checkpoint.save(out)?;
            if let Some(path) = &args.metrics_log {
                write_jsonl(path, &outcome.log)?;
            }
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} epochs; final L_total {:.4}; checkpoint {} (epoch {:?}, sha256 {})",
                    outcome.log.len(),
                    last.l_total,
                    out.display(),
                    outcome.checkpoint.lineage.epoch,
                    outcome.checkpoint.hash()
                );
            }
            Ok(())
        }
        Err(TrainError::NonFinite { last_good, .. }) => {
            let path = out.with_extension("last_good.json");
            last_good.save(&path)?;
            bail!("non-finite loss; last good checkpoint saved to {}", path.display())
        }
        Err(TrainError::Core(e)) => Err(invalid(e)),
    }
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    log_resolved(
        "predict",
        &json!({"checkpoint": args.checkpoint, "corpus": args.corpus, "claims": args.claims,
                "task": args.task, "k_retrieval": args.k_retrieval, "backend": args.index.backend,
                "out": args.out, "submission": args.submission}),
    );
    let checkpoint = Checkpoint::load(&args.checkpoint).map_err(invalid)?;
    let model: JointModelF64 = checkpoint.to_model().map_err(invalid)?;
    let corpus = load_corpus(&args.corpus)?;
    let claims = load_claims(&args.claims)?;
    let index = match args.task {
        Task::Open => Some(open_index(&args.index, &corpus)?),
        Task::Oracle => None,
    };
    let config = PipelineConfig {
        task: args.task,
        k_retrieval: args.k_retrieval,
    };
    let retriever = index.as_ref().map(|i| i as &(dyn Retriever + Sync));
    let result = run_pipeline(&config, &claims, &corpus, &model, retriever).map_err(invalid)?;
    write_jsonl(&args.out, &result.outputs)?;
    if let Some(path) = &args.submission {
        let ids: Vec<u64> = claims.iter().map(|c| c.id).collect();
        write_jsonl(path, &to_submission(&ids, &result.predictions))?;
    }
    println!("{} predictions for {} claims", result.predictions.len(), claims.len());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> anyhow::Result<()> {
    log_resolved(
        "evaluate",
        &json!({"pred": args.pred, "gold": args.gold, "max_sentences": args.max_sentences, "json": args.json}),
    );
    let preds = read_predictions(&args.pred).map_err(invalid)?;
    let claims = load_claims(&args.gold)?;
    let opts = EvalOptions {
        max_sentences: args.max_sentences,
    };
    let report = evaluate(&preds, &GoldSet::from_claims(&claims), opts);
    print!("{report}");
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn selftest(args: SelftestArgs) -> anyhow::Result<()> {
    log_resolved("selftest", &json!({"seed": args.seed}));
    let results = run_selftest(args.seed);
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        bail!("selftest failed")
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Retrieve(a) => retrieve(a),
        Command::BuildData(a) => build_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
