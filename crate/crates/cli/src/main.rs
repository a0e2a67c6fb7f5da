//! `lawmatch`: prepare corpora, train and evaluate fold models, precompute
//! candidate caches, re-rank BM25 results and export interaction heatmaps.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lawmatch_core::data::{filter_articles, load_corpus, make_synthetic_corpus, LoadOptions, SyntheticSpec};
use lawmatch_core::encoder::{encode_case, from_config, CachedEncoder, CountingEncoder, EmbeddingCache, SentenceEncoder};
use lawmatch_core::export::Explanation;
use lawmatch_core::model::Model;
use lawmatch_core::pipeline::bm25::Bm25Index;
use lawmatch_core::pipeline::cache::{precompute_all, CandidateCache};
use lawmatch_core::pipeline::metrics::{matching_csv, ranking_csv};
use lawmatch_core::pipeline::rerank::{rerank, RankingLine};
use lawmatch_core::pipeline::{evaluate_matching, evaluate_ranking, train, Experiment, FoldData, Units};
use lawmatch_core::{Corpus, Error, RunConfig, Task, Variant};

#[derive(Parser)]
#[command(name = "lawmatch", version, about = "Legal case matching and retrieval with law-article-aware interaction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Corpus directory written by `prepare`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Sentence-embedding store and candidate caches.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    task: Option<Task>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    min_support: Option<usize>,
    #[arg(long, global = true)]
    relevant_min_grade: Option<u32>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Normalize a corpus directory or generate a synthetic one into --out-dir.
    Prepare {
        #[arg(long)]
        synthetic: bool,
        #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        articles: usize,
    },
    /// Train one model per fold into --out-dir/fold<k>.
    Train {
        /// Train a single fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score fold models on their test parts and write metrics.csv.
    Evaluate {
        /// Directory holding fold<k>/model.json (default: --out-dir).
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Store candidate-side tensors for every corpus case.
    Precompute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// BM25 top-k, then re-rank with cached candidate tensors; writes rankings.jsonl.
    Rerank {
        #[arg(long)]
        model: PathBuf,
        /// Query case id (repeatable); defaults to every ranking query in the corpus.
        #[arg(long)]
        query: Vec<String>,
        #[arg(long, default_value_t = 100)]
        topk: usize,
    },
    /// Export semantic, legal and AIA-weighted interaction matrices of one pair.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        candidate: String,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &c.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = &c.cache_dir {
        cfg.cache_dir = Some(v.clone());
    }
    if let Some(v) = c.seed {
        cfg.model.seed = v;
    }
    if let Some(v) = c.task {
        cfg.task = v;
    }
    if let Some(v) = c.variant {
        cfg.model.variant = v;
    }
    if let Some(v) = c.min_support {
        cfg.min_support = v;
    }
    if let Some(v) = c.relevant_min_grade {
        cfg.eval.relevant_min_grade = Some(v);
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn persist(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.toml"))?;
    Ok(())
}

fn load_opts(cfg: &RunConfig) -> LoadOptions {
    LoadOptions { max_sentences: cfg.model.max_sentences, max_tokens: cfg.model.max_tokens, ..Default::default() }
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(load_corpus(&cfg.data_dir, load_opts(cfg))?)
}

/// Configured encoder, optionally backed by the on-disk embedding store.
enum Layer {
    Plain(Box<dyn SentenceEncoder>),
    Cached(CachedEncoder<Box<dyn SentenceEncoder>>),
}

impl SentenceEncoder for Layer {
    fn name(&self) -> &str {
        match self {
            Layer::Plain(e) => e.name(),
            Layer::Cached(e) => e.name(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Layer::Plain(e) => e.dim(),
            Layer::Cached(e) => e.dim(),
        }
    }

    fn encode(&self, batch: &[&str]) -> lawmatch_core::Result<lawmatch_core::autograd::Mat> {
        match self {
            Layer::Plain(e) => e.encode(batch),
            Layer::Cached(e) => e.encode(batch),
        }
    }
}

type Encoder = CountingEncoder<Layer>;

fn encoder(cfg: &RunConfig) -> Result<Encoder> {
    let base = from_config(&cfg.encoder, cfg.model.d_b)?;
    let layer = match &cfg.cache_dir {
        Some(dir) => Layer::Cached(CachedEncoder::new(base, EmbeddingCache::open(&dir.join("embeddings.bin"))?)),
        None => Layer::Plain(base),
    };
    Ok(CountingEncoder::new(layer))
}

fn flush(enc: &Encoder) -> Result<()> {
    if let Layer::Cached(c) = enc.inner() {
        c.cache().flush()?;
    }
    Ok(())
}

fn candidate_dir(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir.clone().unwrap_or_else(|| cfg.out_dir.join("cache")).join("candidates")
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

fn folds_to_run(cfg: &RunConfig, fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        Some(f) if f >= cfg.model.folds => bail!(Error::Config(format!("fold {f} out of range for {} folds", cfg.model.folds))),
        Some(f) => Ok(vec![f]),
        None => Ok((0..cfg.model.folds).collect()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_prepare(cfg: &RunConfig, c: &Common, synthetic: bool, input: Option<&Path>, cases: usize, articles: usize) -> Result<()> {
    let corpus = if synthetic {
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(cfg.model.seed, cases, articles))?;
        match c.min_support {
            Some(m) => filter_articles(corpus, m)?,
            None => corpus,
        }
    } else {
        let dir = input.expect("clap requires --input without --synthetic");
        if !dir.is_dir() {
            bail!(Error::MissingFile(dir.to_path_buf()));
        }
        filter_articles(load_corpus(dir, load_opts(cfg))?, cfg.min_support)?
    };
    lawmatch_core::data::save_corpus(&corpus, &cfg.out_dir)?;
    persist(cfg, &cfg.out_dir)?;
    let summary = serde_json::json!({
        "stats": corpus.stats(),
        "diagnostics": corpus.diagnostics,
        "content_hash": corpus.content_hash()?,
    });
    write_json(&cfg.out_dir.join("stats.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, fold: Option<usize>) -> Result<()> {
    let corpus = corpus(cfg)?;
    let enc = encoder(cfg)?;
    let exp = Experiment::new(&corpus, &enc)?;
    flush(&enc)?;
    persist(cfg, &cfg.out_dir)?;
    let v = cfg.model.variant;
    log::info!("variant {v}: article loss {}", if v.has_lim() { "enabled" } else { "disabled" });
    for f in folds_to_run(cfg, fold)? {
        log::info!("training fold {f}");
        let data = exp.fold_split(cfg.task, cfg.model.folds, f, cfg.model.seed)?;
        let model = exp.init_model(&cfg.model)?;
        let (model, log) = match &data {
            FoldData::Pairs { train: tr, validation, .. } => {
                train(model, &corpus, &exp.embeddings, Units::Pairs(tr), Units::Pairs(validation), &cfg.eval)?
            }
            FoldData::Queries { train: tr, validation, .. } => {
                train(model, &corpus, &exp.embeddings, Units::Queries(tr), Units::Queries(validation), &cfg.eval)?
            }
        };
        let dir = fold_dir(&cfg.out_dir, f);
        std::fs::create_dir_all(&dir)?;
        model.save(&dir.join("model.json"))?;
        write_json(&dir.join("train_log.json"), &log)?;
        log::info!("fold {f}: best epoch {:?}, validation {:?}", log.best_epoch, log.best_validation);
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, model_dir: Option<&Path>, fold: Option<usize>) -> Result<()> {
    let corpus = corpus(cfg)?;
    let enc = encoder(cfg)?;
    let exp = Experiment::new(&corpus, &enc)?;
    flush(&enc)?;
    let model_dir = model_dir.unwrap_or(&cfg.out_dir);
    let (mut ranking, mut matching) = (Vec::new(), Vec::new());
    for f in folds_to_run(cfg, fold)? {
        let path = fold_dir(model_dir, f).join("model.json");
        let model = Model::load(&path).with_context(|| format!("loading fold {f} model"))?;
        let mc = &model.config;
        match exp.fold_split(cfg.task, mc.folds, f, mc.seed)? {
            FoldData::Pairs { test, .. } => matching.push(evaluate_matching(&model, &test, &exp.embeddings, &cfg.eval)?),
            FoldData::Queries { test, .. } => ranking.push(evaluate_ranking(&model, &test, &exp.embeddings, &cfg.eval)?),
        }
    }
    let csv = match cfg.task {
        Task::Lcr => ranking_csv(&ranking),
        Task::Lcm => matching_csv(&matching),
    };
    persist(cfg, &cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn check_encoder(model: &Model, enc: &dyn SentenceEncoder) -> Result<()> {
    if model.encoder_name != enc.name() {
        bail!(Error::Config(format!(
            "model was trained with encoder `{}`, configuration uses `{}`",
            model.encoder_name,
            enc.name()
        )));
    }
    Ok(())
}

fn cmd_precompute(cfg: &RunConfig, model: &Path, jobs: usize) -> Result<()> {
    let corpus = corpus(cfg)?;
    let model = Model::load(model)?;
    let enc = encoder(cfg)?;
    check_encoder(&model, &enc)?;
    let dir = candidate_dir(cfg);
    let cases: Vec<_> = corpus.cases.values().collect();
    let done = precompute_all(&cases, &model, &enc, &dir, jobs)?;
    flush(&enc)?;
    persist(cfg, &cfg.out_dir)?;
    println!("cached {} candidates in {} ({} encoder calls)", done.len(), dir.display(), enc.calls());
    Ok(())
}

fn case_text(c: &lawmatch_core::Case) -> String {
    c.sentences.join(" ")
}

fn cmd_rerank(cfg: &RunConfig, model: &Path, queries: &[String], topk: usize) -> Result<()> {
    let corpus = corpus(cfg)?;
    let model = Model::load(model)?;
    let enc = encoder(cfg)?;
    check_encoder(&model, &enc)?;
    let fp = model.fingerprint();
    let dir = candidate_dir(cfg);
    let queries: Vec<String> =
        if queries.is_empty() { corpus.queries.iter().map(|q| q.query_id.clone()).collect() } else { queries.to_vec() };
    if queries.is_empty() {
        bail!(Error::Config("no --query given and the corpus has no ranking queries".into()));
    }
    let texts: Vec<(String, String)> = corpus.cases.values().map(|c| (c.id.clone(), case_text(c))).collect();
    persist(cfg, &cfg.out_dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("rankings.jsonl"))?);
    for qid in &queries {
        let query = corpus.case(qid)?;
        let index = Bm25Index::new(texts.iter().filter(|(id, _)| id != qid).map(|(id, t)| (id.as_str(), t.as_str())));
        let hits = index.retrieve(&case_text(query), topk)?;
        let caches = hits
            .iter()
            .map(|id| CandidateCache::load(&dir, id, &fp))
            .collect::<lawmatch_core::Result<Vec<_>>>()
            .context("candidate caches missing or stale; run `precompute` with this model")?;
        enc.reset();
        let ranking = rerank(query, &caches, &model, &enc)?;
        log::info!("query {qid}: {} candidates, {} encoder call(s)", ranking.len(), enc.calls());
        serde_json::to_writer(&mut out, &RankingLine::new(qid, ranking))?;
        writeln!(out)?;
    }
    out.flush()?;
    flush(&enc)?;
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, model: &Path, query: &str, candidate: &str) -> Result<()> {
    let corpus = corpus(cfg)?;
    let model = Model::load(model)?;
    let enc = encoder(cfg)?;
    check_encoder(&model, &enc)?;
    let x = encode_case(corpus.case(query)?, &enc)?;
    let y = encode_case(corpus.case(candidate)?, &enc)?;
    let written = Explanation::compute(&model, &x, &y)?.write(&cfg.out_dir)?;
    persist(cfg, &cfg.out_dir)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match &cli.cmd {
        Cmd::Prepare { synthetic, input, cases, articles } => {
            cmd_prepare(&cfg, &cli.common, *synthetic, input.as_deref(), *cases, *articles)
        }
        Cmd::Train { fold } => cmd_train(&cfg, *fold),
        Cmd::Evaluate { model_dir, fold } => cmd_evaluate(&cfg, model_dir.as_deref(), *fold),
        Cmd::Precompute { model, jobs } => cmd_precompute(&cfg, model, *jobs),
        Cmd::Rerank { model, query, topk } => cmd_rerank(&cfg, model, query, *topk),
        Cmd::Explain { model, query, candidate } => cmd_explain(&cfg, model, query, candidate),
    }
}

/// 2 for usage and configuration problems, 1 for failures of the operation itself.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::MissingFile(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
