use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use autocompressor::checkpoint;
use autocompressor::compressor::Document;
use autocompressor::config::{Provenance, RunConfig};
use autocompressor::corpus::{
    gen_corpus, read_corpus, split_by_id, write_annotations, write_corpus, SyntheticKind, Tokenizer,
};
use autocompressor::eval::{evaluate, run_ablation, tokenwise_gain, AblationPoint};
use autocompressor::icl::{eval_icl, marker_documents, marker_task, zero_shot_accuracy, Example};
use autocompressor::model::ModelState;
use autocompressor::rerank::{
    recall_at_k, rerank, rerank_corpus, rerank_documents, PassageSource, RerankInstance, RerankMode,
};
use autocompressor::retrieval::{
    fuse_passages, fuse_summaries, load_index, no_retrieval, oracle_retrieve, planted_corpus,
    replug_score, retrieve, FusionMode, PassageIndex,
};
use autocompressor::store::{build_store, load_store, StoreDtype, SummaryStore};
use autocompressor::train::Trainer;
use autocompressor::{Error, Model32};

#[derive(Parser)]
#[command(
    name = "autocomp",
    version,
    about = "Train and evaluate AutoCompressor language models"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a corpus (or a generated synthetic corpus).
    Train(TrainArgs),
    /// Final-segment perplexity after compressing n segments.
    EvalPpl(EvalPplArgs),
    /// Per-position likelihood gain from compressed context.
    Tokenwise(TokenwiseArgs),
    /// Train and evaluate every point of an ablation grid.
    Ablate(AblateArgs),
    /// In-context learning with compressed demonstrations.
    EvalIcl(EvalIclArgs),
    /// Split a corpus into passages and index them.
    BuildIndex(BuildIndexArgs),
    /// Precompute summary vectors for every indexed passage.
    BuildStore(BuildStoreArgs),
    /// Retrieval-augmented perplexity.
    EvalRetrieval(EvalRetrievalArgs),
    /// Re-rank first-stage candidates by query likelihood.
    Rerank(RerankArgs),
    /// Write a synthetic corpus.
    GenSynthetic(GenArgs),
    /// Print a checkpoint's config and parameter statistics.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (file or directory).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    /// Keep only the most recent summary block (RMT baseline).
    #[arg(long)]
    rmt: bool,
    #[arg(long)]
    fixed_segmenting: bool,
    #[arg(long)]
    stop_grad_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from the state left in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_compressed: Option<Vec<usize>>,
    #[arg(long)]
    seg_len: Option<usize>,
    /// Keep only the most recent summary block.
    #[arg(long)]
    rmt: bool,
}

#[derive(Args)]
struct TokenwiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seg_len: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON array of grid points.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
}

#[derive(Args)]
struct EvalIclArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Demonstration pool, one JSON example per line.
    #[arg(long, requires = "eval")]
    demos: Option<PathBuf>,
    /// Evaluation examples, one JSON example per line.
    #[arg(long, requires = "demos")]
    eval: Option<PathBuf>,
    /// Use the synthetic marker task with the label mapping swapped.
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    n_segments: Option<usize>,
    #[arg(long)]
    calibrate: bool,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    passage_len: Option<usize>,
}

#[derive(Args)]
struct BuildStoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
}

#[derive(Args)]
struct EvalRetrievalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Passage index; built from --corpus when absent.
    #[arg(long, conflicts_with = "corpus")]
    index: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Summary store; built in memory when absent.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Queries, one `{"x": .., "y": .., "relevant": [..]}` object per line.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    passage_len: Option<usize>,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
    /// Order fused summaries by distance to the summary of x.
    #[arg(long)]
    rerank: bool,
    /// Retrieve each query's listed relevant passages instead of searching.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instances, one JSON object per line.
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    doc_len: Option<usize>,
    #[arg(long)]
    seg_len: Option<usize>,
    #[arg(long)]
    key_distance: Option<usize>,
    #[arg(long)]
    n_keys: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    KvRecall,
    CopyPrefix,
    PlainMarkov,
    Topic,
    /// Re-ranking passages, instances and prompt-format training documents.
    Rerank,
    /// Topic passages with held-out queries for retrieval.
    Planted,
    /// Marker-task demonstrations, eval examples and training documents.
    Marker,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Replug,
    FusedSummaries,
    FusedPassages,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Replug => FusionMode::Replug,
            FusionArg::FusedSummaries => FusionMode::FusedSummaries,
            FusionArg::FusedPassages => FusionMode::FusedPassages,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    Float32,
    Float16,
}

impl From<DtypeArg> for StoreDtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::Float32 => StoreDtype::F32,
            DtypeArg::Float16 => StoreDtype::F16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Summary,
}

impl From<ModeArg> for RerankMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => RerankMode::Plain,
            ModeArg::Summary => RerankMode::Summary,
        }
    }
}

/// One retrieval query in text form.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    x: String,
    y: String,
    #[serde(default)]
    relevant: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One JSON line on stdout; a closed pipe is not an error.
fn say(v: &serde_json::Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{v}");
}

/// Writes `value` with the provenance stamp merged in and echoes it on stdout.
fn emit(
    dir: &Path,
    name: &str,
    prov: &Provenance,
    mut value: serde_json::Value,
) -> anyhow::Result<()> {
    if let serde_json::Value::Object(m) = &mut value {
        m.insert("provenance".into(), serde_json::to_value(prov)?);
    }
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    say(&json!({ "wrote": path }));
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Model32> {
    Ok(checkpoint::load::<f32>(path)?)
}

/// Documents from `path`, the configured file, or the synthetic generator.
fn corpus_docs(
    cfg: &RunConfig,
    path: Option<&Path>,
    eval_side: bool,
) -> anyhow::Result<Vec<Document>> {
    let configured = if eval_side {
        &cfg.corpus.eval
    } else {
        &cfg.corpus.train
    };
    if let Some(p) = path.or(configured.as_deref()) {
        return read_corpus(p).with_context(|| format!("reading corpus {}", p.display()));
    }
    let all: Vec<Document> = gen_corpus(&cfg.corpus.synthetic, "doc", cfg.corpus.n_docs, cfg.seed)?
        .into_iter()
        .map(|s| s.doc)
        .collect();
    let (train, eval) = split_by_id(all, cfg.corpus.eval_fraction, |d| d.id.as_str());
    Ok(if eval_side { eval } else { train })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    apply_flags(&mut cfg, &cli.cmd);
    let cfg = cfg.resolve()?;
    let out = cli.out.as_path();
    cfg.write_resolved(out)?;
    let prov = cfg.provenance();

    match cli.cmd {
        Cmd::Train(a) => {
            let docs = corpus_docs(&cfg, a.corpus.as_deref(), false)?;
            let model = ModelState::<f32>::init(cfg.model.clone(), cfg.seed)?;
            let mut t = Trainer::new(model, cfg.train.clone(), Some(out.to_path_buf()))?;
            let resumed = a.resume && t.resume()?;
            let outcome = t.run(&docs)?.clone();
            let final_loss = outcome.loss_curve.last().map(|x| x.1);
            emit(
                out,
                "train_report.json",
                &prov,
                json!({
                    "steps": cfg.train.steps,
                    "resumed": resumed,
                    "n_docs": docs.len(),
                    "final_loss": final_loss,
                    "peak_graph_nodes": outcome.peak_graph_nodes,
                    "checkpoint": out.join("model.ckpt"),
                }),
            )
        }
        Cmd::EvalPpl(a) => {
            let model = load_model(&a.checkpoint)?;
            let docs = corpus_docs(&cfg, a.corpus.as_deref(), true)?;
            let report = evaluate(
                &model,
                &docs,
                cfg.eval.seg_len,
                &cfg.eval.n_compressed,
                &cfg.train.compressor,
                cfg.to_json(),
                cfg.seed,
            )?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    detail: "evaluation produced a non-finite perplexity".into(),
                }
                .into());
            }
            emit(
                out,
                "eval_report.json",
                &prov,
                serde_json::to_value(&report)?,
            )
        }
        Cmd::Tokenwise(a) => {
            let model = load_model(&a.checkpoint)?;
            let docs = corpus_docs(&cfg, a.corpus.as_deref(), true)?;
            let curve = tokenwise_gain(
                &model,
                &docs,
                cfg.eval.seg_len,
                &cfg.train.compressor,
                cfg.eval.top_k_positions,
            )?;
            emit(out, "tokenwise.json", &prov, serde_json::to_value(&curve)?)
        }
        Cmd::Ablate(a) => {
            let grid: Vec<AblationPoint> = serde_json::from_slice(&std::fs::read(&a.grid)?)
                .map_err(|e| Error::Config {
                    field: a.grid.display().to_string(),
                    reason: e.to_string(),
                })?;
            let train_docs = corpus_docs(&cfg, a.corpus.as_deref(), false)?;
            let eval_docs = corpus_docs(&cfg, a.eval_corpus.as_deref(), true)?;
            let rows = run_ablation(&grid, &train_docs, &eval_docs)?;
            let table: Vec<_> = rows
                .into_iter()
                .map(|(name, rep)| json!({ "name": name, "report": rep }))
                .collect();
            emit(out, "ablation.json", &prov, json!({ "points": table }))
        }
        Cmd::EvalIcl(a) => {
            let model = load_model(&a.checkpoint)?;
            let (pool, eval): (Vec<Example>, Vec<Example>) = match (&a.demos, &a.eval) {
                (Some(d), Some(e)) => (read_jsonl(d)?, read_jsonl(e)?),
                _ => marker_task(
                    cfg.icl.marker_rule,
                    a.flip,
                    cfg.icl.n_pool,
                    cfg.icl.n_eval,
                    cfg.seed,
                ),
            };
            let seeds: Vec<u64> = (0..cfg.icl.n_seeds as u64)
                .map(|i| cfg.seed.wrapping_add(i))
                .collect();
            let zero_shot = zero_shot_accuracy(&model, &eval, &cfg.icl.task)?;
            let result = eval_icl(
                &model,
                &pool,
                &eval,
                &cfg.icl.task,
                &cfg.train.compressor,
                &seeds,
            )?;
            emit(
                out,
                "icl_report.json",
                &prov,
                json!({ "zero_shot": zero_shot, "compressed": result }),
            )
        }
        Cmd::BuildIndex(a) => {
            let docs = read_corpus(&a.corpus)
                .with_context(|| format!("reading corpus {}", a.corpus.display()))?;
            let index = PassageIndex::from_documents(&docs, cfg.retrieval.passage_len)?;
            index.save(&out.join("index.json"))?;
            emit(
                out,
                "index_report.json",
                &prov,
                json!({ "passages": index.len(), "passage_len": index.passage_len }),
            )
        }
        Cmd::BuildStore(a) => {
            let model = load_model(&a.checkpoint)?;
            let index = load_index(&a.index)?;
            let store = build_store(&model, &index.passages, cfg.retrieval.dtype)?;
            store.save(&out.join("store.acsv"))?;
            emit(
                out,
                "store_report.json",
                &prov,
                json!({ "blocks": store.len(), "dtype": store.dtype, "kappa": store.kappa }),
            )
        }
        Cmd::EvalRetrieval(a) => {
            let model = load_model(&a.checkpoint)?;
            let index = match (&a.index, &a.corpus) {
                (Some(p), _) => load_index(p)?,
                (None, Some(c)) => PassageIndex::from_documents(
                    &read_corpus(c).with_context(|| format!("reading corpus {}", c.display()))?,
                    cfg.retrieval.passage_len,
                )?,
                (None, None) => {
                    return Err(anyhow!(Error::Config {
                        field: "index".into(),
                        reason: "give --index or --corpus".into(),
                    }))
                }
            };
            let queries: Vec<QueryLine> = read_jsonl(&a.queries)?;
            let store: Option<SummaryStore> = match (cfg.retrieval.fusion, &a.store) {
                (FusionMode::FusedSummaries, Some(p)) => Some(load_store(p)?),
                (FusionMode::FusedSummaries, None) => {
                    Some(build_store(&model, &index.passages, cfg.retrieval.dtype)?)
                }
                _ => None,
            };
            let (mut base_lp, mut lp, mut n) = (0.0, 0.0, 0usize);
            for q in &queries {
                let x = Tokenizer.encode(&q.x);
                let y = Tokenizer.encode(&q.y);
                let retrieved = if a.oracle {
                    oracle_retrieve(&index, &q.relevant, cfg.retrieval.top_k)?
                } else {
                    retrieve(
                        &index,
                        &x,
                        cfg.retrieval.top_k,
                        cfg.retrieval.overlap_threshold,
                    )?
                };
                base_lp += no_retrieval(&model, &x, &y)?.log_prob;
                lp += match cfg.retrieval.fusion {
                    FusionMode::Replug => replug_score(&model, &x, &y, &retrieved, &index)?,
                    FusionMode::FusedPassages => fuse_passages(&model, &x, &y, &retrieved, &index)?,
                    FusionMode::FusedSummaries => fuse_summaries(
                        &model,
                        &x,
                        &y,
                        &retrieved,
                        store.as_ref().expect("store"),
                        cfg.retrieval.rerank,
                    )?,
                }
                .log_prob;
                n += y.len();
            }
            let ppl = |s: f64| (-s / n.max(1) as f64).exp();
            emit(
                out,
                "retrieval_report.json",
                &prov,
                json!({
                    "fusion": cfg.retrieval.fusion,
                    "top_k": cfg.retrieval.top_k,
                    "rerank": cfg.retrieval.rerank,
                    "oracle": a.oracle,
                    "queries": queries.len(),
                    "ppl_no_retrieval": ppl(base_lp),
                    "ppl": ppl(lp),
                    "gain": ppl(base_lp) - ppl(lp),
                }),
            )
        }
        Cmd::Rerank(a) => {
            let model = load_model(&a.checkpoint)?;
            let instances: Vec<RerankInstance> = read_jsonl(&a.instances)?;
            let index = a.index.as_deref().map(load_index).transpose()?;
            let store = a.store.as_deref().map(load_store).transpose()?;
            let source = PassageSource::new(index.as_ref(), store.as_ref());
            let mode = cfg.retrieval.rerank_mode;
            let rankings = instances
                .iter()
                .map(|q| rerank(&model, &source, q, mode))
                .collect::<autocompressor::Result<Vec<_>>>()?;
            let ranked: Vec<Vec<String>> = rankings.iter().map(|r| r.ids.clone()).collect();
            let golds: Vec<Vec<String>> = instances.iter().map(|q| q.gold_ids.clone()).collect();
            let first: Vec<Vec<String>> =
                instances.iter().map(|q| q.candidate_ids.clone()).collect();
            let recall: BTreeMap<usize, f64> = cfg
                .retrieval
                .recall_k
                .iter()
                .map(|&k| (k, recall_at_k(&ranked, &golds, k)))
                .collect();
            let baseline: BTreeMap<usize, f64> = cfg
                .retrieval
                .recall_k
                .iter()
                .map(|&k| (k, recall_at_k(&first, &golds, k)))
                .collect();
            emit(
                out,
                "rerank_report.json",
                &prov,
                json!({
                    "mode": mode,
                    "recall_at_k": recall,
                    "first_stage_recall_at_k": baseline,
                    "passage_forwards": source.passage_forwards(),
                    "rankings": rankings,
                }),
            )
        }
        Cmd::GenSynthetic(a) => gen_synthetic(&cfg, a.kind, out, &prov),
        Cmd::InspectCheckpoint(a) => {
            let bytes = std::fs::read(&a.checkpoint)?;
            let model: Model32 = checkpoint::decode(&bytes)?;
            let tensors: Vec<_> = model
                .params
                .iter()
                .map(|t| {
                    let d = t.data();
                    let l2 = d
                        .iter()
                        .map(|v| (*v as f64) * (*v as f64))
                        .sum::<f64>()
                        .sqrt();
                    json!({ "shape": t.shape(), "l2": l2 })
                })
                .collect();
            let sha = {
                use sha2::{Digest, Sha256};
                Sha256::digest(&bytes)
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect::<String>()
            };
            say(&json!({
                "config": model.config,
                "param_count": model.param_count(),
                "sha256": sha,
                "tensors": tensors,
            }));
            Ok(())
        }
    }
}

fn gen_synthetic(
    cfg: &RunConfig,
    kind: GenKind,
    out: &Path,
    prov: &Provenance,
) -> anyhow::Result<()> {
    let spec = &cfg.corpus.synthetic;
    let count = cfg.corpus.n_docs;
    let mut files: Vec<PathBuf> = Vec::new();
    let base = match kind {
        GenKind::KvRecall => Some(SyntheticKind::KvRecall),
        GenKind::CopyPrefix => Some(SyntheticKind::CopyPrefix),
        GenKind::PlainMarkov => Some(SyntheticKind::PlainMarkov),
        GenKind::Topic => Some(SyntheticKind::Topic),
        _ => None,
    };
    if let Some(k) = base {
        let spec = autocompressor::corpus::SyntheticSpec {
            kind: k,
            ..spec.clone()
        };
        let docs = gen_corpus(&spec, "doc", count, cfg.seed)?;
        let plain: Vec<Document> = docs.iter().map(|s| s.doc.clone()).collect();
        files.push(out.join("corpus.txt"));
        write_corpus(&files[0], &plain)?;
        files.push(out.join("annotations.json"));
        write_annotations(&files[1], &docs)?;
    } else {
        match kind {
            GenKind::Rerank => {
                let (passages, instances) = rerank_corpus(spec, count, 20, 16, cfg.seed)?;
                let index = PassageIndex::new(passages, spec.seg_len, Default::default())?;
                files.push(out.join("index.json"));
                index.save(&files[0])?;
                files.push(out.join("instances.jsonl"));
                write_jsonl(&files[1], &instances)?;
                files.push(out.join("train.txt"));
                write_corpus(
                    &files[2],
                    &rerank_documents(spec, count, spec.doc_len, 16, cfg.seed),
                )?;
            }
            GenKind::Planted => {
                let pc = planted_corpus(spec, count, 5, 0.02, 1, cfg.seed)?;
                let index = PassageIndex::new(pc.passages, spec.seg_len, Default::default())?;
                files.push(out.join("index.json"));
                index.save(&files[0])?;
                let lines: Vec<QueryLine> = pc
                    .queries
                    .iter()
                    .map(|q| QueryLine {
                        x: Tokenizer.decode(&q.x),
                        y: Tokenizer.decode(&q.y),
                        relevant: q.relevant.clone(),
                    })
                    .collect();
                files.push(out.join("queries.jsonl"));
                write_jsonl(&files[1], &lines)?;
            }
            GenKind::Marker => {
                let rule = cfg.icl.marker_rule;
                let (pool, eval) =
                    marker_task(rule, false, cfg.icl.n_pool, cfg.icl.n_eval, cfg.seed);
                files.push(out.join("demos.jsonl"));
                write_jsonl(&files[0], &pool)?;
                files.push(out.join("eval.jsonl"));
                write_jsonl(&files[1], &eval)?;
                files.push(out.join("train.txt"));
                write_corpus(
                    &files[2],
                    &marker_documents(rule, count, spec.doc_len, cfg.seed),
                )?;
            }
            _ => unreachable!(),
        }
    }
    let names: Vec<String> = files
        .iter()
        .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    emit(out, "gen_report.json", prov, json!({ "files": names }))
}

/// Copies subcommand flags into the config before resolution.
fn apply_flags(cfg: &mut RunConfig, cmd: &Cmd) {
    match cmd {
        Cmd::Train(a) => {
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.lr {
                cfg.train.adam.lr = v;
            }
            if let Some(v) = a.kappa {
                cfg.model.kappa = v;
                cfg.train.compressor.kappa = v;
            }
            if a.rmt {
                cfg.train.compressor.accumulation = false;
            }
            if a.fixed_segmenting {
                cfg.train.compressor.randomized_segmenting = false;
            }
            if let Some(v) = a.stop_grad_every {
                cfg.train.compressor.stop_grad_every = v;
            }
            if let Some(v) = a.checkpoint_every {
                cfg.train.checkpoint_every = v;
            }
        }
        Cmd::EvalPpl(a) => {
            if let Some(v) = &a.n_compressed {
                cfg.eval.n_compressed = v.clone();
            }
            if let Some(v) = a.seg_len {
                cfg.eval.seg_len = v;
            }
            if a.rmt {
                cfg.train.compressor.accumulation = false;
            }
        }
        Cmd::Tokenwise(a) => {
            if let Some(v) = a.seg_len {
                cfg.eval.seg_len = v;
            }
            if let Some(v) = a.top_k {
                cfg.eval.top_k_positions = v;
            }
        }
        Cmd::EvalIcl(a) => {
            if let Some(v) = a.n_segments {
                cfg.icl.task.n_segments = v;
            }
            if a.calibrate {
                cfg.icl.task.use_calibration = true;
            }
        }
        Cmd::BuildIndex(a) => {
            if let Some(v) = a.passage_len {
                cfg.retrieval.passage_len = v;
            }
        }
        Cmd::BuildStore(a) => {
            if let Some(v) = a.dtype {
                cfg.retrieval.dtype = v.into();
            }
        }
        Cmd::EvalRetrieval(a) => {
            if let Some(v) = a.fusion {
                cfg.retrieval.fusion = v.into();
            }
            if let Some(v) = a.top_k {
                cfg.retrieval.top_k = v;
            }
            if let Some(v) = a.passage_len {
                cfg.retrieval.passage_len = v;
            }
            if let Some(v) = a.dtype {
                cfg.retrieval.dtype = v.into();
            }
            if a.rerank {
                cfg.retrieval.rerank = true;
            }
        }
        Cmd::Rerank(a) => {
            if let Some(v) = a.mode {
                cfg.retrieval.rerank_mode = v.into();
            }
            if let Some(v) = &a.k {
                cfg.retrieval.recall_k = v.clone();
            }
        }
        Cmd::GenSynthetic(a) => {
            if let Some(k) = match a.kind {
                GenKind::KvRecall => Some(SyntheticKind::KvRecall),
                GenKind::CopyPrefix => Some(SyntheticKind::CopyPrefix),
                GenKind::PlainMarkov => Some(SyntheticKind::PlainMarkov),
                GenKind::Topic | GenKind::Rerank | GenKind::Planted => Some(SyntheticKind::Topic),
                GenKind::Marker => None,
            } {
                cfg.corpus.synthetic.kind = k;
            }
            if let Some(v) = a.count {
                cfg.corpus.n_docs = v;
            }
            if let Some(v) = a.doc_len {
                cfg.corpus.synthetic.doc_len = v;
            }
            if let Some(v) = a.seg_len {
                cfg.corpus.synthetic.seg_len = v;
            }
            if let Some(v) = a.key_distance {
                cfg.corpus.synthetic.key_distance = v;
            }
            if let Some(v) = a.n_keys {
                cfg.corpus.synthetic.n_keys = v;
            }
        }
        Cmd::Ablate(_) | Cmd::InspectCheckpoint(_) => {}
    }
}

/// `{"error": kind, "message": ..}` on one line.
fn error_line(kind: &str, message: &str) -> String {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    json!({ "error": kind, "message": flat }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_line("usage", &e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map(Error::kind)
                .unwrap_or("error");
            eprintln!("{}", error_line(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
