//! Unsupervised passage re-ranking by query likelihood under an instruction
//! prompt, from plain passage text or from stored summary vectors.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::Document;
use crate::corpus::{random_topic, topic_text, SyntheticSpec, Tokenizer, TOPIC_DENSITY};
use crate::error::{Error, Result};
use crate::model::{ModelState, SoftPrompt};
use crate::retrieval::PassageIndex;
use crate::scalar::Scalar;
use crate::store::SummaryStore;

pub const PROMPT_HEAD: &str = "Passage: ";
pub const PROMPT_TAIL: &str = ". Please write a question based on this passage.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMode {
    Plain,
    Summary,
}

impl std::str::FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "summary" => Ok(Self::Summary),
            other => Err(Error::Config {
                field: "mode".into(),
                reason: format!("unknown rerank mode {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankInstance {
    pub query: String,
    /// First-stage order.
    pub candidate_ids: Vec<String>,
    pub gold_ids: Vec<String>,
}

/// Instruction prompt around `passage` (empty slot in summary mode).
pub fn render_prompt(passage: &[usize]) -> Vec<usize> {
    let mut out = Tokenizer.encode(PROMPT_HEAD);
    out.extend_from_slice(passage);
    out.extend(Tokenizer.encode(PROMPT_TAIL));
    out
}

/// Where candidate passages come from. Plain-text reads are counted.
pub struct PassageSource<'a> {
    pub index: Option<&'a PassageIndex>,
    pub store: Option<&'a SummaryStore>,
    passage_reads: AtomicU64,
}

impl<'a> PassageSource<'a> {
    pub fn new(index: Option<&'a PassageIndex>, store: Option<&'a SummaryStore>) -> Self {
        Self {
            index,
            store,
            passage_reads: AtomicU64::new(0),
        }
    }

    /// Forward passes that consumed passage text.
    pub fn passage_forwards(&self) -> u64 {
        self.passage_reads.load(Ordering::Relaxed)
    }
}

/// Mean log-prob of the query after the rendered prompt.
pub fn score_passage<S: Scalar>(
    model: &ModelState<S>,
    source: &PassageSource,
    id: &str,
    query: &[usize],
    mode: RerankMode,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Invalid(
            "query likelihood of an empty query is undefined".into(),
        ));
    }
    let lp = match mode {
        RerankMode::Plain => {
            let index = source
                .index
                .ok_or_else(|| Error::Invalid("plain mode needs a passage index".into()))?;
            let p = index
                .passage(id)
                .ok_or_else(|| Error::MissingBlocks(vec![id.to_string()]))?;
            source.passage_reads.fetch_add(1, Ordering::Relaxed);
            model.continuation_logprobs(&SoftPrompt::empty(), &render_prompt(&p.tokens), query)?
        }
        RerankMode::Summary => {
            let store = source
                .store
                .ok_or_else(|| Error::Invalid("summary mode needs a summary store".into()))?;
            let block = store.gather::<S>(&[id])?;
            model.continuation_logprobs(&SoftPrompt::new(block), &render_prompt(&[]), query)?
        }
    };
    Ok(lp.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / lp.len() as f64)
}

/// Indices sorted by descending score; ties keep the input order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn rerank<S: Scalar>(
    model: &ModelState<S>,
    source: &PassageSource,
    instance: &RerankInstance,
    mode: RerankMode,
) -> Result<Ranking> {
    if instance.candidate_ids.is_empty() {
        return Err(Error::Invalid(
            "re-ranking needs at least one candidate".into(),
        ));
    }
    let query = Tokenizer.encode(&instance.query);
    let scores = instance
        .candidate_ids
        .iter()
        .map(|id| score_passage(model, source, id, &query, mode))
        .collect::<Result<Vec<f64>>>()?;
    let order = rank_by_scores(&scores);
    Ok(Ranking {
        ids: order
            .iter()
            .map(|&i| instance.candidate_ids[i].clone())
            .collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}

/// Fraction of lists with at least one gold id among the first `k`.
pub fn recall_at_k(ranked: &[Vec<String>], golds: &[Vec<String>], k: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(golds)
        .filter(|(r, g)| r.iter().take(k).any(|id| g.contains(id)))
        .count();
    hits as f64 / ranked.len() as f64
}

/// Share of topic letters in a re-ranking query.
pub const QUERY_DENSITY: f64 = 0.5;

/// Topic re-ranking corpus: each instance has `n_candidates` passages of
/// `spec.seg_len` tokens with pairwise different topics, in a random
/// first-stage order. The query is fresh `query_len`-token text on the gold
/// passage's topic.
pub fn rerank_corpus(
    spec: &SyntheticSpec,
    n_instances: usize,
    n_candidates: usize,
    query_len: usize,
    seed: u64,
) -> Result<(Vec<Document>, Vec<RerankInstance>)> {
    if n_candidates == 0 || query_len == 0 {
        return Err(Error::Config {
            field: "n_candidates".into(),
            reason: "candidates and query length must be positive".into(),
        });
    }
    let mut passages = Vec::new();
    let mut instances = Vec::new();
    for i in 0..n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut topics: Vec<Vec<u8>> = Vec::with_capacity(n_candidates);
        while topics.len() < n_candidates {
            let mut t = random_topic(&mut rng);
            t.sort_unstable();
            if !topics.contains(&t) {
                topics.push(t);
            }
        }
        let mut ids = Vec::with_capacity(n_candidates);
        for (j, t) in topics.iter().enumerate() {
            let id = format!("q{i}-p{j}");
            let text = topic_text(spec, t, spec.seg_len, TOPIC_DENSITY, &mut rng);
            passages.push(Document::new(id.clone(), text));
            ids.push(id);
        }
        let gold = rng.gen_range(0..n_candidates);
        let query = topic_text(spec, &topics[gold], query_len, QUERY_DENSITY, &mut rng);
        let gold_id = ids[gold].clone();
        ids.shuffle(&mut rng);
        instances.push(RerankInstance {
            query: Tokenizer.decode(&query),
            candidate_ids: ids,
            gold_ids: vec![gold_id],
        });
    }
    Ok((passages, instances))
}

/// Training documents in the scoring format: repeated blocks of a topic
/// passage, the instruction prompt with an empty slot, and a query on the
/// passage's topic. Each block draws a fresh topic.
pub fn rerank_documents(
    spec: &SyntheticSpec,
    count: usize,
    doc_len: usize,
    query_len: usize,
    seed: u64,
) -> Vec<Document> {
    let prompt = render_prompt(&[]);
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut tokens = Vec::with_capacity(doc_len + spec.seg_len + prompt.len() + query_len);
            while tokens.len() < doc_len {
                let topic = random_topic(&mut rng);
                tokens.extend(topic_text(
                    spec,
                    &topic,
                    spec.seg_len,
                    TOPIC_DENSITY,
                    &mut rng,
                ));
                tokens.extend_from_slice(&prompt);
                tokens.extend(topic_text(spec, &topic, query_len, QUERY_DENSITY, &mut rng));
            }
            tokens.truncate(doc_len);
            Document::new(format!("rr-{i}"), tokens)
        })
        .collect()
}
