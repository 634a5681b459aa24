//! Retrieval-augmented language modeling: a hashing bag-of-embeddings
//! retriever, REPLUG ensembling, and fused summaries / fused passages with
//! smoothing against the unconditioned prediction.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::Document;
use crate::corpus::{random_topic, topic_text, SyntheticSpec, TOPIC_DENSITY};
use crate::error::{Error, Result};
use crate::model::{ModelState, SoftPrompt};
use crate::scalar::Scalar;
use crate::store::SummaryStore;
use crate::tensor::Tensor;

/// Fixed random embedder over hashed unigrams and bigrams.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub buckets: usize,
    pub seed: u64,
    table: Vec<f64>,
}

impl HashEmbedder {
    pub fn new(dim: usize, buckets: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::<f64>::randn(&[buckets, dim], 1.0, &mut rng).into_data();
        Self {
            dim,
            buckets,
            seed,
            table,
        }
    }

    fn bucket(&self, prev: Option<usize>, cur: usize) -> usize {
        // splitmix-style mixing keeps unigram and bigram keys apart
        let key = match prev {
            None => cur as u64,
            Some(p) => ((p as u64 + 1) << 32) | cur as u64,
        };
        let mut z = key.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        ((z ^ (z >> 31)) % self.buckets as u64) as usize
    }

    /// Unit-norm mean of the feature rows of `tokens`.
    pub fn embed(&self, tokens: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut add = |b: usize| {
            for (x, t) in v
                .iter_mut()
                .zip(&self.table[b * self.dim..(b + 1) * self.dim])
            {
                *x += t;
            }
        };
        for (i, &t) in tokens.iter().enumerate() {
            add(self.bucket(None, t));
            if i > 0 {
                add(self.bucket(Some(tokens[i - 1]), t));
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64, 4096, 0)
    }
}

/// Passages with their retriever features.
#[derive(Clone, Debug)]
pub struct PassageIndex {
    pub passage_len: usize,
    pub passages: Vec<Document>,
    pub vectors: Vec<Vec<f64>>,
    pub embedder: HashEmbedder,
    by_id: HashMap<String, usize>,
}

/// Cuts each document into consecutive passages of `passage_len` tokens
/// (the last one may be shorter), ids `{doc}#{k}`.
pub fn split_passages(docs: &[Document], passage_len: usize) -> Vec<Document> {
    docs.iter()
        .flat_map(|d| {
            d.tokens
                .chunks(passage_len.max(1))
                .enumerate()
                .map(move |(k, c)| Document::new(format!("{}#{k}", d.id), c.to_vec()))
        })
        .collect()
}

impl PassageIndex {
    pub fn new(
        passages: Vec<Document>,
        passage_len: usize,
        embedder: HashEmbedder,
    ) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate passage id {:?}", p.id)));
            }
        }
        let vectors = passages.iter().map(|p| embedder.embed(&p.tokens)).collect();
        Ok(Self {
            passage_len,
            passages,
            vectors,
            embedder,
            by_id,
        })
    }

    pub fn from_documents(docs: &[Document], passage_len: usize) -> Result<Self> {
        Self::new(
            split_passages(docs, passage_len),
            passage_len,
            HashEmbedder::default(),
        )
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    /// JSON file with the passages and embedder parameters; features are
    /// recomputed on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            passage_len: self.passage_len,
            dim: self.embedder.dim,
            buckets: self.embedder.buckets,
            embedder_seed: self.embedder.seed,
            passages: self.passages.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    passage_len: usize,
    dim: usize,
    buckets: usize,
    embedder_seed: u64,
    passages: Vec<Document>,
}

pub fn load_index(path: &Path) -> Result<PassageIndex> {
    let f: IndexFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if f.dim == 0 || f.buckets == 0 {
        return Err(Error::Config {
            field: "index".into(),
            reason: "embedder dim and buckets must be positive".into(),
        });
    }
    PassageIndex::new(
        f.passages,
        f.passage_len,
        HashEmbedder::new(f.dim, f.buckets, f.embedder_seed),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Replug,
    FusedSummaries,
    FusedPassages,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replug" => Ok(Self::Replug),
            "fused-summaries" => Ok(Self::FusedSummaries),
            "fused-passages" => Ok(Self::FusedPassages),
            other => Err(Error::Config {
                field: "fusion".into(),
                reason: format!("unknown fusion mode {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: String,
    pub similarity: f64,
    pub lambda: f64,
}

/// Retrieved passages, most similar first; `lambda` is the softmax of the
/// similarities over the set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub entries: Vec<Retrieved>,
}

impl RetrievedSet {
    /// Sorts by descending similarity (stable) and attaches softmax weights.
    pub fn from_scores(scored: Vec<(String, f64)>) -> Self {
        let mut scored = scored;
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scored.iter().map(|s| (s.1 - max).exp()).collect();
        let z: f64 = e.iter().sum();
        Self {
            entries: scored
                .into_iter()
                .zip(e)
                .map(|((id, similarity), w)| Retrieved {
                    id,
                    similarity,
                    lambda: w / z,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

/// Length of the longest common contiguous run of `a` and `b`.
pub fn longest_overlap(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

pub const DEFAULT_OVERLAP_THRESHOLD: usize = 8;

/// Top-`k` passages by cosine similarity to `x`, skipping passages that
/// share a run of `overlap_threshold` or more tokens with `x`.
pub fn retrieve(
    index: &PassageIndex,
    x: &[usize],
    k: usize,
    overlap_threshold: usize,
) -> Result<RetrievedSet> {
    if index.is_empty() {
        return Err(Error::Invalid("cannot retrieve from an empty index".into()));
    }
    if k > index.len() {
        return Err(Error::Config {
            field: "top_k".into(),
            reason: format!("{k} exceeds the index size {}", index.len()),
        });
    }
    let q = index.embedder.embed(x);
    let mut scored: Vec<(usize, f64)> = index
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.iter().zip(&q).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let picked: Vec<(String, f64)> = scored
        .into_iter()
        .filter(|&(i, _)| longest_overlap(&index.passages[i].tokens, x) < overlap_threshold)
        .take(k)
        .map(|(i, s)| (index.passages[i].id.clone(), s))
        .collect();
    Ok(RetrievedSet::from_scores(picked))
}

/// Log-probability of a continuation `y`, with per-token probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub log_prob: f64,
    pub token_probs: Vec<f64>,
    /// Order in which passages or blocks were placed before `x`.
    pub order: Vec<String>,
}

impl Scored {
    pub fn prob(&self) -> f64 {
        self.log_prob.exp()
    }
}

fn probs<S: Scalar>(lp: &[S]) -> Vec<f64> {
    lp.iter().map(|v| v.to_f64_lossy().exp()).collect()
}

fn lookup<'a>(index: &'a PassageIndex, id: &str) -> Result<&'a Document> {
    index
        .passage(id)
        .ok_or_else(|| Error::MissingBlocks(vec![id.to_string()]))
}

/// `sum_d lambda_d * p(y | d, x)`, each branch a product of per-token
/// probabilities.
pub fn replug_score<S: Scalar>(
    model: &ModelState<S>,
    x: &[usize],
    y: &[usize],
    retrieved: &RetrievedSet,
    index: &PassageIndex,
) -> Result<Scored> {
    if retrieved.is_empty() {
        return Err(Error::Invalid("replug needs at least one passage".into()));
    }
    let window = model.config.context_window;
    let mut branch = Vec::with_capacity(retrieved.len());
    let mut token_probs = vec![0.0; y.len()];
    for e in &retrieved.entries {
        let d = lookup(index, &e.id)?;
        let len = d.len() + x.len() + y.len();
        if len > window {
            return Err(Error::PassageOverflow {
                passage: e.id.clone(),
                len,
                window,
            });
        }
        let mut ctx = d.tokens.clone();
        ctx.extend_from_slice(x);
        let lp = model.continuation_logprobs(&SoftPrompt::empty(), &ctx, y)?;
        for (t, p) in token_probs.iter_mut().zip(probs(&lp)) {
            *t += e.lambda * p;
        }
        let sum: f64 = lp.iter().map(|v| v.to_f64_lossy()).sum();
        branch.push(e.lambda.ln() + sum);
    }
    let max = branch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_prob = max + branch.iter().map(|b| (b - max).exp()).sum::<f64>().ln();
    Ok(Scored {
        log_prob,
        token_probs,
        order: retrieved.ids().iter().map(|s| s.to_string()).collect(),
    })
}

/// Per-token `(p_cond + p_plain) / 2`.
pub fn smooth(cond: &[f64], plain: &[f64]) -> Vec<f64> {
    cond.iter().zip(plain).map(|(a, b)| (a + b) / 2.0).collect()
}

fn smoothed<S: Scalar>(
    model: &ModelState<S>,
    prompt: &SoftPrompt<S>,
    ctx: &[usize],
    x: &[usize],
    y: &[usize],
    order: Vec<String>,
) -> Result<Scored> {
    let cond = probs(&model.continuation_logprobs(prompt, ctx, y)?);
    let plain = probs(&model.continuation_logprobs(&SoftPrompt::empty(), x, y)?);
    let token_probs = smooth(&cond, &plain);
    Ok(Scored {
        log_prob: token_probs.iter().map(|p| p.ln()).sum(),
        token_probs,
        order,
    })
}

/// Frobenius distance between two blocks.
pub fn l2_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.to_f64_lossy() - q.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Block order for fused summaries: least relevant first, so the most
/// relevant block sits next to `x`. With `distances`, relevance is
/// ascending distance; otherwise the retriever order.
pub fn fusion_order(retrieved: &RetrievedSet, distances: Option<&[f64]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..retrieved.len()).collect();
    match distances {
        None => idx.reverse(),
        Some(d) => {
            idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(std::cmp::Ordering::Equal));
            idx.reverse();
        }
    }
    idx
}

/// Conditions on the concatenated summary blocks of the retrieved passages
/// and smooths with the unconditioned prediction.
pub fn fuse_summaries<S: Scalar>(
    model: &ModelState<S>,
    x: &[usize],
    y: &[usize],
    retrieved: &RetrievedSet,
    store: &SummaryStore,
    rerank: bool,
) -> Result<Scored> {
    let blocks = store.gather::<S>(&retrieved.ids())?;
    let distances: Option<Vec<f64>> = if rerank {
        let sigma_x = model.summarize(&SoftPrompt::empty(), x)?;
        Some(
            blocks
                .iter()
                .map(|b| l2_distance(&b.vectors, &sigma_x.vectors))
                .collect(),
        )
    } else {
        None
    };
    let order = fusion_order(retrieved, distances.as_deref());
    let prompt = SoftPrompt::new(order.iter().map(|&i| blocks[i].clone()).collect());
    let names = order
        .iter()
        .map(|&i| retrieved.entries[i].id.clone())
        .collect();
    smoothed(model, &prompt, x, x, y, names)
}

/// Conditions on the concatenated plain-text passages (least relevant
/// first) and smooths with the unconditioned prediction.
pub fn fuse_passages<S: Scalar>(
    model: &ModelState<S>,
    x: &[usize],
    y: &[usize],
    retrieved: &RetrievedSet,
    index: &PassageIndex,
) -> Result<Scored> {
    let window = model.config.context_window;
    let mut ctx = Vec::new();
    let mut names = Vec::new();
    for e in retrieved.entries.iter().rev() {
        let d = lookup(index, &e.id)?;
        ctx.extend_from_slice(&d.tokens);
        names.push(e.id.clone());
        let len = ctx.len() + x.len() + y.len();
        if len > window {
            return Err(Error::PassageOverflow {
                passage: e.id.clone(),
                len,
                window,
            });
        }
    }
    ctx.extend_from_slice(x);
    smoothed(model, &SoftPrompt::empty(), &ctx, x, y, names)
}

/// Mean per-token log-prob of `y` with no retrieval.
pub fn no_retrieval<S: Scalar>(model: &ModelState<S>, x: &[usize], y: &[usize]) -> Result<Scored> {
    let lp = model.continuation_logprobs(&SoftPrompt::empty(), x, y)?;
    Ok(Scored {
        log_prob: lp.iter().map(|v| v.to_f64_lossy()).sum(),
        token_probs: probs(&lp),
        order: Vec::new(),
    })
}

/// A held-out query with the passages that share its planted topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedQuery {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub relevant: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedCorpus {
    pub passages: Vec<Document>,
    pub queries: Vec<PlantedQuery>,
}

/// `n_topics` source documents of `passages_per_topic` passages each, with
/// topic letters at `passage_density`, plus one fresh query segment per
/// topic split after `x_len` tokens.
pub fn planted_corpus(
    spec: &SyntheticSpec,
    n_topics: usize,
    passages_per_topic: usize,
    passage_density: f64,
    x_len: usize,
    seed: u64,
) -> Result<PlantedCorpus> {
    if x_len == 0 || x_len >= spec.seg_len {
        return Err(Error::Config {
            field: "x_len".into(),
            reason: format!("must be in [1, {})", spec.seg_len),
        });
    }
    let mut passages = Vec::new();
    let mut queries = Vec::new();
    for t in 0..n_topics {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        let topic = random_topic(&mut rng);
        let source = topic_text(
            spec,
            &topic,
            passages_per_topic * spec.seg_len,
            passage_density,
            &mut rng,
        );
        let doc = Document::new(format!("t{t}"), source);
        let parts = split_passages(std::slice::from_ref(&doc), spec.seg_len);
        let relevant = parts.iter().map(|p| p.id.clone()).collect();
        passages.extend(parts);
        let q = topic_text(spec, &topic, spec.seg_len, TOPIC_DENSITY, &mut rng);
        queries.push(PlantedQuery {
            x: q[..x_len].to_vec(),
            y: q[x_len..].to_vec(),
            relevant,
        });
    }
    Ok(PlantedCorpus { passages, queries })
}

/// Retriever that knows the relevant passages: they come first in the
/// given order, then the rest of the index in index order.
pub fn oracle_retrieve(
    index: &PassageIndex,
    relevant: &[String],
    k: usize,
) -> Result<RetrievedSet> {
    if k > index.len() {
        return Err(Error::Config {
            field: "top_k".into(),
            reason: format!("{k} exceeds the index size {}", index.len()),
        });
    }
    let n = relevant.len() as f64;
    let mut picked: Vec<(String, f64)> = relevant
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, id)| (id.clone(), 1.0 - r as f64 / (n + 1.0)))
        .collect();
    for p in &index.passages {
        if picked.len() == k {
            break;
        }
        if !relevant.contains(&p.id) {
            picked.push((p.id.clone(), 0.0));
        }
    }
    Ok(RetrievedSet::from_scores(picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm() {
        let e = HashEmbedder::default();
        for toks in [vec![], vec![3], vec![1, 2, 3, 4, 5]] {
            let v = e.embed(&toks);
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lambdas_sum_to_one_and_sorted() {
        let s = RetrievedSet::from_scores(vec![
            ("a".into(), 0.9),
            ("b".into(), 0.1),
            ("c".into(), 0.5),
        ]);
        assert_eq!(s.ids(), ["a", "c", "b"]);
        let total: f64 = s.entries.iter().map(|e| e.lambda).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let single = RetrievedSet::from_scores(vec![("a".into(), 0.3)]);
        assert_eq!(single.entries[0].lambda, 1.0);
    }

    #[test]
    fn least_to_most_relevant_order() {
        let s = RetrievedSet::from_scores(vec![
            ("p9".into(), 0.9),
            ("p1".into(), 0.1),
            ("p5".into(), 0.5),
        ]);
        let order: Vec<&str> = fusion_order(&s, None)
            .iter()
            .map(|&i| s.entries[i].id.as_str())
            .collect();
        assert_eq!(order, ["p1", "p5", "p9"]);
        // rerank: smallest distance ends up last
        let order: Vec<&str> = fusion_order(&s, Some(&[0.2, 1.0, 3.0]))
            .iter()
            .map(|&i| s.entries[i].id.as_str())
            .collect();
        assert_eq!(order, ["p1", "p5", "p9"]);
        let order: Vec<&str> = fusion_order(&s, Some(&[5.0, 0.5, 1.0]))
            .iter()
            .map(|&i| s.entries[i].id.as_str())
            .collect();
        assert_eq!(order, ["p9", "p1", "p5"]);
    }

    #[test]
    fn smoothing_is_the_mean() {
        assert_eq!(smooth(&[0.2], &[0.4]), vec![(0.2 + 0.4) / 2.0]);
        assert!((smooth(&[0.2], &[0.4])[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn overlap_runs() {
        assert_eq!(longest_overlap(&[1, 2, 3, 4], &[9, 2, 3, 4, 7]), 3);
        assert_eq!(longest_overlap(&[1, 2], &[3, 4]), 0);
        assert_eq!(longest_overlap(&[], &[1]), 0);
    }

    #[test]
    fn self_retrieval_ranks_first() {
        let docs: Vec<Document> = (0..5)
            .map(|i| {
                Document::new(
                    format!("d{i}"),
                    (0..16).map(|t| (t * (i + 3) + i) % 50).collect(),
                )
            })
            .collect();
        let index = PassageIndex::from_documents(&docs, 16).unwrap();
        let r = retrieve(&index, &docs[3].tokens, 1, usize::MAX).unwrap();
        assert_eq!(r.ids(), ["d3#0"]);
        assert_eq!(r.entries[0].lambda, 1.0);
        // the same passage is dropped once overlap deduplication applies
        let r = retrieve(&index, &docs[3].tokens, 1, 8).unwrap();
        assert_ne!(r.ids(), ["d3#0"]);
        assert!(retrieve(&index, &docs[0].tokens, 6, 8).is_err());
    }
}
