//! Final-segment perplexity protocol, token-position gain analysis and
//! ablation grids.
//!
//! Documents are cut into fixed segments counted back from the end. The
//! final segment is scored (positions 2..m, the same token set in every
//! condition) after compressing the `n` segments right before it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress_all, segment_from_end, CompressorConfig, Document};
use crate::error::Result;
use crate::model::{ModelConfig, ModelState, SoftPrompt};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig};

/// Thread pool sized by `AUTOCOMP_THREADS` (default: all cores).
pub fn pool() -> rayon::ThreadPool {
    let n = std::env::var("AUTOCOMP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Log-probs of final-segment tokens `2..=m` after compressing the `n`
/// preceding segments, or `None` when the document is too short.
pub fn final_segment_logprobs<S: Scalar>(
    model: &ModelState<S>,
    doc: &Document,
    seg_len: usize,
    n_compressed: usize,
    cfg: &CompressorConfig,
) -> Result<Option<Vec<f64>>> {
    let seg = segment_from_end(doc.len(), seg_len);
    let full: Vec<_> = seg
        .boundaries
        .iter()
        .filter(|(s, e)| e - s == seg_len)
        .collect();
    if full.len() < n_compressed + 1 || seg_len < 2 {
        return Ok(None);
    }
    let k = full.len();
    let final_seg = &doc.tokens[full[k - 1].0..full[k - 1].1];
    let ctx: Vec<&[usize]> = full[k - 1 - n_compressed..k - 1]
        .iter()
        .map(|&&(s, e)| &doc.tokens[s..e])
        .collect();
    let blocks = compress_all(model, &ctx, cfg)?;
    let prompt = crate::compressor::accumulate(&blocks, cfg);
    let lp = model.token_logprobs(&prompt, final_seg)?;
    // with a prompt the first token is scored too; drop it for comparability
    let skip = lp.len() - (final_seg.len() - 1);
    Ok(Some(lp[skip..].iter().map(|v| v.to_f64_lossy()).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplResult {
    pub n_compressed: usize,
    pub ppl: f64,
    pub mean_nll: f64,
    pub n_docs: usize,
    pub n_tokens: usize,
    pub skipped: usize,
}

/// `exp(mean NLL)` over final-segment tokens of all usable documents.
pub fn eval_final_segment_ppl<S: Scalar>(
    model: &ModelState<S>,
    docs: &[Document],
    seg_len: usize,
    n_compressed: usize,
    cfg: &CompressorConfig,
) -> Result<PplResult> {
    let per_doc: Vec<Result<Option<Vec<f64>>>> = pool().install(|| {
        docs.par_iter()
            .map(|d| final_segment_logprobs(model, d, seg_len, n_compressed, cfg))
            .collect()
    });
    let mut total = 0.0;
    let mut count = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for r in per_doc {
        match r? {
            Some(lp) => {
                used += 1;
                count += lp.len();
                for v in lp {
                    total -= v;
                }
            }
            None => skipped += 1,
        }
    }
    let mean = if count > 0 {
        total / count as f64
    } else {
        f64::NAN
    };
    Ok(PplResult {
        n_compressed,
        ppl: mean.exp(),
        mean_nll: mean,
        n_docs: used,
        n_tokens: count,
        skipped,
    })
}

/// Mean NLL restricted to given absolute token positions of each document
/// (e.g. planted answer tokens). Positions outside the final segment or at
/// its first token are ignored.
pub fn eval_positions_nll<S: Scalar>(
    model: &ModelState<S>,
    docs: &[(Document, Vec<usize>)],
    seg_len: usize,
    n_compressed: usize,
    cfg: &CompressorConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (d, positions) in docs {
        let Some(lp) = final_segment_logprobs(model, d, seg_len, n_compressed, cfg)? else {
            continue;
        };
        let start = d.len() - seg_len;
        for &p in positions {
            if p > start && p < d.len() {
                total -= lp[p - start - 1];
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    /// Mean ratio `p(x_t | .., sigma) / p(x_t | ..)` per final-segment
    /// position `t = 2..=m` (index 0 is position 2).
    pub mean_ratio: Vec<f64>,
    /// Per document: absolute positions of the `top_k` largest ratios.
    pub top_positions: Vec<Vec<usize>>,
}

/// Token-position gain from compressing every segment before the final one.
pub fn tokenwise_gain<S: Scalar>(
    model: &ModelState<S>,
    docs: &[Document],
    seg_len: usize,
    cfg: &CompressorConfig,
    top_k: usize,
) -> Result<GainCurve> {
    let per_doc: Vec<Result<Option<(usize, Vec<f64>)>>> = pool().install(|| {
        docs.par_iter()
            .map(|d| {
                let n_prev = d.len() / seg_len;
                if n_prev < 2 {
                    return Ok(None);
                }
                let with = final_segment_logprobs(model, d, seg_len, n_prev - 1, cfg)?;
                let without = final_segment_logprobs(model, d, seg_len, 0, cfg)?;
                Ok(match (with, without) {
                    (Some(w), Some(wo)) => Some((
                        d.len() - seg_len + 1,
                        w.iter().zip(&wo).map(|(a, b)| (a - b).exp()).collect(),
                    )),
                    _ => None,
                })
            })
            .collect()
    });
    let mut sums = vec![0.0; seg_len.saturating_sub(1)];
    let mut n = 0usize;
    let mut top_positions = Vec::new();
    for r in per_doc {
        let Some((offset, ratios)) = r? else { continue };
        n += 1;
        for (s, r) in sums.iter_mut().zip(&ratios) {
            *s += r;
        }
        let mut idx: Vec<usize> = (0..ratios.len()).collect();
        // stable: ties keep the earlier position first
        idx.sort_by(|&a, &b| {
            ratios[b]
                .partial_cmp(&ratios[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        top_positions.push(idx.into_iter().take(top_k).map(|i| i + offset).collect());
    }
    Ok(GainCurve {
        mean_ratio: sums.iter().map(|s| s / n.max(1) as f64).collect(),
        top_positions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: BTreeMap<usize, f64>,
    pub details: Vec<PplResult>,
    pub gain_curve: Option<GainCurve>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.ppl.values().all(|v| v.is_finite())
            && self
                .gain_curve
                .as_ref()
                .map(|g| g.mean_ratio.iter().all(|v| v.is_finite()))
                .unwrap_or(true)
    }
}

pub fn code_version() -> String {
    format!("autocompressor {}", env!("CARGO_PKG_VERSION"))
}

/// Hex SHA-256 of the canonical JSON encoding.
pub fn config_hash(v: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(v).expect("json value");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluates every `n` in `ns` and assembles a report.
pub fn evaluate<S: Scalar>(
    model: &ModelState<S>,
    docs: &[Document],
    seg_len: usize,
    ns: &[usize],
    cfg: &CompressorConfig,
    config_echo: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let mut ppl = BTreeMap::new();
    let mut details = Vec::new();
    for &n in ns {
        let r = eval_final_segment_ppl(model, docs, seg_len, n, cfg)?;
        ppl.insert(n, r.ppl);
        details.push(r);
    }
    Ok(EvalReport {
        ppl,
        details,
        gain_curve: None,
        config_hash: config_hash(&config_echo),
        config: config_echo,
        seed,
        code_version: code_version(),
    })
}

/// One grid point of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPoint {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Segment length used at evaluation time.
    pub eval_seg_len: usize,
    pub eval_n: Vec<usize>,
}

/// Trains and evaluates each grid point with the same seed.
pub fn run_ablation(
    grid: &[AblationPoint],
    train_docs: &[Document],
    eval_docs: &[Document],
) -> Result<Vec<(String, EvalReport)>> {
    grid.iter()
        .map(|pt| {
            let model = ModelState::<f32>::init(pt.model.clone(), pt.train.seed)?;
            let (model, _) = train(model, train_docs, &pt.train)?;
            let echo = serde_json::to_value(pt)?;
            let rep = evaluate(
                &model,
                eval_docs,
                pt.eval_seg_len,
                &pt.eval_n,
                &pt.train.compressor,
                echo,
                pt.train.seed,
            )?;
            Ok((pt.name.clone(), rep))
        })
        .collect()
}

/// Empty-prompt PPL of a model on the same final segments, i.e. `n = 0`.
pub fn plain_lm_ppl<S: Scalar>(
    model: &ModelState<S>,
    docs: &[Document],
    seg_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for d in docs {
        if d.len() < seg_len {
            continue;
        }
        let lp = model.token_logprobs(&SoftPrompt::empty(), &d.tokens[d.len() - seg_len..])?;
        count += lp.len();
        total -= lp.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
    }
    Ok((total / count.max(1) as f64).exp())
}
