//! Segment-level recurrence: split a document, compress each segment into a
//! summary block, feed the accumulated blocks to later segments, and train
//! on the whole-document cross-entropy.
//!
//! Stop-gradients truncate backpropagation through time: the loss of
//! segment `i` reaches a summary block only if the block is at most
//! `stop_grad_every` compression steps old, and never flows through an
//! older block's computation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelState, SoftPrompt, SummaryBlock};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    /// Half-open `(start, end)` token ranges.
    pub boundaries: Vec<(usize, usize)>,
    /// Set when the document was shorter than `min_len`.
    pub undersized: bool,
}

impl Segmentation {
    pub fn lengths(&self) -> Vec<usize> {
        self.boundaries.iter().map(|(s, e)| e - s).collect()
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let boundaries = lengths
            .iter()
            .map(|&m| {
                let b = (start, start + m);
                start += m;
                b
            })
            .collect();
        Self {
            boundaries,
            undersized: false,
        }
    }

    /// Checks exact partition of `total` tokens.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut pos = 0;
        for &(s, e) in &self.boundaries {
            if s != pos || e <= s {
                return Err(Error::Segmentation(format!(
                    "segments {:?} do not partition {total} tokens",
                    self.boundaries
                )));
            }
            pos = e;
        }
        if pos != total {
            return Err(Error::Segmentation(format!(
                "segments cover {pos} of {total} tokens"
            )));
        }
        Ok(())
    }

    pub fn slices<'a>(&self, tokens: &'a [usize]) -> Vec<&'a [usize]> {
        self.boundaries
            .iter()
            .map(|&(s, e)| &tokens[s..e])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressorConfig {
    pub kappa: usize,
    /// `true` concatenates all previous blocks; `false` keeps only the most
    /// recent block (RMT baseline).
    pub accumulation: bool,
    pub randomized_segmenting: bool,
    /// Window length for stop-gradients; 0 backpropagates through the
    /// whole document.
    pub stop_grad_every: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Consecutive pairs of segments (1+2, 3+4, ...) sum to this length.
    pub pair_sum: Option<usize>,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            kappa: 4,
            accumulation: true,
            randomized_segmenting: true,
            stop_grad_every: 2,
            min_len: 32,
            max_len: 96,
            pair_sum: Some(128),
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self, context_window: usize) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: field.into(),
            reason,
        };
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(bad(
                "min_len",
                format!(
                    "need 1 <= min_len <= max_len, got {} / {}",
                    self.min_len, self.max_len
                ),
            ));
        }
        if self.max_len > context_window {
            return Err(bad(
                "max_len",
                format!(
                    "{} exceeds the context window {context_window}",
                    self.max_len
                ),
            ));
        }
        if let Some(p) = self.pair_sum {
            if p < 2 * self.min_len || p > 2 * self.max_len {
                return Err(Error::Segmentation(format!(
                    "pair_sum {p} outside [{}, {}]",
                    2 * self.min_len,
                    2 * self.max_len
                )));
            }
        }
        Ok(())
    }
}

/// True when `rest` tokens can be split into segments within bounds.
fn representable(rest: usize, lo: usize, hi: usize) -> bool {
    if rest == 0 {
        return true;
    }
    // k segments cover [k*lo, k*hi]
    let k_min = rest.div_ceil(hi);
    k_min * lo <= rest
}

/// Splits a document into segments.
///
/// Fixed mode cuts `max_len` chunks (the last may be short). Randomized mode
/// draws lengths uniformly among values that keep the remainder feasible; with
/// `pair_sum`, the first segment of each pair is drawn and its partner fills
/// the pair, and a trailing remainder must itself be a valid segment.
pub fn segment_randomized<R: Rng>(
    doc_len: usize,
    cfg: &CompressorConfig,
    rng: &mut R,
) -> Result<Segmentation> {
    let (lo, hi) = (cfg.min_len, cfg.max_len);
    if lo == 0 || lo > hi {
        return Err(Error::Segmentation(format!("bounds [{lo}, {hi}]")));
    }
    if doc_len == 0 {
        return Err(Error::Segmentation("empty document".into()));
    }
    if doc_len <= lo {
        return Ok(Segmentation {
            boundaries: vec![(0, doc_len)],
            undersized: doc_len < lo,
        });
    }
    if !cfg.randomized_segmenting {
        let mut lengths = vec![hi; doc_len / hi];
        if doc_len % hi != 0 {
            lengths.push(doc_len % hi);
        }
        return Ok(Segmentation::from_lengths(&lengths));
    }
    let mut lengths = Vec::new();
    if let Some(p) = cfg.pair_sum {
        let a_lo = lo.max(p.saturating_sub(hi));
        let a_hi = hi.min(p.saturating_sub(lo));
        if p < 2 * lo || p > 2 * hi || a_lo > a_hi {
            return Err(Error::Segmentation(format!(
                "pair_sum {p} outside [{}, {}]",
                2 * lo,
                2 * hi
            )));
        }
        let rem = doc_len % p;
        if rem != 0 && !(lo..=hi).contains(&rem) {
            return Err(Error::Segmentation(format!(
                "document of {doc_len} tokens leaves a remainder of {rem} after pairs of {p}"
            )));
        }
        for _ in 0..doc_len / p {
            let a = rng.gen_range(a_lo..=a_hi);
            lengths.push(a);
            lengths.push(p - a);
        }
        if rem != 0 {
            lengths.push(rem);
        }
    } else {
        if !representable(doc_len, lo, hi) {
            return Err(Error::Segmentation(format!(
                "{doc_len} tokens cannot be split into segments of [{lo}, {hi}]"
            )));
        }
        let mut rest = doc_len;
        while rest > 0 {
            let options: Vec<usize> = (lo..=hi.min(rest))
                .filter(|&m| representable(rest - m, lo, hi))
                .collect();
            let m = options[rng.gen_range(0..options.len())];
            lengths.push(m);
            rest -= m;
        }
    }
    Ok(Segmentation::from_lengths(&lengths))
}

/// Fixed segments of `seg_len` counted back from the end of the document; the
/// first (leftmost) segment may be short.
pub fn segment_from_end(doc_len: usize, seg_len: usize) -> Segmentation {
    let mut lengths = vec![seg_len; doc_len / seg_len];
    if doc_len % seg_len != 0 {
        lengths.insert(0, doc_len % seg_len);
    }
    Segmentation::from_lengths(&lengths)
}

/// Blocks visible to the next segment.
pub fn select_prompt<T: Clone>(blocks: &[T], accumulation: bool) -> Vec<T> {
    if accumulation {
        blocks.to_vec()
    } else {
        blocks.last().cloned().into_iter().collect()
    }
}

pub fn accumulate<S: Scalar>(blocks: &[SummaryBlock<S>], cfg: &CompressorConfig) -> SoftPrompt<S> {
    SoftPrompt::new(select_prompt(blocks, cfg.accumulation))
}

/// Compresses one segment given the prompt accumulated so far.
pub fn compress_segment<S: Scalar>(
    model: &ModelState<S>,
    sigma_prev: &SoftPrompt<S>,
    segment: &[usize],
) -> Result<SummaryBlock<S>> {
    model.summarize(sigma_prev, segment)
}

/// Number of tokens the document objective scores in each segment.
pub fn scored_counts(lengths: &[usize], kappa: usize) -> Vec<usize> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if i == 0 || kappa == 0 {
                m.saturating_sub(1)
            } else {
                m
            }
        })
        .collect()
}

/// Per-segment graph handles recorded by [`record_segments`].
#[derive(Debug, Default)]
pub struct Recorded {
    /// Loss of each segment, already scaled by `1 / N`.
    pub losses: Vec<Option<Var>>,
    /// Summary block of each segment (none for the last one).
    pub blocks: Vec<Option<Var>>,
}

/// Records one segment: its scaled loss and, unless it is the last segment,
/// its summary block.
#[allow(clippy::too_many_arguments)]
fn segment_on_graph<S: Scalar>(
    model: &ModelState<S>,
    g: &mut Graph<S>,
    p: &ModelParams<Var>,
    prompt: &[Var],
    tokens: &[usize],
    emit: bool,
    scale: S,
) -> Result<(Option<Var>, Option<Var>)> {
    let lay = model.forward_layout(g, p, prompt, tokens, emit)?;
    let loss = match model.predictive_logits(g, p, &lay, tokens)? {
        Some((logits, targets)) => Some(g.cross_entropy_scaled(logits, &targets, scale)?),
        None => None,
    };
    Ok((loss, model.summary_rows(g, &lay)?))
}

/// Records segments `range` of a document onto one graph.
///
/// `carried` holds the blocks of earlier segments that are already on the
/// graph. With `origin = Some(i)`, every block older than
/// `cfg.stop_grad_every` steps relative to segment `i` is detached wherever
/// it is used, so backpropagating segment `i`'s loss gives exactly that
/// loss's truncated gradient.
#[allow(clippy::too_many_arguments)]
pub fn record_segments<S: Scalar>(
    model: &ModelState<S>,
    g: &mut Graph<S>,
    p: &ModelParams<Var>,
    segments: &[&[usize]],
    range: std::ops::Range<usize>,
    carried: &mut Vec<Var>,
    cfg: &CompressorConfig,
    norm: usize,
    origin: Option<usize>,
) -> Result<Recorded> {
    let mut rec = Recorded::default();
    let scale = S::one() / S::from_usize(norm.max(1)).unwrap();
    let last = segments.len() - 1;
    for i in range {
        let prompt = select_prompt(carried, cfg.accumulation);
        let emit = i < last && cfg.kappa > 0;
        let (loss, block) = segment_on_graph(model, g, p, &prompt, segments[i], emit, scale)?;
        if let Some(b) = block {
            let cut = match origin {
                Some(o) => cfg.stop_grad_every > 0 && o > i + cfg.stop_grad_every,
                None => false,
            };
            carried.push(if cut { g.detach(b) } else { b });
        }
        rec.losses.push(loss);
        rec.blocks.push(block);
    }
    Ok(rec)
}

/// Output of a whole-document pass.
#[derive(Debug)]
pub struct DocumentPass<S> {
    /// `-(1/N) * sum log p` over all scored tokens.
    pub loss: f64,
    /// Unscaled NLL sum per segment.
    pub segment_nll: Vec<f64>,
    pub scored: Vec<usize>,
    pub grads: Option<ModelParams<Tensor<S>>>,
    /// Largest number of nodes alive on one graph during the pass.
    pub peak_graph_nodes: usize,
}

fn value_of<S: Scalar>(g: &Graph<S>, v: Option<Var>) -> f64 {
    v.map(|v| g.value(v).item().to_f64_lossy()).unwrap_or(0.0)
}

/// Document objective and, optionally, its gradient under the stop-gradient
/// policy.
///
/// Without truncation the document is one graph. With truncation, a forward
/// sweep caches every block, then a reverse sweep rebuilds one segment graph
/// at a time (gradient checkpointing) and pushes cotangents into the blocks
/// it read. Cotangents are kept cumulatively by origin: `cot[j][t]` is the
/// gradient at block `j` from the losses of segments `j+1..=j+1+t`, so a
/// block read by segment `k` receives only the part coming from losses at
/// most `stop_grad_every` steps after it.
pub fn document_pass<S: Scalar>(
    model: &ModelState<S>,
    doc: &Document,
    seg: &Segmentation,
    cfg: &CompressorConfig,
    with_grad: bool,
) -> Result<DocumentPass<S>> {
    seg.validate(doc.len())?;
    let segments = seg.slices(&doc.tokens);
    let scored = scored_counts(&seg.lengths(), cfg.kappa);
    let norm: usize = scored.iter().sum();
    let nf = norm.max(1) as f64;
    let n = segments.len();
    let s = cfg.stop_grad_every;
    if !with_grad || s == 0 || s + 1 >= n {
        let mut g = Graph::new();
        let p = model.bind(&mut g, with_grad);
        let rec = record_segments(
            model,
            &mut g,
            &p,
            &segments,
            0..n,
            &mut Vec::new(),
            cfg,
            norm,
            None,
        )?;
        let seg_loss: Vec<f64> = rec.losses.iter().map(|l| value_of(&g, *l)).collect();
        let grads = if with_grad {
            let live: Vec<Var> = rec.losses.iter().flatten().copied().collect();
            Some(match live.split_first() {
                None => model.params.map(|t| Tensor::zeros(t.shape())),
                Some((&first, rest)) => {
                    let mut total = first;
                    for &l in rest {
                        total = g.add(total, l)?;
                    }
                    let mut gm = g.backward(total)?;
                    p.map(|v| gm.take(*v).unwrap_or_else(|| Tensor::zeros(g.shape(*v))))
                }
            })
        } else {
            None
        };
        return Ok(DocumentPass {
            loss: seg_loss.iter().sum(),
            segment_nll: seg_loss.iter().map(|l| l * nf).collect(),
            scored,
            grads,
            peak_graph_nodes: g.len(),
        });
    }

    let scale = S::one() / S::from_usize(norm.max(1)).unwrap();
    let emit = |k: usize| k + 1 < n && cfg.kappa > 0;
    let prompt_ids = |k: usize| -> Vec<usize> {
        let produced: Vec<usize> = (0..k).filter(|&j| emit(j)).collect();
        select_prompt(&produced, cfg.accumulation)
    };
    let mut peak = 0;
    let mut blocks: Vec<Option<Tensor<S>>> = Vec::with_capacity(n);
    let mut seg_loss = Vec::with_capacity(n);
    for k in 0..n {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let prompt: Vec<Var> = prompt_ids(k)
            .iter()
            .map(|&j| g.constant(blocks[j].clone().unwrap()))
            .collect();
        let (loss, block) =
            segment_on_graph(model, &mut g, &p, &prompt, segments[k], emit(k), scale)?;
        seg_loss.push(value_of(&g, loss));
        blocks.push(block.map(|b| g.value(b).clone()));
        peak = peak.max(g.len());
    }

    let mut grads = model.params.map(|t| Tensor::zeros(t.shape()));
    let mut cot: Vec<Vec<Option<Tensor<S>>>> = vec![vec![None; s]; n];
    for k in (0..n).rev() {
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let ids = prompt_ids(k);
        let inputs: Vec<Var> = ids
            .iter()
            .map(|&j| g.param(blocks[j].clone().unwrap()))
            .collect();
        let (loss, block) =
            segment_on_graph(model, &mut g, &p, &inputs, segments[k], emit(k), scale)?;
        // Latest origin whose loss reaches this segment.
        let top = (k + s).min(n - 1);
        // Thresholds t: losses of segments k..=t. Parameters take the
        // largest; input j also needs every t in k..=j+s.
        let mut needed: Vec<usize> = vec![top];
        for &j in &ids {
            for t in k..=(j + s).min(top) {
                needed.push(t);
            }
        }
        needed.sort_unstable();
        needed.dedup();
        for &t in &needed {
            let mut seed = loss;
            if let (Some(b), Some(c)) =
                (block, t.checked_sub(k + 1).and_then(|i| cot[k][i].clone()))
            {
                let c = g.constant(c);
                let prod = g.mul(b, c)?;
                let term = g.sum(prod);
                seed = Some(match seed {
                    Some(l) => g.add(l, term)?,
                    None => term,
                });
            }
            let Some(seed) = seed else { continue };
            let mut gm = g.backward(seed)?;
            for (&j, &v) in ids.iter().zip(&inputs) {
                if t > j + s || t < j + 1 {
                    continue;
                }
                if let Some(gr) = gm.take(v) {
                    let slot = &mut cot[j][t - j - 1];
                    match slot {
                        Some(acc) => acc.add_assign(&gr),
                        None => *slot = Some(gr),
                    }
                }
            }
            if t == top {
                grads.zip_mut(&p, |acc, v| {
                    if let Some(gr) = gm.get(*v) {
                        acc.add_assign(gr);
                    }
                });
            }
        }
        peak = peak.max(g.len());
        cot[k].clear();
    }
    Ok(DocumentPass {
        loss: seg_loss.iter().sum(),
        segment_nll: seg_loss.iter().map(|l| l * nf).collect(),
        scored,
        grads: Some(grads),
        peak_graph_nodes: peak,
    })
}

/// `-(1/N) sum_i sum_t log p(x_t^i | x_<t^i, sigma_<i)` and the per-segment
/// scored-token counts.
pub fn document_loss<S: Scalar>(
    model: &ModelState<S>,
    doc: &Document,
    seg: &Segmentation,
    cfg: &CompressorConfig,
) -> Result<(f64, Vec<usize>)> {
    let pass = document_pass(model, doc, seg, cfg, false)?;
    Ok((pass.loss, pass.scored))
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub segments: Vec<usize>,
    pub peak_graph_nodes: usize,
}

/// Samples a segmentation, backpropagates through the document and applies
/// one Adam update.
pub fn train_step<S: Scalar, R: Rng>(
    model: &mut ModelState<S>,
    doc: &Document,
    cfg: &CompressorConfig,
    opt_cfg: &AdamConfig,
    opt: &mut AdamState<S>,
    rng: &mut R,
) -> Result<StepReport> {
    let seg = segment_randomized(doc.len(), cfg, rng)?;
    let pass = document_pass(model, doc, &seg, cfg, true)?;
    let grads = pass.grads.expect("with_grad");
    if !pass.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: opt.step,
            detail: format!("document {} loss {}", doc.id, pass.loss),
        });
    }
    let grad_norm = opt.update(opt_cfg, &mut model.params, &grads);
    Ok(StepReport {
        loss: pass.loss,
        grad_norm,
        segments: seg.lengths(),
        peak_graph_nodes: pass.peak_graph_nodes,
    })
}

/// Compresses `segments` in order, returning every block produced.
pub fn compress_all<S: Scalar>(
    model: &ModelState<S>,
    segments: &[&[usize]],
    cfg: &CompressorConfig,
) -> Result<Vec<SummaryBlock<S>>> {
    let mut blocks: Vec<SummaryBlock<S>> = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        let prompt = accumulate(&blocks, cfg);
        let mut b = compress_segment(model, &prompt, s)?;
        b.source_id = format!("segment-{i}");
        blocks.push(b);
    }
    Ok(blocks)
}
