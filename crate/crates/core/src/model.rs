//! Decoder-only transformer that accepts a soft prompt of summary vectors.
//!
//! Attention layout for one forward pass:
//!
//! ```text
//! [ soft-prompt rows ][ embedded tokens ][ kappa summary tokens ]
//! ```
//!
//! Attention is causal over the whole layout. In absolute mode only the
//! real-token rows receive positional embeddings (positions `0..T`), so a
//! segment can use the full positional table no matter how long the prompt
//! is. In rotary mode every row is rotated by its layout index.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hard cap on attention rows (prompt + tokens + summary tokens).
pub const LAYOUT_CAP: usize = 4096;
const ROTARY_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    Absolute,
    Rotary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum number of real-token positions per forward pass.
    pub context_window: usize,
    /// Number of summary tokens.
    pub kappa: usize,
    pub positional_mode: PositionalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_window: 128,
            kappa: 4,
            positional_mode: PositionalMode::Absolute,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be >= 1");
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model", "d_model and n_heads must be >= 1");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model", "must be divisible by n_heads");
        }
        if self.positional_mode == PositionalMode::Rotary && (self.d_model / self.n_heads) % 2 != 0
        {
            return bad("d_model", "rotary mode needs an even head dimension");
        }
        if self.context_window == 0 {
            return bad("context_window", "must be >= 1");
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Pure function of the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff();
        let layer = 2 * d + 4 * (d * d + d) + 2 * d + d * f + f + f * d + d;
        let pos = match self.positional_mode {
            PositionalMode::Absolute => self.context_window * d,
            PositionalMode::Rotary => 0,
        };
        self.vocab_size * d
            + self.kappa * d
            + pos
            + self.n_layers * layer
            + 2 * d
            + self.vocab_size * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

/// Model parameters, generic over storage (`Tensor` for weights, `Var` once
/// bound to a graph, gradients, optimizer moments...).
///
/// [`ModelParams::iter`] defines the canonical parameter order used by
/// checkpoints and optimizers: token embeddings, summary embeddings,
/// positional table (absolute mode), each layer in field order, final
/// layer-norm gain and bias, output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: T,
    pub sum_emb: T,
    pub pos_emb: Option<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: T,
}

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            w_q: f(&self.w_q),
            b_q: f(&self.b_q),
            w_k: f(&self.w_k),
            b_k: f(&self.b_k),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            w_up: f(&self.w_up),
            b_up: f(&self.b_up),
            w_down: f(&self.w_down),
            b_down: f(&self.b_down),
        }
    }
}

impl<T> ModelParams<T> {
    /// Parameters in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let mut v: Vec<&T> = vec![&self.tok_emb, &self.sum_emb];
        v.extend(self.pos_emb.as_ref());
        for l in &self.layers {
            v.extend(l.refs());
        }
        v.extend([&self.lnf_gain, &self.lnf_bias, &self.head]);
        v.into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut v: Vec<&mut T> = vec![&mut self.tok_emb, &mut self.sum_emb];
        v.extend(self.pos_emb.as_mut());
        for l in &mut self.layers {
            v.extend(l.refs_mut());
        }
        v.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head]);
        v.into_iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f(&self.tok_emb),
            sum_emb: f(&self.sum_emb),
            pos_emb: self.pos_emb.as_ref().map(&mut f),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            lnf_gain: f(&self.lnf_gain),
            lnf_bias: f(&self.lnf_bias),
            head: f(&self.head),
        }
    }

    /// Pairs each element with the same-position element of `other`.
    pub fn zip_mut<U>(&mut self, other: &ModelParams<U>, mut f: impl FnMut(&mut T, &U)) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            f(a, b);
        }
    }
}

/// Expected shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
    let d = cfg.d_model;
    let f = cfg.d_ff();
    let layer = LayerParams {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        w_q: vec![d, d],
        b_q: vec![d],
        w_k: vec![d, d],
        b_k: vec![d],
        w_v: vec![d, d],
        b_v: vec![d],
        w_o: vec![d, d],
        b_o: vec![d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        w_up: vec![d, f],
        b_up: vec![f],
        w_down: vec![f, d],
        b_down: vec![d],
    };
    ModelParams {
        tok_emb: vec![cfg.vocab_size, d],
        sum_emb: vec![cfg.kappa, d],
        pos_emb: match cfg.positional_mode {
            PositionalMode::Absolute => Some(vec![cfg.context_window, d]),
            PositionalMode::Rotary => None,
        },
        layers: vec![layer; cfg.n_layers],
        lnf_gain: vec![d],
        lnf_bias: vec![d],
        head: vec![cfg.vocab_size, d],
    }
}

/// `kappa x d_model` summary vectors for one compressed segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryBlock<S> {
    pub vectors: Tensor<S>,
    pub source_id: String,
}

impl<S: Scalar> SummaryBlock<S> {
    pub fn rows(&self) -> usize {
        self.vectors.shape()[0]
    }
}

/// Ordered concatenation of summary blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<S> {
    pub blocks: Vec<SummaryBlock<S>>,
}

impl<S> Default for SoftPrompt<S> {
    fn default() -> Self {
        Self { blocks: Vec::new() }
    }
}

impl<S: Scalar> SoftPrompt<S> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(blocks: Vec<SummaryBlock<S>>) -> Self {
        Self { blocks }
    }

    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    /// Rows stacked in block order.
    pub fn to_tensor(&self, d_model: usize) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.rows() * d_model);
        for b in &self.blocks {
            data.extend_from_slice(b.vectors.data());
        }
        Tensor::new(vec![self.rows(), d_model], data).expect("soft prompt rows")
    }

    /// Adds the blocks to `g` as constants.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.blocks
            .iter()
            .map(|b| g.constant(b.vectors.clone()))
            .collect()
    }
}

/// Counts forward passes for instrumentation (e.g. proving a scoring path
/// never touched passage text).
#[derive(Debug, Default)]
pub struct ForwardStats {
    calls: AtomicU64,
    token_rows: AtomicU64,
}

impl ForwardStats {
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn token_rows(&self) -> u64 {
        self.token_rows.load(Ordering::Relaxed)
    }

    fn record(&self, tokens: usize) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.token_rows.fetch_add(tokens as u64, Ordering::Relaxed);
    }
}

/// Result of laying out and running one forward pass on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    /// Final hidden states (after the last layer norm) for every row.
    pub hidden: Var,
    pub prompt_rows: usize,
    pub n_tokens: usize,
    pub summary_rows: usize,
}

impl Layout {
    pub fn total_rows(&self) -> usize {
        self.prompt_rows + self.n_tokens + self.summary_rows
    }
}

#[derive(Debug)]
pub struct ModelState<S> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<S>>,
    pub stats: ForwardStats,
}

impl<S: Scalar> Clone for ModelState<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            stats: ForwardStats::default(),
        }
    }
}

impl<S: Scalar> ModelState<S> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let resid_std = INIT_STD / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let shapes = param_shapes(&config);
        let tok_emb = Tensor::<S>::randn(&shapes.tok_emb, INIT_STD, &mut rng);
        // summary tokens start near the mean vocabulary embedding
        let mut sum_emb = Tensor::<S>::randn(&shapes.sum_emb, INIT_STD * 0.1, &mut rng);
        let vf = S::from_usize(config.vocab_size).unwrap();
        for r in 0..config.kappa {
            for j in 0..d {
                let mean = (0..config.vocab_size)
                    .map(|v| tok_emb.data()[v * d + j])
                    .sum::<S>()
                    / vf;
                sum_emb.data_mut()[r * d + j] += mean;
            }
        }
        let pos_emb = shapes
            .pos_emb
            .as_ref()
            .map(|s| Tensor::randn(s, INIT_STD * 0.5, &mut rng));
        let layers = shapes
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_gain: Tensor::full(&l.ln1_gain, S::one()),
                ln1_bias: Tensor::zeros(&l.ln1_bias),
                w_q: Tensor::randn(&l.w_q, INIT_STD, &mut rng),
                b_q: Tensor::zeros(&l.b_q),
                w_k: Tensor::randn(&l.w_k, INIT_STD, &mut rng),
                b_k: Tensor::zeros(&l.b_k),
                w_v: Tensor::randn(&l.w_v, INIT_STD, &mut rng),
                b_v: Tensor::zeros(&l.b_v),
                w_o: Tensor::randn(&l.w_o, resid_std, &mut rng),
                b_o: Tensor::zeros(&l.b_o),
                ln2_gain: Tensor::full(&l.ln2_gain, S::one()),
                ln2_bias: Tensor::zeros(&l.ln2_bias),
                w_up: Tensor::randn(&l.w_up, INIT_STD, &mut rng),
                b_up: Tensor::zeros(&l.b_up),
                w_down: Tensor::randn(&l.w_down, resid_std, &mut rng),
                b_down: Tensor::zeros(&l.b_down),
            })
            .collect();
        let params = ModelParams {
            tok_emb,
            sum_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::full(&shapes.lnf_gain, S::one()),
            lnf_bias: Tensor::zeros(&shapes.lnf_bias),
            head: Tensor::randn(&shapes.head, INIT_STD, &mut rng),
        };
        Ok(Self {
            config,
            params,
            stats: ForwardStats::default(),
        })
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.iter().count() != params.iter().count() {
            return Err(Error::Config {
                field: "params".into(),
                reason: "parameter list does not match the config".into(),
            });
        }
        for (want, got) in shapes.iter().zip(params.iter()) {
            if want.as_slice() != got.shape() {
                return Err(crate::error::shape_err(
                    "from_params",
                    format!("expected {want:?}, got {:?}", got.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            params,
            stats: ForwardStats::default(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
            stats: ForwardStats::default(),
        }
    }

    /// Adds all parameters to `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> ModelParams<Var> {
        self.params.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Runs the transformer over `[prompt][tokens][summary tokens]` and
    /// returns the final hidden states of every row.
    pub fn forward_layout(
        &self,
        g: &mut Graph<S>,
        p: &ModelParams<Var>,
        prompt: &[Var],
        tokens: &[usize],
        emit_summary: bool,
    ) -> Result<Layout> {
        let cfg = &self.config;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }
        if tokens.len() > cfg.context_window {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                window: cfg.context_window,
            });
        }
        if emit_summary && cfg.kappa == 0 {
            return Err(Error::Config {
                field: "kappa".into(),
                reason: "summary emission needs kappa >= 1".into(),
            });
        }
        let mut prompt_rows = 0;
        for &b in prompt {
            let s = g.shape(b);
            if s.len() != 2 || s[1] != cfg.d_model {
                return Err(crate::error::shape_err(
                    "forward",
                    format!("prompt block {s:?} against d_model {}", cfg.d_model),
                ));
            }
            prompt_rows += s[0];
        }
        let summary_rows = if emit_summary { cfg.kappa } else { 0 };
        let rows = prompt_rows + tokens.len() + summary_rows;
        if rows > LAYOUT_CAP {
            return Err(Error::LayoutCap {
                rows,
                cap: LAYOUT_CAP,
            });
        }
        if rows == 0 {
            return Err(Error::Invalid("forward over an empty layout".into()));
        }
        self.stats.record(tokens.len());

        let mut parts: Vec<Var> = prompt.to_vec();
        if !tokens.is_empty() {
            let mut x = g.embedding(p.tok_emb, tokens)?;
            if let Some(pos) = p.pos_emb {
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let pe = g.embedding(pos, &positions)?;
                x = g.add(x, pe)?;
            }
            parts.push(x);
        }
        if emit_summary {
            parts.push(p.sum_emb);
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let rotary = cfg.positional_mode == PositionalMode::Rotary;
        for l in &p.layers {
            let h = g.layer_norm(x, l.ln1_gain, l.ln1_bias)?;
            let q = g.matmul(h, l.w_q, false)?;
            let q = g.add_bias(q, l.b_q)?;
            let k = g.matmul(h, l.w_k, false)?;
            let k = g.add_bias(k, l.b_k)?;
            let v = g.matmul(h, l.w_v, false)?;
            let v = g.add_bias(v, l.b_v)?;
            let mut q = g.split_heads(q, cfg.n_heads)?;
            let mut k = g.split_heads(k, cfg.n_heads)?;
            let v = g.split_heads(v, cfg.n_heads)?;
            if rotary {
                q = g.rotary(q, ROTARY_BASE)?;
                k = g.rotary(k, ROTARY_BASE)?;
            }
            let att = g.causal_attention(q, k, v)?;
            let att = g.merge_heads(att)?;
            let o = g.matmul(att, l.w_o, false)?;
            let o = g.add_bias(o, l.b_o)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, l.ln2_gain, l.ln2_bias)?;
            let u = g.matmul(h, l.w_up, false)?;
            let u = g.add_bias(u, l.b_up)?;
            let u = g.gelu(u);
            let dn = g.matmul(u, l.w_down, false)?;
            let dn = g.add_bias(dn, l.b_down)?;
            x = g.add(x, dn)?;
        }
        let hidden = g.layer_norm(x, p.lnf_gain, p.lnf_bias)?;
        Ok(Layout {
            hidden,
            prompt_rows,
            n_tokens: tokens.len(),
            summary_rows,
        })
    }

    /// Logits `[T, V]` at the real-token rows.
    pub fn token_logits(
        &self,
        g: &mut Graph<S>,
        p: &ModelParams<Var>,
        lay: &Layout,
    ) -> Result<Var> {
        let h = g.slice_rows(lay.hidden, lay.prompt_rows, lay.prompt_rows + lay.n_tokens)?;
        g.matmul(h, p.head, true)
    }

    /// Logits that predict each scorable token, plus the targets.
    ///
    /// Token `t > 0` is predicted from row `t - 1`. The first token is
    /// predicted from the last prompt row when a prompt is present and is
    /// not scorable otherwise.
    pub fn predictive_logits(
        &self,
        g: &mut Graph<S>,
        p: &ModelParams<Var>,
        lay: &Layout,
        tokens: &[usize],
    ) -> Result<Option<(Var, Vec<usize>)>> {
        let (start, targets) = if lay.prompt_rows > 0 {
            (lay.prompt_rows - 1, tokens.to_vec())
        } else {
            (0, tokens.get(1..).unwrap_or_default().to_vec())
        };
        if targets.is_empty() {
            return Ok(None);
        }
        let h = g.slice_rows(lay.hidden, start, start + targets.len())?;
        Ok(Some((g.matmul(h, p.head, true)?, targets)))
    }

    /// The summary-token rows of the final hidden states.
    pub fn summary_rows(&self, g: &mut Graph<S>, lay: &Layout) -> Result<Option<Var>> {
        if lay.summary_rows == 0 {
            return Ok(None);
        }
        let start = lay.prompt_rows + lay.n_tokens;
        Ok(Some(g.slice_rows(
            lay.hidden,
            start,
            start + lay.summary_rows,
        )?))
    }

    /// Logits at real-token positions and, optionally, the summary block.
    pub fn forward(
        &self,
        prompt: &SoftPrompt<S>,
        tokens: &[usize],
        emit_summary: bool,
    ) -> Result<(Tensor<S>, Option<SummaryBlock<S>>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let pv = prompt.bind(&mut g);
        let lay = self.forward_layout(&mut g, &p, &pv, tokens, emit_summary)?;
        let logits = self.token_logits(&mut g, &p, &lay)?;
        let summary = self.summary_rows(&mut g, &lay)?.map(|v| SummaryBlock {
            vectors: g.value(v).clone(),
            source_id: String::new(),
        });
        Ok((g.value(logits).clone(), summary))
    }

    /// Log-probabilities of every scorable token given the prompt (see
    /// [`ModelState::predictive_logits`]); with a non-empty prompt the first
    /// token is included.
    pub fn token_logprobs(&self, prompt: &SoftPrompt<S>, tokens: &[usize]) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let pv = prompt.bind(&mut g);
        self.token_logprobs_in(&mut g, &p, &pv, tokens)
    }

    /// [`ModelState::token_logprobs`] against prompt rows already on `g`.
    pub fn token_logprobs_in(
        &self,
        g: &mut Graph<S>,
        p: &ModelParams<Var>,
        prompt: &[Var],
        tokens: &[usize],
    ) -> Result<Vec<S>> {
        let lay = self.forward_layout(g, p, prompt, tokens, false)?;
        match self.predictive_logits(g, p, &lay, tokens)? {
            None => Ok(Vec::new()),
            Some((logits, targets)) => Ok(gather_logprobs(g.value(logits), &targets)),
        }
    }

    /// Log p of tokens `2..=len` given their prefix (and the prompt).
    pub fn next_token_logprobs(&self, prompt: &SoftPrompt<S>, tokens: &[usize]) -> Result<Vec<S>> {
        if tokens.len() < 2 {
            return Err(Error::Invalid(
                "next_token_logprobs needs at least two tokens".into(),
            ));
        }
        let (logits, _) = self.forward(prompt, tokens, false)?;
        let rows = logits.shape()[0];
        let v = logits.cols();
        let trimmed = Tensor::new(vec![rows - 1, v], logits.data()[..(rows - 1) * v].to_vec())?;
        Ok(gather_logprobs(&trimmed, &tokens[1..]))
    }

    /// Log p of each `target` token after `[prompt][context]`.
    pub fn continuation_logprobs(
        &self,
        prompt: &SoftPrompt<S>,
        context: &[usize],
        target: &[usize],
    ) -> Result<Vec<S>> {
        if prompt.is_empty() && context.is_empty() {
            return Err(Error::Invalid(
                "the first target token needs a context token or a prompt".into(),
            ));
        }
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(target);
        let lp = self.token_logprobs(prompt, &tokens)?;
        Ok(lp[lp.len() - target.len()..].to_vec())
    }

    /// Final hidden states at the summary positions after reading `tokens`
    /// with `prompt` in front.
    pub fn summarize(&self, prompt: &SoftPrompt<S>, tokens: &[usize]) -> Result<SummaryBlock<S>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let pv = prompt.bind(&mut g);
        let lay = self.forward_layout(&mut g, &p, &pv, tokens, true)?;
        let v = self.summary_rows(&mut g, &lay)?.expect("emit_summary");
        Ok(SummaryBlock {
            vectors: g.value(v).clone(),
            source_id: String::new(),
        })
    }
}

/// Row-wise `log_softmax(logits)[target]`.
pub fn gather_logprobs<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Vec<S> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = logits.row(r);
            row[t] - crate::autograd::log_sum_exp(row)
        })
        .collect()
}

/// Full row-wise log-softmax.
pub fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<Vec<S>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let lse = crate::autograd::log_sum_exp(row);
            row.iter().map(|&x| x - lse).collect()
        })
        .collect()
}
