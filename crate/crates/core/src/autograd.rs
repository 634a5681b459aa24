//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each node owns its forward
//! value plus whatever the backward rule needs; the inputs of node `k` always
//! have ids below `k`, so a single reverse sweep visits every node once.
//!
//! Broadcasting is limited to a leading batch dimension: a `[.., m, k]`
//! operand times a `[k, n]` weight, and a `[n]` bias added to every row.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// Value copied from another node; gradient stops here.
    Detach,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batched: bool,
    },
    Add(Var, Var),
    AddBias {
        a: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, S),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Rotary {
        a: Var,
        base: f64,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: S,
        probs: Vec<S>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only op record.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the node is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (lead.iter().product(), c),
        None => (1, 1),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total scalars held by node values, a proxy for live activation memory.
    pub fn value_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same values as `x`, but a constant as far as backward is concerned.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detach, false)
    }

    /// `a @ b` (or `a @ b^T`). `a` is `[.., m, k]`; `b` is `[k, n]` and is
    /// shared across the leading dims of `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = rows_cols(&sa);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            S::zero(),
            &mut out,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched: false,
            },
            rg,
        ))
    }

    /// Per-batch product of `[B, m, k]` and `[B, k, n]` (or `[B, n, k]`
    /// when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(shape_err(
                "batch_matmul",
                format!("inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![S::zero(); bsz * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..bsz {
                S::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    trans_b,
                    S::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![bsz, m, n], out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched: true,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let mut t = self.value(a).clone();
        let bv = self.value(bias).data();
        for row in t.data_mut().chunks_mut(n.max(1)) {
            for (x, &b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            *x *= c;
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Softmax along the last axis. With `causal`, the input is viewed as
    /// stacked square `[L, L]` matrices and row `i` only covers columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        if causal && (self.value(a).rank() < 2 || self.shape(a)[self.value(a).rank() - 2] != cols) {
            return Err(shape_err(
                "softmax",
                format!(
                    "causal mask needs square trailing dims, got {:?}",
                    self.shape(a)
                ),
            ));
        }
        let mut t = self.value(a).clone();
        for (r, row) in t.data_mut().chunks_mut(cols).enumerate() {
            let live = if causal { r % cols + 1 } else { cols };
            softmax_in_place(&mut row[..live]);
            for x in row[live..].iter_mut() {
                *x = S::zero();
            }
        }
        debug_assert_eq!(t.rows(), rows);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with gain and bias `[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, n) = rows_cols(self.shape(x));
        if n == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = S::from_f64_lossy(LN_EPS);
        let nf = S::from_usize(n).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); rows * n];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (vec![], vec![]) };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = S::from_f64_lossy(GELU_C);
        let a = S::from_f64_lossy(GELU_A);
        let half = S::from_f64_lossy(0.5);
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            let u = c * (*v + a * *v * *v * *v);
            *v = half * *v * (S::one() + u.tanh());
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = {
            let s = self.shape(table);
            if s.len() != 2 {
                return Err(shape_err("embedding", format!("table {s:?}")));
            }
            (s[0], s[1])
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err(
                    "concat_rows",
                    format!("part {s:?} against width {d}"),
                ));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start > end || end > s[0] {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {s:?}")));
        }
        let d = s[1];
        let data = self.value(a).data()[start * d..end * d].to_vec();
        let t = Tensor::new(vec![end - start, d], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceRows { a, start }, rg))
    }

    /// `[T, H*dh] -> [H, T, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(shape_err("split_heads", format!("{s:?} into {heads}")));
        }
        let (t, d) = (s[0], s[1]);
        let dh = d / heads;
        let av = self.value(a).data();
        let mut out = vec![S::zero(); t * d];
        for h in 0..heads {
            for r in 0..t {
                out[(h * t + r) * dh..(h * t + r + 1) * dh]
                    .copy_from_slice(&av[r * d + h * dh..r * d + (h + 1) * dh]);
            }
        }
        let tensor = Tensor::new(vec![heads, t, dh], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(tensor, Op::SplitHeads { a, heads }, rg))
    }

    /// `[H, T, dh] -> [T, H*dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(shape_err("merge_heads", format!("{s:?}")));
        }
        let (heads, t, dh) = (s[0], s[1], s[2]);
        let d = heads * dh;
        let av = self.value(a).data();
        let mut out = vec![S::zero(); t * d];
        for h in 0..heads {
            for r in 0..t {
                out[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&av[(h * t + r) * dh..(h * t + r + 1) * dh]);
            }
        }
        let tensor = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(tensor, Op::MergeHeads(a), rg))
    }

    /// Rotary phases on `[H, T, dh]`; the phase index of a row is its
    /// position along `T`.
    pub fn rotary(&mut self, a: Var, base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(shape_err("rotary", format!("{s:?}")));
        }
        let mut t = self.value(a).clone();
        apply_rotary(t.data_mut(), s[1], s[2], base, false);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Rotary { a, base }, rg))
    }

    /// Fused causal scaled-dot-product attention over `[H, L, dh]` inputs.
    /// Row `i` attends to rows `0..=i` only; each output row is computed
    /// from its own prefix, so results do not depend on trailing rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(shape_err(
                "causal_attention",
                format!("q {:?} k {:?} v {:?}", s, self.shape(k), self.shape(v)),
            ));
        }
        let (heads, l, dh) = (s[0], s[1], s[2]);
        if dh == 0 {
            return Err(Error::EmptyAxis {
                op: "causal_attention",
            });
        }
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![S::zero(); heads * l * dh];
        let rg = self.rg(&[q, k, v]);
        let mut probs = if rg {
            vec![S::zero(); heads * l * l]
        } else {
            Vec::new()
        };
        let mut row = vec![S::zero(); l];
        for h in 0..heads {
            let base = h * l * dh;
            for i in 0..l {
                let qi = &qv[base + i * dh..base + (i + 1) * dh];
                for j in 0..=i {
                    let kj = &kv[base + j * dh..base + (j + 1) * dh];
                    row[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(&mut row[..=i]);
                let oi = &mut out[base + i * dh..base + (i + 1) * dh];
                for j in 0..=i {
                    let p = row[j];
                    let vj = &vv[base + j * dh..base + (j + 1) * dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                if rg {
                    probs[(h * l + i) * l..(h * l + i) * l + i + 1].copy_from_slice(&row[..=i]);
                }
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::CausalAttention { q, k, v, probs }, rg))
    }

    /// Mean cross-entropy of `[T, V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::EmptyAxis {
                op: "cross_entropy",
            });
        }
        let scale = S::one() / S::from_usize(targets.len()).unwrap();
        self.cross_entropy_scaled(logits, targets, scale)
    }

    /// `scale * sum_t -log softmax(logits_t)[target_t]`; lets callers choose
    /// a normalizer that spans several calls.
    pub fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        scale: S,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let v = s[1];
        if v == 0 {
            return Err(Error::EmptyAxis {
                op: "cross_entropy",
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = S::zero();
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 || ls.iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, S::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `accumulate` but builds the contribution lazily in place.
    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Tensor<S>>],
        v: Var,
    ) -> Option<&'a mut Tensor<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut()
    }

    fn backward_node(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (bsz, m, k) = if *batched {
                    (sa[0], sa[1], sa[2])
                } else {
                    let (m, k) = rows_cols(sa);
                    (1, m, k)
                };
                let n = if *batched {
                    if *trans_b {
                        sb[1]
                    } else {
                        sb[2]
                    }
                } else if *trans_b {
                    sb[0]
                } else {
                    sb[1]
                };
                let b_stride = if *batched { k * n } else { 0 };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let gad = ga.data_mut();
                    for i in 0..bsz {
                        // dA = dC * op(B)^T
                        S::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &bv[i * b_stride..],
                            !*trans_b,
                            S::one(),
                            &mut gad[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let gbd = gb.data_mut();
                    if *batched {
                        for i in 0..bsz {
                            let (gdi, avi) = (&gd[i * m * n..], &av[i * m * k..]);
                            let out = &mut gbd[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                S::gemm(n, m, k, gdi, true, avi, false, S::one(), out);
                            } else {
                                S::gemm(k, m, n, avi, true, gdi, false, S::one(), out);
                            }
                        }
                    } else if *trans_b {
                        S::gemm(n, m, k, gd, true, av, false, S::one(), gbd);
                    } else {
                        S::gemm(k, m, n, av, true, gd, false, S::one(), gbd);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g.clone());
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let n = gb.len();
                    let gbd = gb.data_mut();
                    for row in gd.chunks(n.max(1)) {
                        for (x, &y) in gbd.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((x, &gv), &bv) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *x += gv * bv;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let av = self.value(*a).data();
                    for ((x, &gv), &av) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *x += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, &gv) in ga.data_mut().iter_mut().zip(gd) {
                        *x += gv * *c;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let gad = ga.data_mut();
                    for r in 0..node.value.rows() {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &gd[r * cols..(r + 1) * cols];
                        let dotp = dot(ys, gs);
                        for j in 0..cols {
                            gad[r * cols + j] += ys[j] * (gs[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    let ggd = gg.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            ggd[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            gbd[j] += gd[r * n + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let nf = S::from_usize(n).unwrap();
                    let gxd = gx.data_mut();
                    let mut dxhat = vec![S::zero(); n];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..n {
                            let d = gd[r * n + j] * gv[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[r * n + j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            gxd[r * n + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let c = S::from_f64_lossy(GELU_C);
                    let a = S::from_f64_lossy(GELU_A);
                    let half = S::from_f64_lossy(0.5);
                    let three = S::from_f64_lossy(3.0);
                    let xv = self.value(*x).data();
                    for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (S::one() + t)
                            + half * v * (S::one() - t * t) * c * (S::one() + three * a * v * v);
                        *o += gv * d;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let d = gt.cols();
                    let gtd = gt.data_mut();
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gtd[i * d + j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.nodes[p.0].requires_grad {
                        let t = Tensor::new(self.shape(p).to_vec(), gd[off..off + len].to_vec())
                            .expect("concat part shape");
                        self.accumulate(grads, p, t);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let d = ga.cols();
                    let gad = ga.data_mut();
                    for (x, &y) in gad[start * d..start * d + gd.len()].iter_mut().zip(gd) {
                        *x += y;
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let (t, d) = (ga.shape()[0], ga.shape()[1]);
                    let dh = d / heads;
                    let gad = ga.data_mut();
                    for h in 0..*heads {
                        for r in 0..t {
                            for j in 0..dh {
                                gad[r * d + h * dh + j] += gd[(h * t + r) * dh + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = ga.shape().to_vec();
                    let (heads, t, dh) = (s[0], s[1], s[2]);
                    let d = heads * dh;
                    let gad = ga.data_mut();
                    for h in 0..heads {
                        for r in 0..t {
                            for j in 0..dh {
                                gad[(h * t + r) * dh + j] += gd[r * d + h * dh + j];
                            }
                        }
                    }
                }
            }
            Op::Rotary { a, base } => {
                if self.nodes[a.0].requires_grad {
                    let s = node.value.shape();
                    let mut back = g.clone();
                    apply_rotary(back.data_mut(), s[1], s[2], *base, true);
                    self.accumulate(grads, *a, back);
                }
            }
            Op::CausalAttention { q, k, v, probs } => {
                let s = node.value.shape();
                let (heads, l, dh) = (s[0], s[1], s[2]);
                let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = vec![S::zero(); qv.len()];
                let mut dk = vec![S::zero(); kv.len()];
                let mut dv = vec![S::zero(); vv.len()];
                let mut dp = vec![S::zero(); l];
                for h in 0..heads {
                    let base = h * l * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i) * l + i + 1];
                        let go = &gd[base + i * dh..base + (i + 1) * dh];
                        let mut acc = S::zero();
                        for j in 0..=i {
                            let vj = &vv[base + j * dh..base + (j + 1) * dh];
                            dp[j] = dot(go, vj);
                            acc += p[j] * dp[j];
                            let dvj = &mut dv[base + j * dh..base + (j + 1) * dh];
                            for (x, &y) in dvj.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        let qi = &qv[base + i * dh..base + (i + 1) * dh];
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - acc) * scale;
                            let kj = &kv[base + j * dh..base + (j + 1) * dh];
                            let dqi = &mut dq[base + i * dh..base + (i + 1) * dh];
                            for (x, &y) in dqi.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            let dkj = &mut dk[base + j * dh..base + (j + 1) * dh];
                            for (x, &y) in dkj.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    let t = Tensor::new(s.to_vec(), d).expect("attention grad shape");
                    self.accumulate(grads, var, t);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let v = gl.cols();
                    let up = gd[0] * *scale;
                    let gld = gl.data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut d = probs[r * v + j];
                            if j == t {
                                d -= S::one();
                            }
                            gld[r * v + j] += up * d;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for x in ga.data_mut() {
                        *x += gd[0];
                    }
                }
            }
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let s = row.iter().map(|&x| (x - m).exp()).sum::<S>();
    m + s.ln()
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Rotates consecutive pairs `(2i, 2i+1)` of each row by `pos * base^(-2i/dh)`.
fn apply_rotary<S: Scalar>(data: &mut [S], t: usize, dh: usize, base: f64, inverse: bool) {
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    for (r, row) in data.chunks_mut(dh).enumerate() {
        let pos = (r % t) as f64;
        for (i, f) in freqs.iter().enumerate() {
            let ang = if inverse { -pos * f } else { pos * f };
            let (sn, cs) = ang.sin_cos();
            let (sn, cs) = (S::from_f64_lossy(sn), S::from_f64_lossy(cs));
            let x0 = row[2 * i];
            let x1 = row[2 * i + 1];
            row[2 * i] = x0 * cs - x1 * sn;
            row[2 * i + 1] = x0 * sn + x1 * cs;
        }
    }
}
