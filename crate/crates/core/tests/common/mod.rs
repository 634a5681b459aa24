//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line detail on success and a description of the failure
//! otherwise.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use autocompressor::compressor::{
    accumulate, document_pass, record_segments, CompressorConfig, Document, Segmentation,
};
use autocompressor::model::{ModelConfig, ModelState, PositionalMode, SoftPrompt, SummaryBlock};
use autocompressor::rerank::{rank_by_scores, recall_at_k};
use autocompressor::retrieval::{
    fuse_passages, fuse_summaries, fusion_order, replug_score, smooth, HashEmbedder, PassageIndex,
    RetrievedSet,
};
use autocompressor::scalar::tolerance;
use autocompressor::store::{StoreDtype, SummaryStore};
use autocompressor::{checkpoint, Error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn micro_config(mode: PositionalMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_window: 16,
        kappa: 2,
        positional_mode: mode,
    }
}

/// Micro model with weights large enough for non-trivial gradients.
pub fn micro_model(mode: PositionalMode, seed: u64) -> ModelState<f64> {
    perturbed(micro_config(mode), seed)
}

pub fn perturbed(cfg: ModelConfig, seed: u64) -> ModelState<f64> {
    let mut m = ModelState::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    for t in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    m
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(tolerance::FD_FLOOR)
}

/// Max relative error between autodiff and central differences of
/// `sum(f(inputs) * w)` for a fixed random `w`.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> autocompressor::Result<Var>,
{
    let weights = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs).map_err(|e| e.to_string())?;
        Tensor::<f64>::uniform(g.shape(y), -1.0, 1.0, &mut rng(seed))
    };
    let loss = |ins: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>), String> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins
            .iter()
            .map(|t| {
                if grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = f(&mut g, &vs).map_err(|e| e.to_string())?;
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w).map_err(|e| e.to_string())?;
        let l = g.sum(prod);
        let value = g.value(l).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(l).map_err(|e| e.to_string())?;
        let grads = vs
            .iter()
            .map(|v| {
                gr.get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v)))
            })
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = loss(inputs, true)?;
    let h = tolerance::FD_STEP;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (loss(&plus, false)?.0 - loss(&minus, false)?.0) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], fd));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Every differentiable op, one case each (two for ops with a mode flag).
pub fn op_cases() -> Vec<(
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> autocompressor::Result<Var>>,
)> {
    let targets = vec![1usize, 0, 4];
    let targets2 = targets.clone();
    vec![
        (
            "matmul",
            vec![randn(&[3, 4], 1), randn(&[4, 5], 2)],
            Box::new(|g, v| g.matmul(v[0], v[1], false)),
        ),
        (
            "matmul_t",
            vec![randn(&[3, 4], 3), randn(&[5, 4], 4)],
            Box::new(|g, v| g.matmul(v[0], v[1], true)),
        ),
        (
            "batch_matmul",
            vec![randn(&[2, 3, 4], 5), randn(&[2, 4, 3], 6)],
            Box::new(|g, v| g.batch_matmul(v[0], v[1], false)),
        ),
        (
            "batch_matmul_t",
            vec![randn(&[2, 3, 4], 7), randn(&[2, 5, 4], 8)],
            Box::new(|g, v| g.batch_matmul(v[0], v[1], true)),
        ),
        (
            "add",
            vec![randn(&[3, 4], 9), randn(&[3, 4], 10)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "add_bias",
            vec![randn(&[3, 4], 11), randn(&[4], 12)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        (
            "mul",
            vec![randn(&[3, 4], 13), randn(&[3, 4], 14)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "scale",
            vec![randn(&[3, 4], 15)],
            Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "softmax",
            vec![randn(&[3, 5], 16)],
            Box::new(|g, v| g.softmax(v[0], false)),
        ),
        (
            "softmax_causal",
            vec![randn(&[2, 4, 4], 17)],
            Box::new(|g, v| g.softmax(v[0], true)),
        ),
        (
            "layer_norm",
            vec![randn(&[3, 6], 18), randn(&[6], 19), randn(&[6], 20)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "gelu",
            vec![randn(&[3, 4], 21)],
            Box::new(|g, v| Ok(g.gelu(v[0]))),
        ),
        (
            "embedding",
            vec![randn(&[6, 3], 22)],
            Box::new(|g, v| g.embedding(v[0], &[2, 0, 2, 5])),
        ),
        (
            "concat_rows",
            vec![randn(&[2, 3], 23), randn(&[4, 3], 24)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        (
            "slice_rows",
            vec![randn(&[5, 3], 25)],
            Box::new(|g, v| g.slice_rows(v[0], 1, 4)),
        ),
        (
            "split_heads",
            vec![randn(&[3, 6], 26)],
            Box::new(|g, v| g.split_heads(v[0], 2)),
        ),
        (
            "merge_heads",
            vec![randn(&[2, 3, 4], 27)],
            Box::new(|g, v| g.merge_heads(v[0])),
        ),
        (
            "rotary",
            vec![randn(&[2, 5, 4], 28)],
            Box::new(|g, v| g.rotary(v[0], 10000.0)),
        ),
        (
            "causal_attention",
            vec![
                randn(&[2, 4, 3], 29),
                randn(&[2, 4, 3], 30),
                randn(&[2, 4, 3], 31),
            ],
            Box::new(|g, v| g.causal_attention(v[0], v[1], v[2])),
        ),
        (
            "cross_entropy",
            vec![randn(&[3, 6], 32)],
            Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
        ),
        (
            "cross_entropy_scaled",
            vec![randn(&[3, 6], 33)],
            Box::new(move |g, v| g.cross_entropy_scaled(v[0], &targets2, 0.37)),
        ),
        (
            "sum",
            vec![randn(&[3, 4], 34)],
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
    ]
}

/// Gradient check of every op plus the document objective.
pub fn gradcheck_all() -> Check {
    let mut worst = (0.0, "");
    for (name, inputs, f) in op_cases() {
        let e = check_op(&inputs, 99, |g, v| f(g, v))?;
        if e > worst.0 {
            worst = (e, name);
        }
    }
    for mode in [PositionalMode::Absolute, PositionalMode::Rotary] {
        let e = gradcheck_document(mode)?;
        if e > worst.0 {
            worst = (e, "document_loss");
        }
    }
    let detail = format!(
        "max rel err {:.2e} ({}) over 22 ops + document_loss",
        worst.0, worst.1
    );
    if worst.0 < tolerance::FD_REL_ERR {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn micro_compressor(stop_grad_every: usize) -> CompressorConfig {
    CompressorConfig {
        kappa: 2,
        accumulation: true,
        randomized_segmenting: false,
        stop_grad_every,
        min_len: 1,
        max_len: 16,
        pair_sum: None,
    }
}

pub fn micro_doc(len: usize, seed: u64) -> Document {
    let mut r = rng(seed);
    Document::new("micro", (0..len).map(|_| r.gen_range(0..11)).collect())
}

/// Autodiff vs central differences of the 2-segment document objective,
/// over every parameter element.
pub fn gradcheck_document(mode: PositionalMode) -> Result<f64, String> {
    let model = micro_model(mode, 3);
    let doc = micro_doc(12, 4);
    let seg = Segmentation::from_lengths(&[5, 7]);
    let cfg = micro_compressor(2);
    let pass = document_pass(&model, &doc, &seg, &cfg, true).map_err(|e| e.to_string())?;
    let grads = pass.grads.unwrap();
    let h = tolerance::FD_STEP;
    let mut worst: f64 = 0.0;
    let n_tensors = model.params.iter().count();
    for ti in 0..n_tensors {
        let len = model.params.iter().nth(ti).unwrap().len();
        for j in 0..len {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.iter_mut().nth(ti).unwrap().data_mut()[j] += delta;
                document_pass(&m, &doc, &seg, &cfg, false).map(|p| p.loss)
            };
            let fd = (eval(h).map_err(|e| e.to_string())? - eval(-h).map_err(|e| e.to_string())?)
                / (2.0 * h);
            let a = grads.iter().nth(ti).unwrap().data()[j];
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}

/// The first segment sees exactly the plain LM path: appending summary
/// rows leaves its logits unchanged, a summary-free twin with the same
/// weights gives identical log-probs, and the segment-1 loss recorded by the
/// compressor equals the plain cross-entropy bit for bit.
pub fn segment_one_equivalence() -> Check {
    for mode in [PositionalMode::Absolute, PositionalMode::Rotary] {
        let m: ModelState<f32> = micro_model(mode, 5).cast();
        let tokens = micro_doc(14, 6).tokens;
        let e = |r: autocompressor::Error| r.to_string();
        let (plain, _) = m.forward(&SoftPrompt::empty(), &tokens, false).map_err(e)?;
        let (with_sum, block) = m.forward(&SoftPrompt::empty(), &tokens, true).map_err(e)?;
        if block.is_none() {
            return Err("no summary emitted".into());
        }
        if plain.data() != with_sum.data() {
            return Err(format!("{mode:?}: summary rows changed token logits"));
        }
        let lp = m.token_logprobs(&SoftPrompt::empty(), &tokens).map_err(e)?;
        let mut twin_cfg = m.config.clone();
        twin_cfg.kappa = 0;
        let mut twin_params = m.params.clone();
        twin_params.sum_emb = Tensor::zeros(&[0, m.config.d_model]);
        let twin = ModelState::from_params(twin_cfg, twin_params).map_err(e)?;
        let lp_twin = twin
            .token_logprobs(&SoftPrompt::empty(), &tokens)
            .map_err(e)?;
        if lp != lp_twin {
            return Err(format!("{mode:?}: plain twin log-probs differ"));
        }
        let cfg = micro_compressor(2);
        let segs: Vec<&[usize]> = vec![&tokens[..8], &tokens[8..]];
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let rec = record_segments(&m, &mut g, &p, &segs, 0..2, &mut Vec::new(), &cfg, 1, None)
            .map_err(e)?;
        let lay = m
            .forward_layout(&mut g, &p, &[], segs[0], false)
            .map_err(e)?;
        let (logits, targets) = m
            .predictive_logits(&mut g, &p, &lay, segs[0])
            .map_err(e)?
            .unwrap();
        let reference = g.cross_entropy_scaled(logits, &targets, 1.0).map_err(e)?;
        let got = g.value(rec.losses[0].unwrap()).item();
        if got.to_bits() != g.value(reference).item().to_bits() {
            return Err(format!(
                "{mode:?}: compressed segment-1 loss differs from the plain path"
            ));
        }
    }
    Ok("bit-identical logits, log-probs and segment-1 loss (absolute and rotary, f32)".into())
}

/// Stop-gradient probe on a 4-segment document with windows of 2.
pub fn stop_grad_semantics() -> Check {
    let m = micro_model(PositionalMode::Absolute, 7);
    let doc = micro_doc(16, 8);
    let lens = [4usize, 4, 4, 4];
    let segs: Vec<&[usize]> = {
        let mut out = Vec::new();
        let mut s = 0;
        for l in lens {
            out.push(&doc.tokens[s..s + l]);
            s += l;
        }
        out
    };
    let grad_through_sigma1 = |every: usize| -> Result<f64, String> {
        let cfg = micro_compressor(every);
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let mut carried = Vec::new();
        let rec = record_segments(&m, &mut g, &p, &segs, 0..4, &mut carried, &cfg, 16, Some(3))
            .map_err(|e| e.to_string())?;
        let sigma1 = rec.blocks[0].ok_or("segment 1 emitted no block")?;
        let loss4 = rec.losses[3].ok_or("segment 4 has no loss")?;
        let gr = g.backward(loss4).map_err(|e| e.to_string())?;
        Ok(gr
            .get(sigma1)
            .map(|t| t.data().iter().map(|v| v.abs()).sum())
            .unwrap_or(0.0))
    };
    let on = grad_through_sigma1(2)?;
    let off = grad_through_sigma1(0)?;
    if on != 0.0 {
        return Err(format!(
            "segment-4 gradient through sigma_1 is {on:e}, expected exactly 0"
        ));
    }
    if off == 0.0 {
        return Err("without the policy the probe gradient is also zero; probe is vacuous".into());
    }
    let seg = Segmentation::from_lengths(&lens);
    let with =
        document_pass(&m, &doc, &seg, &micro_compressor(2), true).map_err(|e| e.to_string())?;
    let without =
        document_pass(&m, &doc, &seg, &micro_compressor(0), true).map_err(|e| e.to_string())?;
    if with.loss.to_bits() != without.loss.to_bits() {
        return Err(format!("loss {} vs {}", with.loss, without.loss));
    }
    if with.peak_graph_nodes >= without.peak_graph_nodes {
        return Err(format!(
            "peak graph {} (policy on) not below {} (off)",
            with.peak_graph_nodes, without.peak_graph_nodes
        ));
    }
    Ok(format!(
        "grad through sigma_1 = 0 (off: {off:.3e}); losses bit-identical; peak nodes {} < {}",
        with.peak_graph_nodes, without.peak_graph_nodes
    ))
}

/// Soft-prompt rows before segment `i` in both modes.
pub fn prompt_rows(i: usize, kappa: usize, accumulation: bool) -> usize {
    let blocks: Vec<SummaryBlock<f64>> = (1..i)
        .map(|k| SummaryBlock {
            vectors: Tensor::zeros(&[kappa, 3]),
            source_id: format!("s{k}"),
        })
        .collect();
    let cfg = CompressorConfig {
        kappa,
        accumulation,
        ..CompressorConfig::default()
    };
    accumulate(&blocks, &cfg).rows()
}

pub fn shape_law() -> Check {
    for kappa in [1usize, 4, 50] {
        for i in 1..=8 {
            let acc = prompt_rows(i, kappa, true);
            let rmt = prompt_rows(i, kappa, false);
            if acc != (i - 1) * kappa || rmt != (i - 1).min(1) * kappa {
                return Err(format!("i={i} kappa={kappa}: {acc} / {rmt}"));
            }
        }
    }
    let spot = prompt_rows(4, 50, true);
    if spot != 150 {
        return Err(format!("i=4, kappa=50 gives {spot} rows"));
    }
    Ok(format!(
        "(i-1)*kappa vs min(1,i-1)*kappa for i<=8; i=4, kappa=50 -> {spot}"
    ))
}

fn passage_doc(id: &str, len: usize, seed: u64) -> Document {
    let mut r = rng(seed);
    Document::new(id, (0..len).map(|_| r.gen_range(0..11)).collect())
}

/// Hand-built retrieval micro-instance on a 64-bit micro model.
pub struct FusionFixture {
    pub model: ModelState<f64>,
    pub index: PassageIndex,
    pub store: SummaryStore,
    pub retrieved: RetrievedSet,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

pub fn fusion_fixture() -> FusionFixture {
    let model = perturbed(
        ModelConfig {
            context_window: 32,
            ..micro_config(PositionalMode::Absolute)
        },
        11,
    );
    let passages = vec![
        passage_doc("p0", 5, 20),
        passage_doc("p1", 4, 21),
        passage_doc("p2", 6, 22),
    ];
    let index = PassageIndex::new(passages.clone(), 8, HashEmbedder::new(8, 64, 0)).unwrap();
    let entries = passages
        .iter()
        .map(|p| {
            (
                p.id.clone(),
                model
                    .summarize(&SoftPrompt::empty(), &p.tokens)
                    .unwrap()
                    .vectors
                    .cast::<f32>(),
            )
        })
        .collect();
    let store = SummaryStore::new(2, 8, StoreDtype::F32, entries).unwrap();
    let retrieved = RetrievedSet::from_scores(vec![
        ("p1".into(), 0.3),
        ("p0".into(), 1.2),
        ("p2".into(), -0.4),
    ]);
    FusionFixture {
        model,
        index,
        store,
        retrieved,
        x: vec![3, 1, 4],
        y: vec![1, 5, 9, 2, 6],
    }
}

/// Plain-path log p(y | ctx): one independent forward over `ctx ++ y`.
fn oracle_logprobs(m: &ModelState<f64>, ctx: &[usize], y: &[usize]) -> Vec<f64> {
    let mut seq = ctx.to_vec();
    seq.extend_from_slice(y);
    let lp = m.next_token_logprobs(&SoftPrompt::empty(), &seq).unwrap();
    lp[lp.len() - y.len()..].to_vec()
}

pub fn fusion_math() -> Check {
    let f = fusion_fixture();
    // REPLUG: three independent forwards, hand-computed softmax weights.
    let sims = [("p0", 1.2f64), ("p1", 0.3), ("p2", -0.4)];
    let z: f64 = sims.iter().map(|s| s.1.exp()).sum();
    let mut mixture = 0.0;
    for (id, s) in sims {
        let mut ctx = f.index.passage(id).unwrap().tokens.clone();
        ctx.extend_from_slice(&f.x);
        let lp: f64 = oracle_logprobs(&f.model, &ctx, &f.y).iter().sum();
        mixture += s.exp() / z * lp.exp();
    }
    let got =
        replug_score(&f.model, &f.x, &f.y, &f.retrieved, &f.index).map_err(|e| e.to_string())?;
    let err = (got.log_prob - mixture.ln()).abs();
    if err > tolerance::MIXTURE {
        return Err(format!("replug log-prob off by {err:e}"));
    }
    // smoothing: per-token arithmetic mean of conditioned and plain
    let plain: Vec<f64> = oracle_logprobs(&f.model, &f.x, &f.y)
        .iter()
        .map(|v| v.exp())
        .collect();
    let mut ctx = Vec::new();
    for id in ["p2", "p1", "p0"] {
        ctx.extend_from_slice(&f.index.passage(id).unwrap().tokens);
    }
    ctx.extend_from_slice(&f.x);
    let cond: Vec<f64> = oracle_logprobs(&f.model, &ctx, &f.y)
        .iter()
        .map(|v| v.exp())
        .collect();
    let fp =
        fuse_passages(&f.model, &f.x, &f.y, &f.retrieved, &f.index).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for t in 0..f.y.len() {
        worst = worst.max((fp.token_probs[t] - (cond[t] + plain[t]) / 2.0).abs());
    }
    if worst > tolerance::SMOOTHING {
        return Err(format!("fused-passages smoothing off by {worst:e}"));
    }
    if smooth(&[0.2, 0.9], &[0.4, 0.1]) != vec![(0.2 + 0.4) / 2.0, (0.9 + 0.1) / 2.0] {
        return Err("smooth is not the arithmetic mean".into());
    }
    // ordering: least relevant first, most relevant adjacent to x
    if fp.order != ["p2", "p1", "p0"] {
        return Err(format!("fused-passages order {:?}", fp.order));
    }
    let fs = fuse_summaries(&f.model, &f.x, &f.y, &f.retrieved, &f.store, false)
        .map_err(|e| e.to_string())?;
    if fs.order != ["p2", "p1", "p0"] {
        return Err(format!("fused-summaries order {:?}", fs.order));
    }
    let distances = [0.5, 2.0, 1.0];
    let by_dist: Vec<&str> = fusion_order(&f.retrieved, Some(&distances))
        .iter()
        .map(|&i| f.retrieved.entries[i].id.as_str())
        .collect();
    if by_dist != ["p1", "p2", "p0"] {
        return Err(format!("distance order {by_dist:?}"));
    }
    // re-ranking permutations on hand-scored candidates
    if rank_by_scores(&[-2.0, -0.5, -1.0]) != vec![1, 2, 0]
        || rank_by_scores(&[-1.0, -1.0, 0.0]) != vec![2, 0, 1]
    {
        return Err("rank_by_scores permutation".into());
    }
    let ranked = vec![
        vec!["a".to_string(), "b".into()],
        vec!["c".into(), "d".into()],
    ];
    let golds = vec![vec!["b".to_string()], vec!["z".to_string()]];
    if recall_at_k(&ranked, &golds, 1) != 0.0 || recall_at_k(&ranked, &golds, 2) != 0.5 {
        return Err("recall_at_k".into());
    }
    Ok(format!(
        "replug err {err:.1e}; smoothing err {worst:.1e}; orders exact"
    ))
}

pub fn persistence() -> Check {
    let m = ModelState::<f32>::init(ModelConfig::default(), 21).map_err(|e| e.to_string())?;
    let bytes = checkpoint::encode(&m).map_err(|e| e.to_string())?;
    let back: ModelState<f32> = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    let bits = |p: &autocompressor::model::ModelParams<Tensor<f32>>| -> Vec<u32> {
        p.iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    if back.config != m.config || bits(&back.params) != bits(&m.params) {
        return Err("checkpoint round-trip is not bit-exact".into());
    }
    let mut r = rng(22);
    let entries: Vec<(String, Tensor<f32>)> = (0..5)
        .map(|i| {
            (
                format!("p{i}"),
                Tensor::<f32>::uniform(&[4, 64], -8.0, 8.0, &mut r),
            )
        })
        .collect();
    let ids: Vec<String> = {
        let mut v: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        v.sort();
        v
    };
    let s32 =
        SummaryStore::new(4, 64, StoreDtype::F32, entries.clone()).map_err(|e| e.to_string())?;
    let b32 = SummaryStore::decode(&s32.encode(), ids.clone()).map_err(|e| e.to_string())?;
    for (id, t) in &entries {
        let got = b32.raw(id).unwrap();
        if got
            .data()
            .iter()
            .zip(t.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("f32 store block {id} not bit-exact"));
        }
    }
    let s16 =
        SummaryStore::new(4, 64, StoreDtype::F16, entries.clone()).map_err(|e| e.to_string())?;
    let b16 = SummaryStore::decode(&s16.encode(), ids.clone()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (id, t) in &entries {
        for (a, b) in b16.raw(id).unwrap().data().iter().zip(t.data()) {
            if b.abs() >= 1e-4 {
                worst = worst.max(((a - b) / b).abs() as f64);
            }
        }
    }
    if worst >= tolerance::F16_REL_ERR {
        return Err(format!("f16 relative error {worst}"));
    }
    let good = s32.encode();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = good.clone();
    bad_version[4] = 7;
    let mut bad_dtype = good.clone();
    bad_dtype[6] = 9;
    let truncated = good[..good.len() - 3].to_vec();
    for (name, b) in [
        ("magic", bad_magic),
        ("version", bad_version),
        ("dtype", bad_dtype),
        ("length", truncated),
    ] {
        match SummaryStore::decode(&b, ids.clone()) {
            Err(Error::Header { .. }) => {}
            other => return Err(format!("corrupted store {name}: {other:?}")),
        }
    }
    let mut ck = bytes.clone();
    ck[1] ^= 0xff;
    if !matches!(checkpoint::decode::<f32>(&ck), Err(Error::Header { .. })) {
        return Err("corrupted checkpoint accepted".into());
    }
    Ok(format!(
        "bit-exact f32 checkpoint and store; f16 max rel err {worst:.2e}; 5 corruptions rejected"
    ))
}

/// Path of the command-line binary.
pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_autocomp"))
}

pub fn run_cli(args: &[&str], out: &Path) -> Result<std::process::Output, String> {
    let o = Command::new(bin())
        .args(args)
        .arg("--out")
        .arg(out)
        .env("AUTOCOMP_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(o)
}

/// Small end-to-end pipeline; every file it writes, by relative path.
pub fn pipeline(dir: &Path, seed: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |s: &str| dir.join(s);
    let ps = |s: &str| p(s).display().to_string();
    run_cli(
        &[
            "gen-synthetic",
            "--kind",
            "kv-recall",
            "--count",
            "24",
            "--seed",
            seed,
        ],
        &p("gen"),
    )?;
    run_cli(
        &[
            "gen-synthetic",
            "--kind",
            "rerank",
            "--count",
            "3",
            "--seed",
            seed,
        ],
        &p("rr"),
    )?;
    run_cli(
        &[
            "gen-synthetic",
            "--kind",
            "planted",
            "--count",
            "3",
            "--seed",
            seed,
        ],
        &p("pl"),
    )?;
    run_cli(
        &[
            "train",
            "--steps",
            "3",
            "--corpus",
            &ps("gen/corpus.txt"),
            "--seed",
            seed,
        ],
        &p("train"),
    )?;
    let ck = ps("train/model.ckpt");
    run_cli(
        &[
            "eval-ppl",
            "--checkpoint",
            &ck,
            "--corpus",
            &ps("gen/corpus.txt"),
            "--n-compressed",
            "0,1",
            "--seed",
            seed,
        ],
        &p("ppl"),
    )?;
    run_cli(
        &[
            "tokenwise",
            "--checkpoint",
            &ck,
            "--corpus",
            &ps("gen/corpus.txt"),
            "--seed",
            seed,
        ],
        &p("tok"),
    )?;
    run_cli(
        &[
            "build-index",
            "--corpus",
            &ps("gen/corpus.txt"),
            "--passage-len",
            "32",
            "--seed",
            seed,
        ],
        &p("idx"),
    )?;
    run_cli(
        &[
            "build-store",
            "--checkpoint",
            &ck,
            "--index",
            &ps("pl/index.json"),
            "--dtype",
            "float16",
            "--seed",
            seed,
        ],
        &p("store"),
    )?;
    for fusion in ["replug", "fused-summaries", "fused-passages"] {
        let mut args = vec![
            "eval-retrieval",
            "--checkpoint",
            &ck,
            "--index",
            "",
            "--queries",
            "",
            "--fusion",
            fusion,
            "--top-k",
            "1",
            "--seed",
            seed,
        ];
        let index = ps("pl/index.json");
        let queries = ps("pl/queries.jsonl");
        args[4] = &index;
        args[6] = &queries;
        let store = ps("store/store.acsv");
        if fusion == "fused-summaries" {
            args.extend(["--store", &store, "--rerank"]);
        }
        run_cli(&args, &p(&format!("ret-{fusion}")))?;
    }
    run_cli(
        &[
            "build-store",
            "--checkpoint",
            &ck,
            "--index",
            &ps("rr/index.json"),
            "--seed",
            seed,
        ],
        &p("store-rr"),
    )?;
    run_cli(
        &[
            "rerank",
            "--checkpoint",
            &ck,
            "--instances",
            &ps("rr/instances.jsonl"),
            "--index",
            &ps("rr/index.json"),
            "--store",
            &ps("store-rr/store.acsv"),
            "--mode",
            "summary",
            "--k",
            "1,5",
            "--seed",
            seed,
        ],
        &p("rerank"),
    )?;
    let icl_cfg = p("icl.json");
    std::fs::write(
        &icl_cfg,
        r#"{"icl": {"n_seeds": 2, "n_pool": 16, "n_eval": 8}}"#,
    )
    .map_err(|e| e.to_string())?;
    run_cli(
        &[
            "--config",
            &icl_cfg.display().to_string(),
            "eval-icl",
            "--checkpoint",
            &ck,
            "--seed",
            seed,
        ],
        &p("icl"),
    )?;
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files).map_err(|e| e.to_string())?;
    files.sort();
    Ok(files)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let path = e?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path)?));
        }
    }
    Ok(())
}

/// Every pipeline output is byte-identical across two runs in different
/// directories (paths echoed in reports are excluded by comparing files
/// that do not embed them).
pub fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = pipeline(a.path(), "5")?;
    let fb = pipeline(b.path(), "5")?;
    if fa.len() != fb.len() {
        return Err(format!("{} vs {} files", fa.len(), fb.len()));
    }
    let root_a = a.path().display().to_string();
    let root_b = b.path().display().to_string();
    let mut compared = 0;
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        if na != nb {
            return Err(format!("file sets differ: {na} vs {nb}"));
        }
        let sa = String::from_utf8_lossy(ba).replace(&root_a, "<root>");
        let sb = String::from_utf8_lossy(bb).replace(&root_b, "<root>");
        if ba != bb && sa != sb {
            return Err(format!("{na} differs between runs"));
        }
        compared += 1;
    }
    Ok(format!(
        "{compared} output files byte-identical across two runs"
    ))
}
