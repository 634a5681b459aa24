//! In-context learning from compressed demonstrations: packing, label
//! scoring with optional contextual calibration, accuracy over seeds, and a
//! synthetic marker task whose label mapping is only recoverable from
//! demonstrations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressor::{accumulate, compress_all, CompressorConfig, Document};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::eval::pool;
use crate::model::{ModelState, SoftPrompt};
use crate::scalar::Scalar;

const LABEL_SLOT: &str = "{label}";
/// Field value of the content-free calibration probe.
pub const CONTENT_FREE: &str = "N/A";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verbalizer {
    pub label: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Demonstration template with `{field}` slots and one `{label}` slot.
    pub template: String,
    pub verbalizers: Vec<Verbalizer>,
    /// Token budget of one demonstration segment.
    pub token_budget: usize,
    pub n_segments: usize,
    pub use_calibration: bool,
    pub class_balanced: bool,
}

/// One labeled example; every key other than `label` fills a template slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub label: String,
    #[serde(flatten)]
    pub fields: BTreeMap<String, String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.template.matches(LABEL_SLOT).count() != 1 {
            return bad("template", "needs exactly one {label} slot");
        }
        if self.verbalizers.is_empty() {
            return bad("verbalizers", "at least one label is required");
        }
        if let Some(v) = self.verbalizers.iter().find(|v| v.text.is_empty()) {
            return bad(
                "verbalizers",
                &format!("label {:?} has an empty verbalizer", v.label),
            );
        }
        if !(1..=3).contains(&self.n_segments) {
            return bad("n_segments", "must be 1, 2 or 3");
        }
        if self.token_budget == 0 {
            return bad("token_budget", "must be positive");
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.verbalizers
            .iter()
            .position(|v| v.label == label)
            .ok_or_else(|| Error::Invalid(format!("label {label:?} has no verbalizer")))
    }

    fn fill(&self, part: &str, ex: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::new();
        let mut rest = part;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Invalid("unclosed slot in template".into()))?;
            let name = &rest[open + 1..open + close];
            let value = ex
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("example has no field {name:?}")))?;
            out.push_str(value);
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn split_template(&self) -> (&str, &str) {
        let at = self
            .template
            .find(LABEL_SLOT)
            .unwrap_or(self.template.len());
        let tail = self.template.get(at + LABEL_SLOT.len()..).unwrap_or("");
        (&self.template[..at], tail)
    }

    /// Template up to the label slot.
    pub fn render_query(&self, fields: &BTreeMap<String, String>) -> Result<Vec<usize>> {
        let (head, _) = self.split_template();
        Ok(Tokenizer.encode(&self.fill(head, fields)?))
    }

    /// Full template with the example's verbalized label.
    pub fn render_demo(&self, ex: &Example) -> Result<Vec<usize>> {
        let (head, tail) = self.split_template();
        let verb = &self.verbalizers[self.label_index(&ex.label)?].text;
        let text = format!(
            "{}{}{}",
            self.fill(head, &ex.fields)?,
            verb,
            self.fill(tail, &ex.fields)?
        );
        Ok(Tokenizer.encode(&text))
    }

    fn content_free(&self, like: &Example) -> BTreeMap<String, String> {
        like.fields
            .keys()
            .map(|k| (k.clone(), CONTENT_FREE.to_string()))
            .collect()
    }
}

/// Demonstration order: shuffled, or round-robin over labels (in verbalizer
/// order) when class balancing is on.
fn demo_order<R: Rng>(pool: &[Example], spec: &TaskSpec, rng: &mut R) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    if !spec.class_balanced {
        return Ok(order);
    }
    let mut queues = vec![Vec::new(); spec.verbalizers.len()];
    for i in order {
        queues[spec.label_index(&pool[i].label)?].push(i);
    }
    let mut out = Vec::with_capacity(pool.len());
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        for q in &queues {
            if let Some(&i) = q.get(r) {
                out.push(i);
            }
        }
    }
    Ok(out)
}

/// Greedily fills up to `n_segments` segments of at most `token_budget`
/// tokens. Demonstrations longer than the budget are skipped.
pub fn pack_demonstrations<R: Rng>(
    pool: &[Example],
    spec: &TaskSpec,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::Invalid("demonstration pool is empty".into()));
    }
    let mut segments: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut rejected: Option<(usize, usize)> = None;
    for i in demo_order(pool, spec, rng)? {
        let toks = spec.render_demo(&pool[i])?;
        if toks.len() > spec.token_budget {
            rejected.get_or_insert((i, toks.len()));
            continue;
        }
        if cur.len() + toks.len() > spec.token_budget {
            segments.push(std::mem::take(&mut cur));
            if segments.len() == spec.n_segments {
                break;
            }
        }
        cur.extend(toks);
    }
    if !cur.is_empty() && segments.len() < spec.n_segments {
        segments.push(cur);
    }
    if segments.is_empty() {
        let (example, needed) = rejected.unwrap_or((0, 0));
        return Err(Error::DemoTooLong {
            example,
            needed,
            budget: spec.token_budget,
        });
    }
    Ok(segments)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    /// Mean verbalizer log-prob per label.
    pub scores: Vec<f64>,
    /// Label distribution the argmax is taken over (calibrated if enabled).
    pub probs: Vec<f64>,
}

fn label_scores<S: Scalar>(
    model: &ModelState<S>,
    compressed: &SoftPrompt<S>,
    query: &[usize],
    spec: &TaskSpec,
) -> Result<Vec<f64>> {
    spec.verbalizers
        .iter()
        .map(|v| {
            let target = Tokenizer.encode(&v.text);
            let lp = model.continuation_logprobs(compressed, query, &target)?;
            Ok(lp.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / lp.len() as f64)
        })
        .collect()
}

/// `exp(score)` normalized over labels.
fn normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Divides by the content-free distribution and renormalizes.
pub fn calibrate(probs: &[f64], content_free: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = probs.iter().zip(content_free).map(|(p, q)| p / q).collect();
    let z: f64 = r.iter().sum();
    r.iter().map(|x| x / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classify<S: Scalar>(
    model: &ModelState<S>,
    compressed: &SoftPrompt<S>,
    example: &Example,
    spec: &TaskSpec,
) -> Result<Prediction> {
    let query = spec.render_query(&example.fields)?;
    let scores = label_scores(model, compressed, &query, spec)?;
    let mut probs = normalize(&scores);
    if spec.use_calibration {
        let cf = spec.render_query(&spec.content_free(example))?;
        let q = normalize(&label_scores(model, compressed, &cf, spec)?);
        probs = calibrate(&probs, &q);
    }
    Ok(Prediction {
        label: argmax(&probs),
        scores,
        probs,
    })
}

fn accuracy<S: Scalar>(
    model: &ModelState<S>,
    prompt: &SoftPrompt<S>,
    eval: &[Example],
    spec: &TaskSpec,
) -> Result<f64> {
    let hits: Vec<Result<bool>> = pool().install(|| {
        eval.par_iter()
            .map(|ex| Ok(classify(model, prompt, ex, spec)?.label == spec.label_index(&ex.label)?))
            .collect()
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / eval.len().max(1) as f64)
}

/// Accuracy with an empty soft prompt.
pub fn zero_shot_accuracy<S: Scalar>(
    model: &ModelState<S>,
    eval: &[Example],
    spec: &TaskSpec,
) -> Result<f64> {
    spec.validate()?;
    accuracy(model, &SoftPrompt::empty(), eval, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IclResult {
    pub n_segments: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per seed: sample and pack demonstrations, compress them, classify the
/// eval split.
pub fn eval_icl<S: Scalar>(
    model: &ModelState<S>,
    demo_pool: &[Example],
    eval: &[Example],
    spec: &TaskSpec,
    cfg: &CompressorConfig,
    seeds: &[u64],
) -> Result<IclResult> {
    let mut accuracies = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segments = pack_demonstrations(demo_pool, spec, &mut rng)?;
        let refs: Vec<&[usize]> = segments.iter().map(Vec::as_slice).collect();
        let blocks = compress_all(model, &refs, cfg)?;
        let prompt = accumulate(
            &blocks,
            &CompressorConfig {
                accumulation: true,
                ..cfg.clone()
            },
        );
        accuracies.push(accuracy(model, &prompt, eval, spec)?);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(IclResult {
        n_segments: spec.n_segments,
        accuracies,
        mean,
        std,
    })
}

const MARKER_LETTERS: &[u8] = b"etaoinsh";
const MARKER_WIDTH: usize = 4;

/// Task spec of the synthetic marker task: `{text}>{label};`.
pub fn marker_spec() -> TaskSpec {
    TaskSpec {
        template: "{text}>{label};".into(),
        verbalizers: vec![
            Verbalizer {
                label: "a".into(),
                text: "A".into(),
            },
            Verbalizer {
                label: "b".into(),
                text: "B".into(),
            },
        ],
        token_budget: 64,
        n_segments: 1,
        use_calibration: false,
        class_balanced: false,
    }
}

/// How a marker-task instance assigns labels. `flip` is fixed per task
/// instance, so only demonstrations reveal the mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerRule {
    /// Every example carries the instance label (`b` iff `flip`).
    Instance,
    /// Parity of the marker digit, swapped when `flip` is set.
    Parity,
}

impl std::str::FromStr for MarkerRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Self::Instance),
            "parity" => Ok(Self::Parity),
            other => Err(Error::Config {
                field: "marker_rule".into(),
                reason: format!("unknown marker rule {other:?}"),
            }),
        }
    }
}

/// Filler letters with one marker digit at a random position.
pub fn marker_example<R: Rng>(rule: MarkerRule, flip: bool, rng: &mut R) -> Example {
    let digit = rng.gen_range(0..10u8);
    let at = rng.gen_range(0..MARKER_WIDTH);
    let text: Vec<u8> = (0..MARKER_WIDTH)
        .map(|i| {
            if i == at {
                b'0' + digit
            } else {
                MARKER_LETTERS[rng.gen_range(0..MARKER_LETTERS.len())]
            }
        })
        .collect();
    let b = match rule {
        MarkerRule::Instance => flip,
        MarkerRule::Parity => (digit % 2 == 1) ^ flip,
    };
    Example {
        label: if b { "b" } else { "a" }.into(),
        fields: BTreeMap::from([("text".to_string(), String::from_utf8(text).unwrap())]),
    }
}

/// Demonstration pool and eval split of one task instance.
pub fn marker_task(
    rule: MarkerRule,
    flip: bool,
    n_pool: usize,
    n_eval: usize,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = (0..n_pool)
        .map(|_| marker_example(rule, flip, &mut rng))
        .collect();
    let eval = (0..n_eval)
        .map(|_| marker_example(rule, flip, &mut rng))
        .collect();
    (pool, eval)
}

/// Training documents: rendered demonstrations of one random task instance
/// per document, cut to `doc_len` tokens.
pub fn marker_documents(
    rule: MarkerRule,
    count: usize,
    doc_len: usize,
    seed: u64,
) -> Vec<Document> {
    let spec = marker_spec();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let flip = rng.gen_bool(0.5);
            let mut tokens = Vec::with_capacity(doc_len + 8);
            while tokens.len() < doc_len {
                let ex = marker_example(rule, flip, &mut rng);
                tokens.extend(spec.render_demo(&ex).expect("marker demo"));
            }
            tokens.truncate(doc_len);
            Document::new(format!("marker-{i}"), tokens)
        })
        .collect()
}
