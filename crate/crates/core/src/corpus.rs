//! Byte-level tokenization, corpus files and synthetic long-range tasks.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compressor::Document;
use crate::error::{Error, Result};

/// Byte-level tokenizer: token id == byte value.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub const VOCAB_SIZE: usize = 256;

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    pub fn decode_bytes(&self, tokens: &[usize]) -> Vec<u8> {
        tokens.iter().map(|&t| t as u8).collect()
    }

    /// Invalid UTF-8 is replaced with U+FFFD.
    pub fn decode(&self, tokens: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(tokens)).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    KvRecall,
    CopyPrefix,
    PlainMarkov,
    /// Filler sprinkled with a document-wide set of topic letters.
    Topic,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv_recall" => Ok(Self::KvRecall),
            "copy_prefix" => Ok(Self::CopyPrefix),
            "plain_markov" => Ok(Self::PlainMarkov),
            "topic" => Ok(Self::Topic),
            other => Err(Error::Config {
                field: "kind".into(),
                reason: format!("unknown synthetic kind {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub doc_len: usize,
    /// Segment length the planted structure is aligned to.
    pub seg_len: usize,
    pub n_keys: usize,
    /// Segments between the definitions and the final (query) segment.
    pub key_distance: usize,
    /// Characters per planted value (kv_recall) or copied span (copy_prefix).
    pub val_len: usize,
    /// Seed of the shared Markov filler source.
    pub source_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::KvRecall,
            doc_len: 256,
            seg_len: 64,
            n_keys: 1,
            key_distance: 3,
            val_len: 4,
            source_seed: 1234,
        }
    }
}

impl SyntheticSpec {
    pub fn n_segments(&self) -> usize {
        self.doc_len / self.seg_len.max(1)
    }

    fn item_len(&self) -> usize {
        // "K" key "=V" value  /  "K" key "?V" value
        4 + self.val_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        if self.seg_len == 0 || self.doc_len % self.seg_len != 0 || self.doc_len == 0 {
            return bad(
                "doc_len",
                format!(
                    "{} is not a positive multiple of seg_len {}",
                    self.doc_len, self.seg_len
                ),
            );
        }
        match self.kind {
            SyntheticKind::PlainMarkov | SyntheticKind::Topic => Ok(()),
            SyntheticKind::KvRecall | SyntheticKind::CopyPrefix => {
                if self.key_distance == 0 || self.key_distance >= self.n_segments() {
                    return bad(
                        "key_distance",
                        format!(
                            "must be in [1, {}) for {} segments",
                            self.n_segments(),
                            self.n_segments()
                        ),
                    );
                }
                if self.val_len == 0 {
                    return bad("val_len", "must be >= 1".into());
                }
                let need = match self.kind {
                    SyntheticKind::KvRecall => {
                        if self.n_keys == 0 || self.n_keys > KEYS.len() {
                            return bad("n_keys", format!("must be in [1, {}]", KEYS.len()));
                        }
                        self.n_keys * self.item_len() + 2
                    }
                    _ => self.val_len + 2,
                };
                if need > self.seg_len {
                    return bad(
                        "doc_len",
                        format!(
                            "planted content of {need} tokens does not fit a {}-token segment",
                            self.seg_len
                        ),
                    );
                }
                Ok(())
            }
        }
    }
}

const FILLER: &[u8] = b"etaoinsh ";
const KEYS: &[u8] = b"0123456789";
const VALUES: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Order-2 Markov source over lowercase letters and space. Each context has
/// three successors with fixed skewed probabilities.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    table: Vec<[(u8, f64); 3]>,
}

const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.3, 0.1];

impl MarkovSource {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d41_524b);
        let n = FILLER.len();
        let table = (0..n * n)
            .map(|_| {
                let mut picks = [0u8; 3];
                let mut k = 0;
                while k < 3 {
                    let c = FILLER[rng.gen_range(0..n)];
                    if !picks[..k].contains(&c) {
                        picks[k] = c;
                        k += 1;
                    }
                }
                [
                    (picks[0], SUCCESSOR_PROBS[0]),
                    (picks[1], SUCCESSOR_PROBS[1]),
                    (picks[2], SUCCESSOR_PROBS[2]),
                ]
            })
            .collect();
        Self { table }
    }

    fn index(b: u8) -> usize {
        FILLER
            .iter()
            .position(|&c| c == b)
            .unwrap_or(FILLER.len() - 1)
    }

    /// Successor distribution given the previous two bytes.
    pub fn successors(&self, prev2: u8, prev1: u8) -> &[(u8, f64); 3] {
        &self.table[Self::index(prev2) * FILLER.len() + Self::index(prev1)]
    }

    pub fn next<R: Rng>(&self, prev2: u8, prev1: u8, rng: &mut R) -> u8 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let succ = self.successors(prev2, prev1);
        for &(c, p) in succ {
            acc += p;
            if u < acc {
                return c;
            }
        }
        succ[2].0
    }

    /// Continues `out` with `n` more filler bytes. The chain restarts at
    /// every multiple of `seg_len`, so no filler statistics cross a segment
    /// boundary.
    pub fn extend<R: Rng>(&self, out: &mut Vec<u8>, n: usize, seg_len: usize, rng: &mut R) {
        for _ in 0..n {
            let l = out.len();
            let in_seg = l % seg_len.max(1);
            let p2 = if in_seg >= 2 { out[l - 2] } else { b' ' };
            let p1 = if in_seg >= 1 { out[l - 1] } else { b' ' };
            out.push(self.next(p2, p1, rng));
        }
    }

    /// Like [`MarkovSource::extend`], but each byte is a uniformly drawn
    /// topic letter with probability `density`.
    pub fn extend_topic<R: Rng>(
        &self,
        out: &mut Vec<u8>,
        n: usize,
        seg_len: usize,
        topic: &[u8],
        density: f64,
        rng: &mut R,
    ) {
        for _ in 0..n {
            if rng.gen_bool(density) {
                out.push(topic[rng.gen_range(0..topic.len())]);
            } else {
                self.extend(out, 1, seg_len, rng);
            }
        }
    }

    /// Entropy rate in nats per token.
    pub fn entropy(&self) -> f64 {
        -SUCCESSOR_PROBS.iter().map(|p| p * p.ln()).sum::<f64>()
    }
}

/// A generated document plus the positions of its planted answer tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub doc: Document,
    /// Token positions whose value is determined by earlier segments.
    pub answers: Vec<usize>,
}

/// Generates one document. The filler is the shared Markov source, so the
/// only long-range structure is the planted one.
pub fn gen_synthetic<R: Rng>(spec: &SyntheticSpec, id: &str, rng: &mut R) -> Result<SyntheticDoc> {
    spec.validate()?;
    let src = MarkovSource::new(spec.source_seed);
    let n_seg = spec.n_segments();
    let seg = spec.seg_len;
    let mut bytes: Vec<u8> = Vec::with_capacity(spec.doc_len);
    let mut answers = Vec::new();
    match spec.kind {
        SyntheticKind::PlainMarkov => src.extend(&mut bytes, spec.doc_len, seg, rng),
        SyntheticKind::Topic => {
            let topic = random_topic(rng);
            src.extend_topic(&mut bytes, spec.doc_len, seg, &topic, TOPIC_DENSITY, rng);
            let final_start = (n_seg - 1) * seg;
            answers.extend((final_start..spec.doc_len).filter(|&i| topic.contains(&bytes[i])));
        }
        SyntheticKind::KvRecall => {
            let def_seg = n_seg - 1 - spec.key_distance;
            let mut keys: Vec<u8> = KEYS.to_vec();
            // partial Fisher-Yates for distinct keys
            for i in 0..spec.n_keys {
                let j = rng.gen_range(i..keys.len());
                keys.swap(i, j);
            }
            let keys = &keys[..spec.n_keys];
            let values: Vec<Vec<u8>> = (0..spec.n_keys)
                .map(|_| {
                    (0..spec.val_len)
                        .map(|_| VALUES[rng.gen_range(0..VALUES.len())])
                        .collect()
                })
                .collect();
            let block = spec.n_keys * spec.item_len();
            // definitions inside the definition segment
            let def_off = rng.gen_range(1..=seg - block - 1);
            src.extend(&mut bytes, def_seg * seg + def_off, seg, rng);
            for (k, v) in keys.iter().zip(&values) {
                bytes.extend_from_slice(&[b'K', *k, b'=', b'V']);
                bytes.extend_from_slice(v);
            }
            let final_start = (n_seg - 1) * seg;
            let gap = final_start - bytes.len();
            src.extend(&mut bytes, gap, seg, rng);
            // queries inside the final segment, in a shuffled order
            let mut order: Vec<usize> = (0..spec.n_keys).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let q_off = rng.gen_range(1..=seg - block - 1);
            src.extend(&mut bytes, q_off, seg, rng);
            for &i in &order {
                bytes.extend_from_slice(&[b'K', keys[i], b'?', b'V']);
                for &c in &values[i] {
                    answers.push(bytes.len());
                    bytes.push(c);
                }
            }
            let rest = spec.doc_len - bytes.len();
            src.extend(&mut bytes, rest, seg, rng);
        }
        SyntheticKind::CopyPrefix => {
            let def_seg = n_seg - 1 - spec.key_distance;
            let span: Vec<u8> = (0..spec.val_len)
                .map(|_| VALUES[rng.gen_range(0..VALUES.len())])
                .collect();
            let off = rng.gen_range(1..=seg - spec.val_len - 1);
            src.extend(&mut bytes, def_seg * seg + off, seg, rng);
            bytes.push(b'[');
            bytes.extend_from_slice(&span);
            let final_start = (n_seg - 1) * seg;
            let gap = final_start - bytes.len();
            src.extend(&mut bytes, gap, seg, rng);
            let q_off = rng.gen_range(1..=seg - spec.val_len - 1);
            src.extend(&mut bytes, q_off, seg, rng);
            bytes.push(b'[');
            for &c in &span {
                answers.push(bytes.len());
                bytes.push(c);
            }
            let rest = spec.doc_len - bytes.len();
            src.extend(&mut bytes, rest, seg, rng);
        }
    }
    debug_assert_eq!(bytes.len(), spec.doc_len);
    Ok(SyntheticDoc {
        doc: Document::new(id, Tokenizer.encode_bytes(&bytes)),
        answers,
    })
}

/// `count` documents with ids `{prefix}-{i}`; document `i` draws from its own
/// stream derived from `seed`, so corpora are reproducible and prefix-stable.
pub fn gen_corpus(
    spec: &SyntheticSpec,
    prefix: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<SyntheticDoc>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            gen_synthetic(spec, &format!("{prefix}-{i}"), &mut rng)
        })
        .collect()
}

/// Letters per topic and their share of topic-document bytes.
pub const TOPIC_SIZE: usize = 1;
pub const TOPIC_DENSITY: f64 = 0.5;

/// `TOPIC_SIZE` distinct uppercase letters.
pub fn random_topic<R: Rng>(rng: &mut R) -> Vec<u8> {
    let mut letters = VALUES.to_vec();
    for i in 0..TOPIC_SIZE {
        let j = rng.gen_range(i..letters.len());
        letters.swap(i, j);
    }
    letters.truncate(TOPIC_SIZE);
    letters
}

/// `n` tokens of topic text, restarting the filler chain every `seg_len`.
pub fn topic_text<R: Rng>(
    spec: &SyntheticSpec,
    topic: &[u8],
    n: usize,
    density: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut bytes = Vec::with_capacity(n);
    MarkovSource::new(spec.source_seed).extend_topic(
        &mut bytes,
        n,
        spec.seg_len,
        topic,
        density,
        rng,
    );
    Tokenizer.encode_bytes(&bytes)
}

/// Deterministic train/eval assignment by document id.
pub fn is_eval_id(id: &str, eval_fraction: f64) -> bool {
    let h = Sha256::digest(id.as_bytes());
    let x = u64::from_le_bytes(h[..8].try_into().unwrap());
    (x as f64 / u64::MAX as f64) < eval_fraction
}

pub fn split_by_id<T, F: Fn(&T) -> &str>(
    items: Vec<T>,
    eval_fraction: f64,
    id: F,
) -> (Vec<T>, Vec<T>) {
    items
        .into_iter()
        .partition(|t| !is_eval_id(id(t), eval_fraction))
}

fn escape_line(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\n"),
            _ => out.push(b),
        }
    }
    out
}

fn unescape_line(line: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(line.len());
    let mut it = line.iter();
    while let Some(&b) = it.next() {
        if b == b'\\' {
            match it.next() {
                Some(b'n') => out.push(b'\n'),
                Some(&c) => out.push(c),
                None => out.push(b'\\'),
            }
        } else {
            out.push(b);
        }
    }
    out
}

/// Annotation sidecar entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub answers: Vec<usize>,
}

/// Writes one document per line (newlines escaped). Ids are stored in the
/// annotation sidecar when one is given.
pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        f.write_all(&escape_line(&Tokenizer.decode_bytes(&d.tokens)))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_annotations(path: &Path, items: &[SyntheticDoc]) -> Result<()> {
    let ann: Vec<Annotation> = items
        .iter()
        .map(|s| Annotation {
            id: s.doc.id.clone(),
            answers: s.answers.clone(),
        })
        .collect();
    std::fs::write(path, serde_json::to_vec_pretty(&ann)?)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Reads a corpus file, or every regular file of a directory (sorted by
/// name, one document per file). Line documents get ids `{stem}-{line}`.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        return entries
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p)?;
                let id = p.file_name().unwrap().to_string_lossy().into_owned();
                Ok(Document::new(id, Tokenizer.encode_bytes(&bytes)))
            })
            .collect();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".into());
    let bytes = std::fs::read(path)?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            Document::new(
                format!("{stem}-{i}"),
                Tokenizer.encode_bytes(&unescape_line(l)),
            )
        })
        .collect())
}
