//! Persisted summary vectors, one block per passage.
//!
//! Little-endian layout:
//!
//! | field    | type                          |
//! |----------|-------------------------------|
//! | magic    | `b"ACSV"`                     |
//! | version  | u16                           |
//! | dtype    | u8 (0 = f32, 1 = f16)         |
//! | kappa    | u16                           |
//! | d_model  | u32                           |
//! | count    | u64                           |
//! | body     | `count` blocks, id-sorted     |
//!
//! Passage ids live in a JSON sidecar (`<file>.ids.json`) in body order.

use std::path::{Path, PathBuf};

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressor::Document;
use crate::error::{Error, Result};
use crate::eval::pool;
use crate::model::{ModelState, SoftPrompt, SummaryBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACSV";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 2 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreDtype {
    F32,
    F16,
}

impl StoreDtype {
    fn code(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::F16 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 => 2,
        }
    }
}

impl std::str::FromStr for StoreDtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(Self::F32),
            "float16" | "f16" => Ok(Self::F16),
            other => Err(Error::Config {
                field: "dtype".into(),
                reason: format!("unknown store dtype {other:?}"),
            }),
        }
    }
}

/// Summary blocks keyed by passage id, kept sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStore {
    pub kappa: usize,
    pub d_model: usize,
    pub dtype: StoreDtype,
    ids: Vec<String>,
    blocks: Vec<Tensor<f32>>,
}

fn header_err(reason: impl Into<String>, dump: &[u8]) -> Error {
    let n = dump.len().min(HEADER_LEN);
    Error::Header {
        what: "summary store",
        reason: reason.into(),
        dump: format!("{:02x?}", &dump[..n]),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

impl SummaryStore {
    /// Sorts the entries by id; duplicate ids are rejected.
    pub fn new(
        kappa: usize,
        d_model: usize,
        dtype: StoreDtype,
        entries: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid(format!("duplicate passage id {:?}", w[0].0)));
        }
        for (id, t) in &entries {
            if t.shape() != [kappa, d_model] {
                return Err(crate::error::shape_err(
                    "summary store",
                    format!(
                        "block {id:?} has shape {:?}, expected [{kappa}, {d_model}]",
                        t.shape()
                    ),
                ));
            }
        }
        let (ids, blocks) = entries.into_iter().unzip();
        Ok(Self {
            kappa,
            d_model,
            dtype,
            ids,
            blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw(&self, id: &str) -> Option<&Tensor<f32>> {
        self.ids
            .binary_search_by(|p| p.as_str().cmp(id))
            .ok()
            .map(|i| &self.blocks[i])
    }

    pub fn get<S: Scalar>(&self, id: &str) -> Option<SummaryBlock<S>> {
        self.raw(id).map(|t| SummaryBlock {
            vectors: t.cast(),
            source_id: id.to_string(),
        })
    }

    /// Blocks for `ids` in the given order, or the list of missing ids.
    pub fn gather<S: Scalar>(&self, ids: &[&str]) -> Result<Vec<SummaryBlock<S>>> {
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| self.raw(id).is_none())
            .map(|id| id.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingBlocks(missing));
        }
        Ok(ids.iter().map(|id| self.get(id).unwrap()).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let per = self.kappa * self.d_model;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * per * self.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.extend_from_slice(&(self.kappa as u16).to_le_bytes());
        out.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for b in &self.blocks {
            for &v in b.data() {
                match self.dtype {
                    StoreDtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
                    StoreDtype::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], ids: Vec<String>) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(header_err("truncated header", bytes));
        }
        if &bytes[..4] != MAGIC {
            return Err(header_err("bad magic", bytes));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(header_err(format!("unsupported version {version}"), bytes));
        }
        let dtype = match bytes[6] {
            0 => StoreDtype::F32,
            1 => StoreDtype::F16,
            c => return Err(header_err(format!("unknown dtype code {c}"), bytes)),
        };
        let kappa = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let d_model = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
        if kappa == 0 || d_model == 0 {
            return Err(header_err("kappa and d_model must be positive", bytes));
        }
        let per = kappa * d_model;
        let expected = count
            .checked_mul(per * dtype.width())
            .ok_or_else(|| header_err("count overflows", bytes))?;
        if bytes.len() - HEADER_LEN != expected {
            return Err(header_err(
                format!(
                    "expected {expected} body bytes for {count} blocks, found {}",
                    bytes.len() - HEADER_LEN
                ),
                bytes,
            ));
        }
        if ids.len() != count {
            return Err(header_err(
                format!("sidecar lists {} ids for {count} blocks", ids.len()),
                bytes,
            ));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("sidecar ids are not strictly sorted".into()));
        }
        let body = &bytes[HEADER_LEN..];
        let w = dtype.width();
        let blocks = (0..count)
            .map(|i| {
                let chunk = &body[i * per * w..(i + 1) * per * w];
                let data: Vec<f32> = match dtype {
                    StoreDtype::F32 => chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    StoreDtype::F16 => chunk
                        .chunks_exact(2)
                        .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                        .collect(),
                };
                Tensor::new(vec![kappa, d_model], data).expect("block size")
            })
            .collect();
        Ok(Self {
            kappa,
            d_model,
            dtype,
            ids,
            blocks,
        })
    }

    /// Writes the store and its id sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        std::fs::write(sidecar_path(path), serde_json::to_vec(&self.ids)?)?;
        Ok(())
    }
}

pub fn load_store(path: &Path) -> Result<SummaryStore> {
    let bytes = std::fs::read(path)?;
    let ids: Vec<String> = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    SummaryStore::decode(&bytes, ids)
}

/// Compresses every passage with an empty prompt.
pub fn build_store<S: Scalar>(
    model: &ModelState<S>,
    passages: &[Document],
    dtype: StoreDtype,
) -> Result<SummaryStore> {
    let blocks: Vec<Result<(String, Tensor<f32>)>> = pool().install(|| {
        passages
            .par_iter()
            .map(|p| {
                let b = model.summarize(&SoftPrompt::empty(), &p.tokens)?;
                Ok((p.id.clone(), b.vectors.cast::<f32>()))
            })
            .collect()
    });
    let entries = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    SummaryStore::new(model.config.kappa, model.config.d_model, dtype, entries)
}
