//! Model checkpoint file.
//!
//! Little-endian layout:
//!
//! | field            | type                 |
//! |------------------|----------------------|
//! | magic            | `b"ACLM"`            |
//! | version          | u16                  |
//! | config length    | u32                  |
//! | config           | JSON `ModelConfig`   |
//! | parameters       | f32, canonical order |
//!
//! Parameter shapes are implied by the config; see [`crate::model::ModelParams`].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ModelParams, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACLM";
pub const VERSION: u16 = 1;

fn header_err(reason: impl Into<String>, dump: &[u8]) -> Error {
    let n = dump.len().min(64);
    Error::Header {
        what: "checkpoint",
        reason: reason.into(),
        dump: format!("{:02x?}", &dump[..n]),
    }
}

pub fn encode<S: Scalar>(model: &ModelState<S>) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(10 + cfg.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for t in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    if bytes.len() < 10 {
        return Err(header_err("truncated header", bytes));
    }
    if &bytes[..4] != MAGIC {
        return Err(header_err("bad magic", bytes));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(header_err(format!("unsupported version {version}"), bytes));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = 10 + len;
    if bytes.len() < body {
        return Err(header_err("config length past end of file", bytes));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[10..body])
        .map_err(|e| header_err(format!("config: {e}"), bytes))?;
    config
        .validate()
        .map_err(|e| header_err(e.to_string(), bytes))?;
    let shapes = param_shapes(&config);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != body + total * 4 {
        return Err(header_err(
            format!(
                "expected {} parameter bytes, found {}",
                total * 4,
                bytes.len() - body
            ),
            bytes,
        ));
    }
    let mut off = body;
    let params: ModelParams<Tensor<S>> = shapes.map(|shape| {
        let n: usize = shape.iter().product();
        let data = bytes[off..off + n * 4]
            .chunks_exact(4)
            .map(|c| S::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        off += n * 4;
        Tensor::new(shape.clone(), data).expect("shape from config")
    });
    ModelState::from_params(config, params)
}

pub fn save<S: Scalar>(model: &ModelState<S>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
