//! Run configuration shared by every command. Loaded from JSON (unknown keys
//! rejected, missing keys take defaults), then overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{code_version, config_hash};
use crate::icl::{marker_spec, MarkerRule, TaskSpec};
use crate::model::ModelConfig;
use crate::rerank::RerankMode;
use crate::retrieval::{FusionMode, DEFAULT_OVERLAP_THRESHOLD};
use crate::store::StoreDtype;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Share of documents held out by id when only one corpus is given.
    pub eval_fraction: f64,
    /// Generator settings used when no corpus file is given.
    pub synthetic: SyntheticSpec,
    pub n_docs: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            eval_fraction: 0.1,
            synthetic: SyntheticSpec::default(),
            n_docs: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seg_len: usize,
    pub n_compressed: Vec<usize>,
    /// Positions reported per document by the token-position analysis.
    pub top_k_positions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seg_len: 64,
            n_compressed: vec![0, 1, 2, 3],
            top_k_positions: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub passage_len: usize,
    pub top_k: usize,
    pub fusion: FusionMode,
    /// Order fused summaries by distance to the summary of `x`.
    pub rerank: bool,
    pub dtype: StoreDtype,
    pub overlap_threshold: usize,
    pub rerank_mode: RerankMode,
    pub recall_k: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            passage_len: 64,
            top_k: 5,
            fusion: FusionMode::FusedSummaries,
            rerank: false,
            dtype: StoreDtype::F32,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            rerank_mode: RerankMode::Summary,
            recall_k: vec![1, 5, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IclConfig {
    pub task: TaskSpec,
    /// Demonstration draws.
    pub n_seeds: usize,
    /// Synthetic marker task used when no example files are given.
    pub marker_rule: MarkerRule,
    pub n_pool: usize,
    pub n_eval: usize,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            task: marker_spec(),
            n_seeds: 5,
            marker_rule: MarkerRule::Instance,
            n_pool: 64,
            n_eval: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into `train.seed` on resolution.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub retrieval: RetrievalConfig,
    pub icl: IclConfig,
}

fn bad<T>(field: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field: field.into(),
        reason: reason.into(),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config {
            field: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Aligns derived fields and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.model.validate()?;
        if self.train.compressor.kappa != self.model.kappa {
            return bad(
                "train.compressor.kappa",
                format!(
                    "{} does not match model.kappa {}",
                    self.train.compressor.kappa, self.model.kappa
                ),
            );
        }
        self.train.compressor.validate(self.model.context_window)?;
        self.corpus.synthetic.validate()?;
        if !(0.0..1.0).contains(&self.corpus.eval_fraction) {
            return bad("corpus.eval_fraction", "must be in [0, 1)");
        }
        if self.eval.seg_len < 2 || self.eval.seg_len > self.model.context_window {
            return bad(
                "eval.seg_len",
                format!("must be in [2, {}]", self.model.context_window),
            );
        }
        if self.retrieval.passage_len == 0 || self.retrieval.passage_len > self.model.context_window
        {
            return bad(
                "retrieval.passage_len",
                format!("must be in [1, {}]", self.model.context_window),
            );
        }
        if self.retrieval.top_k == 0 {
            return bad("retrieval.top_k", "must be >= 1");
        }
        self.icl.task.validate()?;
        if self.icl.n_seeds == 0 {
            return bad("icl.n_seeds", "must be >= 1");
        }
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: config_hash(&self.to_json()),
            seed: self.seed,
            code_version: code_version(),
        }
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)?;
        Ok(path)
    }
}

/// Stamp embedded in every output artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}
