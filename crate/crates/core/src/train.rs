//! Training loop with periodic checkpoints and resumption.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::compressor::{train_step, CompressorConfig, Document};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelState};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub compressor: CompressorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            compressor: CompressorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// `(step, loss)` for every completed step.
    pub loss_curve: Vec<(usize, f64)>,
    pub peak_graph_nodes: usize,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    step: usize,
    seed: u64,
}

/// Per-step RNG, derived from `(seed, step)` so a resumed run replays the
/// same document and segmentation draws.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

pub struct Trainer<S: Scalar> {
    pub model: ModelState<S>,
    pub opt: AdamState<S>,
    pub cfg: TrainConfig,
    pub out_dir: Option<PathBuf>,
    pub outcome: TrainOutcome,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ModelState<S>, cfg: TrainConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        if cfg.compressor.kappa != model.config.kappa {
            return Err(Error::Config {
                field: "compressor.kappa".into(),
                reason: format!(
                    "{} does not match the model's kappa {}",
                    cfg.compressor.kappa, model.config.kappa
                ),
            });
        }
        cfg.compressor.validate(model.config.context_window)?;
        let opt = AdamState::new(&model.params);
        Ok(Self {
            model,
            opt,
            cfg,
            out_dir,
            outcome: TrainOutcome::default(),
        })
    }

    /// Picks up model, optimizer and step counter from `out_dir` if a
    /// previous run left them there.
    pub fn resume(&mut self) -> Result<bool> {
        let Some(dir) = &self.out_dir else {
            return Ok(false);
        };
        let state_path = dir.join("train_state.json");
        if !state_path.exists() {
            return Ok(false);
        }
        let st: ResumeState = serde_json::from_slice(&std::fs::read(&state_path)?)?;
        if st.seed != self.cfg.seed {
            return Err(Error::Config {
                field: "seed".into(),
                reason: format!(
                    "resume state has seed {}, config has {}",
                    st.seed, self.cfg.seed
                ),
            });
        }
        self.model = checkpoint::load(&dir.join("model.ckpt"))?;
        let m: ModelState<S> = checkpoint::load(&dir.join("adam_m.ckpt"))?;
        let v: ModelState<S> = checkpoint::load(&dir.join("adam_v.ckpt"))?;
        self.opt = AdamState {
            step: st.step,
            m: m.params,
            v: v.params,
        };
        if let Ok(curve) = read_loss_csv(&dir.join("loss.csv")) {
            self.outcome.loss_curve = curve.into_iter().filter(|(s, _)| *s < st.step).collect();
        }
        Ok(true)
    }

    fn save(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.model, &dir.join("model.ckpt"))?;
        let wrap = |p: &ModelParams<Tensor<S>>| ModelState {
            config: self.model.config.clone(),
            params: p.clone(),
            stats: Default::default(),
        };
        checkpoint::save(&wrap(&self.opt.m), &dir.join("adam_m.ckpt"))?;
        checkpoint::save(&wrap(&self.opt.v), &dir.join("adam_v.ckpt"))?;
        std::fs::write(
            dir.join("train_state.json"),
            serde_json::to_vec(&ResumeState {
                step: self.opt.step,
                seed: self.cfg.seed,
            })?,
        )?;
        write_loss_csv(&dir.join("loss.csv"), &self.outcome.loss_curve)?;
        Ok(())
    }

    /// Runs until `cfg.steps` optimizer steps have been taken. On a
    /// non-finite loss the last checkpoint is left in place and the error is
    /// returned.
    pub fn run(&mut self, docs: &[Document]) -> Result<&TrainOutcome> {
        if docs.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        while self.opt.step < self.cfg.steps {
            let step = self.opt.step;
            let mut rng = step_rng(self.cfg.seed, step);
            let doc = &docs[rng.gen_range(0..docs.len())];
            let rep = train_step(
                &mut self.model,
                doc,
                &self.cfg.compressor,
                &self.cfg.adam,
                &mut self.opt,
                &mut rng,
            )?;
            self.outcome.loss_curve.push((step, rep.loss));
            self.outcome.peak_graph_nodes = self.outcome.peak_graph_nodes.max(rep.peak_graph_nodes);
            if self.cfg.checkpoint_every > 0 && self.opt.step % self.cfg.checkpoint_every == 0 {
                self.save()?;
            }
        }
        self.save()?;
        Ok(&self.outcome)
    }
}

/// Convenience wrapper: fresh model from `seed`, trained on `docs`.
pub fn train<S: Scalar>(
    model: ModelState<S>,
    docs: &[Document],
    cfg: &TrainConfig,
) -> Result<(ModelState<S>, TrainOutcome)> {
    let mut t = Trainer::new(model, cfg.clone(), None)?;
    t.run(docs)?;
    Ok((t.model, t.outcome))
}

pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("bad loss row {l:?}")))?;
            Ok((
                s.parse()
                    .map_err(|_| Error::Invalid(format!("bad step {s:?}")))?,
                v.parse()
                    .map_err(|_| Error::Invalid(format!("bad loss {v:?}")))?,
            ))
        })
        .collect()
}
