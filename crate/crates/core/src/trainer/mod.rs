//! Training objective, optimizer, training loop, checkpoints and file enhancement.

mod checkpoint;
mod data;
mod enhance;
mod loss;
mod normalize;
mod optim;

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatagenError, MixtureRecord};
use crate::dsp::DspError;
use crate::model::{ForwardOptions, Model, ModelConfig, ModelError};
use crate::tensor::{Graph, Tensor4, TensorError};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    chunk_bytes, chunk_pair, features, load_chunks, make_batch, normalize_chunk, ChunkPair, ChunkSource, DiskChunks,
    MemoryChunks,
};
pub use enhance::{enhance_file, enhance_file_with, enhance_waveform, EnhanceReport, OUTPUT_PEAK_LIMIT};
pub use loss::{total_loss, LossBreakdown};
pub use normalize::{FeatureNormalizer, RunningMoments};
pub use optim::{lr_schedule, Adam};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("diverged: non-finite gradient or loss at `{0}`")]
    Diverged(String),
    #[error("variational model produced no latent statistics")]
    MissingLatent,
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Chunk corpora above this size are cached on disk rather than held in memory.
const MEMORY_BUDGET_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience_validations: usize,
    pub warmup_batches: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub validations_per_epoch: usize,
    pub seed: u64,
    pub kl_weight: f64,
    /// Hard cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience_validations: 10,
            warmup_batches: 500,
            peak_lr: 1e-3,
            batch_size: 8,
            validations_per_epoch: 2,
            seed: 0,
            kl_weight: 1e-3,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("max_epochs", self.max_epochs),
            ("patience_validations", self.patience_validations),
            ("warmup_batches", self.warmup_batches),
            ("batch_size", self.batch_size),
            ("validations_per_epoch", self.validations_per_epoch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(TrainError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::InvalidConfig("peak_lr must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(TrainError::InvalidConfig("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One optimizer step; `val_loss` is set on steps followed by a validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub train_loss: f64,
    pub mse: f64,
    pub kl: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub fn history_csv(history: &[HistoryEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in history {
        w.serialize(h)?;
    }
    w.into_inner().map_err(|e| TrainError::Io(e.into_error()))
}

pub fn write_history_csv(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    crate::write_atomic(path, &history_csv(history)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive validations without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Observation {
        self.seen += 1;
        let improved = match self.best {
            Some(b) => val_loss < b,
            None => val_loss.is_finite(),
        };
        if improved {
            self.best = Some(val_loss);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Observation {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn validations(&self) -> usize {
        self.seen
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model plus optimizer state; one call to [`Trainer::train_step`] is one Adam update.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model<f32>,
    cfg: TrainConfig,
    adam: Adam<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params());
        Ok(Self {
            model,
            cfg,
            adam,
            step: 0,
        })
    }

    /// Resume from a checkpoint, including optimizer moments when present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.model()?, ck.train_config.clone())?;
        if !ck.adam_m.is_empty() {
            t.adam.m = ck.adam_m.clone();
            t.adam.v = ck.adam_v.clone();
            t.adam.t = ck.adam_t;
        }
        t.step = ck.step;
        Ok(t)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn train_step(&mut self, noisy: Tensor4<f32>, clean: Tensor4<f32>) -> Result<StepReport> {
        let lr = lr_schedule(self.step, self.cfg.warmup_batches, self.cfg.peak_lr);
        let mut g = Graph::new();
        let x = g.input(noisy);
        let y = g.input(clean);
        let out = self.model.forward(
            &mut g,
            x,
            &ForwardOptions::train(mix_seed(self.cfg.seed, self.step as u64)),
        )?;
        let variational = self.model.config().variational;
        let (loss, breakdown) = total_loss(&mut g, out.y, y, out.latent, self.cfg.kl_weight, variational)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged("loss".into()));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor4<f32>>> = out.param_vars.iter().map(|&v| grads.take(v)).collect();
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.model.update_running_stats(&out.bn_stats);
        let report = StepReport {
            step: self.step,
            loss: breakdown,
            lr,
        };
        self.step += 1;
        Ok(report)
    }

    /// Eval-mode loss on one batch.
    pub fn eval_loss(&self, noisy: Tensor4<f32>, clean: Tensor4<f32>) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let x = g.input(noisy);
        let y = g.input(clean);
        let out = self.model.forward(&mut g, x, &ForwardOptions::eval())?;
        let variational = self.model.config().variational;
        Ok(total_loss(&mut g, out.y, y, out.latent, self.cfg.kl_weight, variational)?.1)
    }

    /// Mean total loss over every chunk of `src`, batch-size weighted.
    pub fn validate(&self, src: &dyn ChunkSource, normalizer: &FeatureNormalizer) -> Result<f64> {
        let idx: Vec<usize> = (0..src.len()).collect();
        let mut sum = 0.0;
        for b in idx.chunks(self.cfg.batch_size) {
            let (x, y) = make_batch(src, b, normalizer)?;
            sum += self.eval_loss(x, y)?.total * b.len() as f64;
        }
        Ok(sum / src.len().max(1) as f64)
    }

    pub fn checkpoint(&self, normalizer: FeatureNormalizer) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.cfg.clone(), normalizer);
        ck.step = self.step;
        ck.adam_t = self.adam.t;
        ck.adam_m = self.adam.m.clone();
        ck.adam_v = self.adam.v.clone();
        ck
    }
}

/// A manifest's records and the directory holding their rendered audio.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub records: &'a [MixtureRecord],
    pub audio_dir: &'a Path,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint (the last one if no validation ran).
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn estimated_chunks(records: &[MixtureRecord], frames_per_chunk: usize) -> usize {
    records
        .iter()
        .map(|r| {
            let frames = (r.duration_s * 16_000.0 / 100.0) as usize + 1;
            frames.div_ceil(frames_per_chunk)
        })
        .sum()
}

fn source_for(
    data: &TrainData<'_>,
    shape: (usize, usize),
    cache: PathBuf,
) -> Result<(Box<dyn ChunkSource>, RunningMoments)> {
    if data.records.is_empty() {
        return Err(TrainError::Data("empty manifest".into()));
    }
    let big = chunk_bytes(estimated_chunks(data.records, shape.1), shape) > MEMORY_BUDGET_BYTES;
    load_chunks(data.records, data.audio_dir, shape, big.then_some(cache.as_path()))
}

/// Full training run. Writes `best.spck`, `last.spck` and `history.csv` to `out_dir`.
///
/// `train_cfg.kl_weight` overrides `model_cfg.kl_weight` so the checkpoint records the
/// weight actually used.
pub fn train(
    train_data: &TrainData<'_>,
    val_data: &TrainData<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.kl_weight = train_cfg.kl_weight;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let shape = (model_cfg.input_shape[1], model_cfg.input_shape[2]);

    let (train_src, moments) = source_for(train_data, shape, out_dir.join("cache/train"))?;
    let normalizer = moments.normalizer();
    let (val_src, _) = source_for(val_data, shape, out_dir.join("cache/val"))?;
    info!(
        "event=normalizer mean={:.6} std={:.6} samples={}",
        normalizer.mean,
        normalizer.std,
        moments.count()
    );

    let model = Model::new(model_cfg, train_cfg.seed)?;
    info!(
        "event=model kind={} params={}",
        model.config().structure(),
        model.count_params()
    );
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let bs = train_cfg.batch_size;
    let steps_per_epoch = train_src.len().div_ceil(bs);
    let val_interval = (steps_per_epoch / train_cfg.validations_per_epoch).max(1);
    let best_path = out_dir.join("best.spck");
    let last_path = out_dir.join("last.spck");
    let history_path = out_dir.join("history.csv");

    let mut history = Vec::new();
    let mut early = EarlyStopping::new(train_cfg.patience_validations);
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut epochs = 0;
    let snapshot = |t: &Trainer, h: &[HistoryEntry], epoch: usize, best_val: Option<f64>| {
        let mut ck = t.checkpoint(normalizer);
        ck.history = h.to_vec();
        ck.epoch = epoch;
        ck.best_val = best_val;
        ck
    };

    'epochs: for epoch in 0..train_cfg.max_epochs {
        epochs = epoch + 1;
        let mut order: Vec<usize> = (0..train_src.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            train_cfg.seed,
            epoch as u64 + 1,
        )));
        for (k, batch) in order.chunks(bs).enumerate() {
            let (x, y) = make_batch(train_src.as_ref(), batch, &normalizer)?;
            let r = trainer.train_step(x, y)?;
            history.push(HistoryEntry {
                step: r.step,
                train_loss: r.loss.total,
                mse: r.loss.mse,
                kl: r.loss.kl,
                val_loss: None,
                lr: r.lr,
            });
            let capped = train_cfg.max_steps.is_some_and(|m| trainer.step() >= m);
            if (k + 1) % val_interval == 0 {
                let v = trainer.validate(val_src.as_ref(), &normalizer)?;
                history.last_mut().expect("just pushed").val_loss = Some(v);
                let obs = early.observe(v);
                info!(
                    "event=validation epoch={epoch} step={} train_loss={:.6} val_loss={v:.6} improved={}",
                    trainer.step(),
                    r.loss.total,
                    obs.improved
                );
                if obs.improved {
                    let ck = snapshot(&trainer, &history, epoch, early.best());
                    ck.save(&best_path)?;
                    best = Some(ck);
                }
                snapshot(&trainer, &history, epoch, early.best()).save(&last_path)?;
                write_history_csv(&history_path, &history)?;
                if obs.stop {
                    info!("event=early_stop validations={}", early.validations());
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if capped {
                info!("event=max_steps step={}", trainer.step());
                break 'epochs;
            }
        }
    }

    let last = snapshot(&trainer, &history, epochs.saturating_sub(1), early.best());
    last.save(&last_path)?;
    write_history_csv(&history_path, &history)?;
    let checkpoint = match best {
        Some(b) => b,
        None => {
            warn!("event=no_validation note=\"best checkpoint is the last state\"");
            last.save(&best_path)?;
            last
        }
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        steps: trainer.step(),
        epochs,
        stopped_early,
        best_path,
        last_path,
    })
}
