//! Mini-batch training with Adam and a warm-up/cosine schedule.

mod adam;
mod checkpoint;
mod schedule;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, EpochProgress, RngState, CHECKPOINT_FORMAT_VERSION};
pub use schedule::lr_at_step;

use crate::codec::TokenizedPacket;
use crate::model::{batch_gradients, ModelConfig, ModelError, ModelParams};
use crate::schema::PacketSchema;

/// Shuffle RNG stream; stream 0 of the same seed initializes parameters.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in {tensor} at step {step}{}", epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    NonFiniteGradient { tensor: String, step: u64, epoch: Option<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log I/O: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Defaults to 5% of the total step count.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    /// Defaults to `base_lr / 10`.
    #[serde(default)]
    pub min_lr: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// 60 epochs, batch 128 and the size's learning rate.
    pub fn standard(model: ModelConfig, lr: f64) -> Self {
        Self {
            epochs: 60,
            base_lr: lr,
            batch_size: 128,
            warmup_steps: None,
            min_lr: None,
            adam: AdamConfig::default(),
            seed: 0,
            model,
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.steps_per_epoch(dataset_len) * self.epochs as u64
    }

    pub fn warmup_for(&self, total_steps: u64) -> u64 {
        self.warmup_steps.unwrap_or(total_steps * 5 / 100)
    }

    pub fn min_lr_or_default(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr / 10.0)
    }

    pub fn validate(&self, dataset_len: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be a non-negative finite number, got {}", self.base_lr));
        }
        let min_lr = self.min_lr_or_default();
        if !(min_lr >= 0.0 && min_lr <= self.base_lr) {
            return bad(format!("min_lr {min_lr} must lie in [0, base_lr]"));
        }
        let total = self.total_steps(dataset_len);
        if total > 0 && self.warmup_for(total) >= total {
            return bad(format!("warmup_steps {} must be below the total step count {total}", self.warmup_for(total)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Mean training NLL over the epoch's packets.
    pub nll: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub elapsed_secs: f64,
}

impl TrainLogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Appends records as JSON lines.
pub fn append_log(path: impl AsRef<Path>, records: &[TrainLogRecord]) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> std::io::Result<Vec<TrainLogRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

pub type EpochHook<'h> = Box<dyn FnMut(&TrainLogRecord, &ModelParams<f32>) + 'h>;

#[derive(Default)]
pub struct TrainOptions<'h> {
    /// Continue from this checkpoint; its training config must equal ours.
    pub resume: Option<Checkpoint>,
    /// Stop once this many optimizer steps have been applied in total.
    pub stop_after_step: Option<u64>,
    /// Called after every completed epoch.
    pub on_epoch: Option<EpochHook<'h>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng, TrainError> {
    let bad = || TrainError::Checkpoint(CheckpointError::Malformed("invalid rng state".into()));
    let seed: [u8; 32] = hex::decode(&state.seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(bad)?;
    let word_pos: u128 = state.word_pos.parse().map_err(|_| bad())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Trains from scratch with default options.
pub fn train(dataset: &[TokenizedPacket], schema: &PacketSchema, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, schema, cfg, TrainOptions::default())
}

/// Fresh checkpoint holding freshly initialized parameters (step 0).
pub fn initial_checkpoint(schema: &PacketSchema, cfg: &TrainConfig) -> Checkpoint {
    let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        schema: schema.clone(),
        model: cfg.model.clone(),
        train: cfg.clone(),
        step: 0,
        params,
        adam: AdamState::new(&cfg.model),
        rng: rng_state(&shuffle),
        epoch_progress: EpochProgress::default(),
    }
}

pub fn train_with(dataset: &[TokenizedPacket], schema: &PacketSchema, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    cfg.validate(dataset.len())?;
    cfg.model.check_schema(schema)?;
    if let Some(bad) = dataset.iter().find(|tp| tp.len() != cfg.model.seq_len) {
        return Err(ModelError::ShapeMismatch(format!("packet of length {} in a seq_len {} dataset", bad.len(), cfg.model.seq_len)).into());
    }

    let mut ckpt = match opts.resume.take() {
        Some(c) => {
            if &c.train != cfg || &c.schema != schema {
                return Err(TrainError::InvalidConfig("resume checkpoint was produced with a different config or schema".into()));
            }
            c.params.check_shapes(&cfg.model)?;
            c
        }
        None => initial_checkpoint(schema, cfg),
    };

    let n = dataset.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let stop = opts.stop_after_step.unwrap_or(total).min(total);
    let started = Instant::now();

    // `epoch_rng` is the shuffle state before the current epoch's shuffle.
    let mut epoch_rng = restore_rng(&ckpt.rng)?;
    let mut rng = epoch_rng.clone();
    let mut perm: Vec<usize> = Vec::new();
    let mut current_epoch = None;
    let mut progress = ckpt.epoch_progress;
    let mut log = Vec::new();

    while ckpt.step < stop {
        let epoch = (ckpt.step / spe) as usize;
        if current_epoch != Some(epoch) {
            if current_epoch.is_some() {
                epoch_rng = rng.clone();
            }
            perm = (0..n).collect();
            perm.shuffle(&mut rng);
            current_epoch = Some(epoch);
        }
        let b = (ckpt.step % spe) as usize;
        let batch: Vec<&TokenizedPacket> = perm[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)].iter().map(|&i| &dataset[i]).collect();
        let g = batch_gradients(&batch, &ckpt.params, &cfg.model)?;
        let lr = lr_at_step(ckpt.step + 1, cfg, total);
        adam_step(&mut ckpt.params, &g.grads, &mut ckpt.adam, ckpt.step + 1, lr, &cfg.adam).map_err(|e| match e {
            TrainError::NonFiniteGradient { tensor, step, .. } => TrainError::NonFiniteGradient {
                tensor,
                step,
                epoch: Some(epoch + 1),
            },
            other => other,
        })?;
        ckpt.step += 1;
        progress.loss_sum += g.loss as f64 * batch.len() as f64;
        progress.samples += batch.len() as u64;

        if ckpt.step % spe == 0 {
            let record = TrainLogRecord {
                epoch: epoch + 1,
                step: ckpt.step,
                nll: progress.loss_sum / progress.samples as f64,
                lr,
                elapsed_secs: started.elapsed().as_secs_f64(),
            };
            if let Some(hook) = opts.on_epoch.as_mut() {
                hook(&record, &ckpt.params);
            }
            log.push(record);
            progress = EpochProgress::default();
        }
    }

    // At an epoch boundary the next epoch has not shuffled yet.
    ckpt.rng = if ckpt.step % spe == 0 && current_epoch.is_some() {
        rng_state(&rng)
    } else {
        rng_state(&epoch_rng)
    };
    ckpt.epoch_progress = progress;
    Ok(TrainOutcome { checkpoint: ckpt, log })
}
