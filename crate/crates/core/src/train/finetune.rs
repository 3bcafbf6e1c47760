//! Affinity regression on (molecule, protein, affinity) triples with an
//! optional pretrained transformer.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, warmup_lr, warmup_steps, AdamConfig, AdamState};
use super::SubSeeds;
use crate::checkpoint::Checkpoint;
use crate::codec::{EncodedSequence, Vocab};
use crate::interaction::mse_loss_node;
use crate::model::{self, ModelConfig, Session};
use crate::params::ParamStore;
use crate::record::Record;
use crate::transformer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: u64,
    /// Stops early once this many optimizer steps have run; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            max_steps: 0,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_fraction: 0.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("fine-tuning needs positive epochs and batch size"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup fraction must be in [0, 1]"));
        }
        AdamConfig::with_lr(self.learning_rate).validate()
    }

    pub fn write_record(&self, rec: &mut Record) {
        rec.set("train.epochs", self.epochs);
        rec.set("train.max_steps", self.max_steps);
        rec.set("train.batch_size", self.batch_size);
        rec.set("train.learning_rate", self.learning_rate);
        rec.set("train.warmup_fraction", self.warmup_fraction);
        rec.set("train.seed", self.seed);
    }

    pub fn from_record(rec: &Record, base: &FinetuneConfig) -> Result<Self> {
        let cfg = FinetuneConfig {
            epochs: rec.parse_or("train.epochs", base.epochs)?,
            max_steps: rec.parse_or("train.max_steps", base.max_steps)?,
            batch_size: rec.parse_or("train.batch_size", base.batch_size)?,
            learning_rate: rec.parse_or("train.learning_rate", base.learning_rate)?,
            warmup_fraction: rec.parse_or("train.warmup_fraction", base.warmup_fraction)?,
            seed: rec.parse_or("train.seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn total_steps(&self, train_len: usize) -> u64 {
        let per_epoch = train_len.div_ceil(self.batch_size) as u64;
        let all = per_epoch * self.epochs;
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub molecule: EncodedSequence,
    pub protein: EncodedSequence,
    pub affinity: f64,
}

/// Architecture keys a warm-start checkpoint must agree on.
const TRANSFORMER_KEYS: [&str; 6] = [
    "model.layers",
    "model.heads",
    "model.hidden",
    "model.intermediate",
    "model.mol_max_len",
    "model.mol_vocab_size",
];

/// Errors unless `ckpt` carries the same transformer architecture as `cfg`.
pub fn check_warm_start(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<()> {
    let mut ours = Record::new();
    cfg.transformer.write_record(&mut ours);
    for key in TRANSFORMER_KEYS {
        let theirs = ckpt.config.get(key);
        if theirs != ours.get(key) {
            return Err(Error::ConfigMismatch(format!(
                "{key}: model has {}, checkpoint has {}",
                ours.get(key).unwrap_or("nothing"),
                theirs.unwrap_or("nothing")
            )));
        }
    }
    Ok(())
}

/// Per-epoch progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub steps: u64,
    /// Mean of the batch losses seen this epoch.
    pub train_loss: f64,
    pub dev_mse: Option<f64>,
}

pub struct Finetuner {
    model: ModelConfig,
    cfg: FinetuneConfig,
    adam: AdamConfig,
    params: ParamStore,
    state: AdamState,
    warmup: u64,
    order_rng: ChaCha8Rng,
    dropout_seeds: ChaCha8Rng,
}

impl Finetuner {
    /// Fresh towers; with `warm_start` the transformer parameters are copied
    /// from the checkpoint.
    pub fn new(model_cfg: &ModelConfig, cfg: &FinetuneConfig, train_len: usize, warm_start: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let seeds = SubSeeds::from_seed(cfg.seed);
        let mut params = model::init_model(model_cfg, seeds.init)?;
        if let Some(ckpt) = warm_start {
            check_warm_start(model_cfg, ckpt)?;
            params.copy_prefix_from(&ckpt.params, transformer::PREFIX)?;
        }
        Ok(Finetuner {
            model: model_cfg.clone(),
            cfg: cfg.clone(),
            adam: AdamConfig::with_lr(cfg.learning_rate),
            state: AdamState::new(&params),
            params,
            warmup: warmup_steps(cfg.total_steps(train_len), cfg.warmup_fraction),
            order_rng: ChaCha8Rng::seed_from_u64(seeds.batches),
            dropout_seeds: ChaCha8Rng::seed_from_u64(seeds.dropout),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    /// One Adam step on the batch MSE; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&EncodedPair]) -> Result<f64> {
        let step = self.state.step + 1;
        let lr = warmup_lr(self.cfg.learning_rate, step, self.warmup);
        let mut s = Session::training(&self.params, self.dropout_seeds.next_u64());
        let mut preds = Vec::with_capacity(batch.len());
        for pair in batch {
            preds.push(model::forward(&mut s, &self.model, &pair.molecule, &pair.protein)?);
        }
        let targets: Vec<f64> = batch.iter().map(|p| p.affinity).collect();
        let loss_node = mse_loss_node(&mut s, &preds, &targets)?;
        let loss = s.graph.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "fine-tuning loss" });
        }
        s.backward(loss_node)?;
        let grads = s.owned_gradients();
        drop(s);
        adam_step(&mut self.params, &grads, &mut self.state, &self.adam, lr)?;
        Ok(loss)
    }

    pub fn predict(&self, pair: &EncodedPair) -> Result<f64> {
        model::predict(&self.params, &self.model, &pair.molecule, &pair.protein)
    }

    /// Inference-mode MSE over `pairs`.
    pub fn mse(&self, pairs: &[EncodedPair]) -> Result<f64> {
        mean_squared_error(&self.params, &self.model, pairs)
    }

    /// A shuffled epoch ordering.
    fn epoch_order(&mut self, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.order_rng);
        order
    }
}

pub fn mean_squared_error(params: &ParamStore, cfg: &ModelConfig, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("mse of zero pairs"));
    }
    let mut total = 0.0;
    for p in pairs {
        let d = model::predict(params, cfg, &p.molecule, &p.protein)? - p.affinity;
        total += d * d;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters with the lowest dev MSE, or the final ones without a dev set.
    pub best_params: ParamStore,
    pub best_epoch: u64,
    pub best_dev_mse: Option<f64>,
    pub final_params: ParamStore,
    pub history: Vec<EpochStats>,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, model_cfg: &ModelConfig, cfg: &FinetuneConfig, molecule_vocab: &Vocab, protein_vocab: &Vocab) -> Checkpoint {
        let mut config = model_cfg.to_record();
        cfg.write_record(&mut config);
        config.set("checkpoint.kind", "finetune");
        config.set("checkpoint.epoch", self.best_epoch);
        if let Some(mse) = self.best_dev_mse {
            config.set("checkpoint.dev_mse", mse.to_string());
        }
        Checkpoint {
            config,
            molecule_vocab: Some(molecule_vocab.clone()),
            protein_vocab: Some(protein_vocab.clone()),
            params: self.best_params.clone(),
        }
    }
}

/// Trains for `cfg.epochs` epochs (or `cfg.max_steps` steps), evaluating
/// `dev` after each epoch and keeping the best parameters.
pub fn finetune<F>(
    train: &[EncodedPair],
    dev: &[EncodedPair],
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    warm_start: Option<&Checkpoint>,
    mut observer: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&EpochStats, &Finetuner) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut tuner = Finetuner::new(model_cfg, cfg, train.len(), warm_start)?;
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut history = Vec::new();
    'epochs: for epoch in 1..=cfg.epochs {
        let order = tuner.epoch_order(train.len());
        let (mut loss_sum, mut batches) = (0.0, 0u64);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += tuner.train_step(&batch)?;
            batches += 1;
            if cfg.max_steps > 0 && tuner.steps_done() >= cfg.max_steps {
                break;
            }
        }
        let dev_mse = if dev.is_empty() { None } else { Some(tuner.mse(dev)?) };
        let stats = EpochStats {
            epoch,
            steps: tuner.steps_done(),
            train_loss: loss_sum / batches as f64,
            dev_mse,
        };
        observer(&stats, &tuner)?;
        history.push(stats);
        if let Some(mse) = dev_mse {
            if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
                best = Some((mse, epoch, tuner.params.clone()));
            }
        }
        if cfg.max_steps > 0 && tuner.steps_done() >= cfg.max_steps {
            break 'epochs;
        }
    }
    let last_epoch = history.last().map_or(0, |h| h.epoch);
    let final_params = tuner.params;
    let (best_dev_mse, best_epoch, best_params) = match best {
        Some((mse, epoch, params)) => (Some(mse), epoch, params),
        None => (None, last_epoch, final_params.clone()),
    };
    Ok(FinetuneOutcome {
        best_params,
        best_epoch,
        best_dev_mse,
        final_params,
        history,
    })
}
