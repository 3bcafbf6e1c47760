//! Masked-LM pretraining of the molecule transformer.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::masking::{make_masked_example, MaskedExample, MaskingConfig};
use super::SubSeeds;
use super::optim::{adam_step, warmup_lr, warmup_steps, AdamConfig, AdamState};
use crate::checkpoint::Checkpoint;
use crate::codec::{EncodedSequence, Vocab};
use crate::model::Session;
use crate::params::ParamStore;
use crate::record::Record;
use crate::transformer::{self, TransformerConfig};
use crate::{Error, NodeId, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Steps between observer checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
    pub masking: MaskingConfig,
    pub schedule: MaskSchedule,
}

/// When masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSchedule {
    /// Fresh masks every time a molecule is drawn.
    #[default]
    Dynamic,
    /// One fixed mask per molecule for the whole run.
    Static,
}

impl MaskSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskSchedule::Dynamic => "dynamic",
            MaskSchedule::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(MaskSchedule::Dynamic),
            "static" => Ok(MaskSchedule::Static),
            other => Err(Error::Format(format!("unknown mask schedule {other:?}"))),
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_fraction: 0.01,
            seed: 0,
            checkpoint_interval: 0,
            masking: MaskingConfig::default(),
            schedule: MaskSchedule::Dynamic,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("pretraining needs positive steps and batch size"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup fraction must be in [0, 1]"));
        }
        AdamConfig::with_lr(self.learning_rate).validate()
    }

    pub fn write_record(&self, rec: &mut Record) {
        rec.set("train.steps", self.steps);
        rec.set("train.batch_size", self.batch_size);
        rec.set("train.learning_rate", self.learning_rate);
        rec.set("train.warmup_fraction", self.warmup_fraction);
        rec.set("train.seed", self.seed);
        rec.set("train.checkpoint_interval", self.checkpoint_interval);
        rec.set("train.mask_schedule", self.schedule.as_str());
    }

    pub fn from_record(rec: &Record, base: &PretrainConfig) -> Result<Self> {
        let cfg = PretrainConfig {
            steps: rec.parse_or("train.steps", base.steps)?,
            batch_size: rec.parse_or("train.batch_size", base.batch_size)?,
            learning_rate: rec.parse_or("train.learning_rate", base.learning_rate)?,
            warmup_fraction: rec.parse_or("train.warmup_fraction", base.warmup_fraction)?,
            seed: rec.parse_or("train.seed", base.seed)?,
            checkpoint_interval: rec.parse_or("train.checkpoint_interval", base.checkpoint_interval)?,
            masking: base.masking,
            schedule: match rec.get("train.mask_schedule") {
                Some(v) => MaskSchedule::parse(v)?,
                None => base.schedule,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss and masked-token accuracy of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub learning_rate: f64,
    /// Mean cross-entropy per labeled position.
    pub loss: f64,
    pub correct: usize,
    pub labels: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.labels as f64
    }
}

/// Endless stream of masked batches. The corpus is reshuffled each epoch;
/// under [`MaskSchedule::Dynamic`] every draw re-masks its molecule, under
/// [`MaskSchedule::Static`] each molecule keeps the mask drawn up front.
pub struct MaskedBatches<'a> {
    corpus: &'a [EncodedSequence],
    vocab: &'a Vocab,
    masking: MaskingConfig,
    fixed: Option<Vec<MaskedExample>>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> MaskedBatches<'a> {
    pub fn new(
        corpus: &'a [EncodedSequence],
        vocab: &'a Vocab,
        masking: MaskingConfig,
        schedule: MaskSchedule,
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fixed = match schedule {
            MaskSchedule::Dynamic => None,
            MaskSchedule::Static => Some(
                corpus
                    .iter()
                    .map(|seq| make_masked_example(seq, vocab, &masking, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(MaskedBatches {
            corpus,
            vocab,
            masking,
            fixed,
            order: (0..corpus.len()).collect(),
            cursor: corpus.len(),
            rng,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<MaskedExample>> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            batch.push(match &self.fixed {
                Some(fixed) => fixed[i].clone(),
                None => make_masked_example(&self.corpus[i], self.vocab, &self.masking, &mut self.rng)?,
            });
        }
        Ok(batch)
    }
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy over all labels of `batch` plus the number of
/// labels predicted correctly by argmax.
pub fn masked_lm_loss(s: &mut Session<'_>, cfg: &TransformerConfig, batch: &[MaskedExample]) -> Result<(NodeId, usize, usize)> {
    let mut parts = Vec::with_capacity(batch.len());
    let (mut correct, mut total) = (0, 0);
    for ex in batch {
        let encoded = transformer::encode_real(s, &ex.input, cfg)?.output;
        let logits = transformer::lm_logits(s, encoded)?;
        let targets = ex.targets();
        let values = s.graph.value(logits);
        correct += targets.iter().filter(|&&(p, t)| argmax(values.row(p)) == t).count();
        total += targets.len();
        parts.push(s.graph.cross_entropy_sum(logits, &targets)?);
    }
    if total == 0 {
        return Err(Error::invalid("batch has no masked labels"));
    }
    let sum = s.graph.add_n(&parts)?;
    Ok((sum, correct, total))
}

/// Evaluation of a fixed set of masked examples without dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedAccuracy {
    pub loss: f64,
    pub correct: usize,
    pub labels: usize,
}

impl MaskedAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.labels as f64
    }
}

pub struct Pretrainer {
    cfg: PretrainConfig,
    transformer: TransformerConfig,
    adam: AdamConfig,
    params: ParamStore,
    state: AdamState,
    warmup: u64,
    dropout_seeds: ChaCha8Rng,
}

impl Pretrainer {
    /// Fresh encoder and LM head.
    pub fn new(transformer_cfg: &TransformerConfig, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        transformer_cfg.validate()?;
        let seeds = SubSeeds::from_seed(cfg.seed);
        let mut init = ChaCha8Rng::seed_from_u64(seeds.init);
        let mut params = ParamStore::new();
        transformer::init_encoder(transformer_cfg, &mut init, &mut params)?;
        transformer::init_lm_head(transformer_cfg, &mut init, &mut params)?;
        Ok(Pretrainer {
            cfg: cfg.clone(),
            transformer: transformer_cfg.clone(),
            adam: AdamConfig::with_lr(cfg.learning_rate),
            state: AdamState::new(&params),
            params,
            warmup: warmup_steps(cfg.steps, cfg.warmup_fraction),
            dropout_seeds: ChaCha8Rng::seed_from_u64(seeds.dropout),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn transformer_config(&self) -> &TransformerConfig {
        &self.transformer
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    pub fn train_step(&mut self, batch: &[MaskedExample]) -> Result<StepStats> {
        let step = self.state.step + 1;
        let lr = warmup_lr(self.cfg.learning_rate, step, self.warmup);
        let mut s = Session::training(&self.params, self.dropout_seeds.next_u64());
        let (sum, correct, labels) = masked_lm_loss(&mut s, &self.transformer, batch)?;
        let loss_node = s.graph.scale(sum, 1.0 / labels as f64)?;
        let loss = s.graph.value(loss_node).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "pretraining loss" });
        }
        s.backward(loss_node)?;
        let grads = s.owned_gradients();
        drop(s);
        adam_step(&mut self.params, &grads, &mut self.state, &self.adam, lr)?;
        Ok(StepStats {
            step,
            learning_rate: lr,
            loss,
            correct,
            labels,
        })
    }

    pub fn evaluate(&self, examples: &[MaskedExample]) -> Result<MaskedAccuracy> {
        let mut s = Session::inference(&self.params);
        let (sum, correct, labels) = masked_lm_loss(&mut s, &self.transformer, examples)?;
        Ok(MaskedAccuracy {
            loss: s.graph.value(sum).data()[0] / labels as f64,
            correct,
            labels,
        })
    }

    pub fn checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        let mut config = Record::new();
        self.transformer.write_record(&mut config);
        self.cfg.write_record(&mut config);
        config.set("checkpoint.kind", "pretrain");
        config.set("checkpoint.step", self.state.step);
        Checkpoint {
            config,
            molecule_vocab: Some(vocab.clone()),
            protein_vocab: None,
            params: self.params.clone(),
        }
    }
}

/// Runs `cfg.steps` steps over `corpus`, calling `observer` after each one.
pub fn pretrain<F>(
    corpus: &[EncodedSequence],
    vocab: &Vocab,
    transformer_cfg: &TransformerConfig,
    cfg: &PretrainConfig,
    mut observer: F,
) -> Result<Pretrainer>
where
    F: FnMut(&StepStats, &Pretrainer) -> Result<()>,
{
    if transformer_cfg.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "transformer vocabulary {} vs corpus vocabulary {}",
            transformer_cfg.vocab_size,
            vocab.len()
        )));
    }
    let mut trainer = Pretrainer::new(transformer_cfg, cfg)?;
    let mut batches = MaskedBatches::new(corpus, vocab, cfg.masking, cfg.schedule, SubSeeds::from_seed(cfg.seed).batches)?;
    for _ in 0..cfg.steps {
        let batch = batches.next_batch(cfg.batch_size)?;
        let stats = trainer.train_step(&batch)?;
        observer(&stats, &trainer)?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_molecule, CodecConfig, VocabKind};
    use alloc::vec;

    fn tiny(vocab: &Vocab) -> TransformerConfig {
        TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            hidden: 8,
            intermediate: 16,
            dropout: 0.0,
            max_len: 12,
            vocab_size: vocab.len(),
        }
    }

    fn corpus(smiles: &[&str]) -> (Vocab, Vec<EncodedSequence>) {
        let vocab = Vocab::build(smiles.iter().copied(), VocabKind::Molecule).unwrap();
        let codec = CodecConfig {
            mol_max_len: 12,
            ..CodecConfig::default()
        };
        let seqs = smiles.iter().map(|s| encode_molecule(s, &vocab, &codec).unwrap()).collect();
        (vocab, seqs)
    }

    #[test]
    fn single_molecule_is_memorized() {
        let (vocab, seqs) = corpus(&["CC(=O)NC"]);
        let cfg = PretrainConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 5,
            ..PretrainConfig::default()
        };
        let trainer = pretrain(&seqs, &vocab, &tiny(&vocab), &cfg, |_, _| Ok(())).unwrap();
        let mut batches = MaskedBatches::new(&seqs, &vocab, cfg.masking, MaskSchedule::Dynamic, 99).unwrap();
        let eval = trainer.evaluate(&batches.next_batch(64).unwrap()).unwrap();
        assert_eq!(eval.accuracy(), 1.0, "{eval:?}");
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let smiles = ["CCO", "c1ccccc1", "CN=C=O", "OC(=O)C", "NCCN", "ClCCl", "BrC#N"];
        let (vocab, seqs) = corpus(&smiles);
        let trainer = Pretrainer::new(&tiny(&vocab), &PretrainConfig::default()).unwrap();
        let mut batches = MaskedBatches::new(&seqs, &vocab, MaskingConfig::default(), MaskSchedule::Dynamic, 1).unwrap();
        let eval = trainer.evaluate(&batches.next_batch(400).unwrap()).unwrap();
        let uniform = libm::log(vocab.len() as f64);
        assert!((eval.loss - uniform).abs() < 0.05, "{} vs {uniform}", eval.loss);
    }

    #[test]
    fn runs_are_reproducible() {
        let (vocab, seqs) = corpus(&["CCO", "CN=C=O", "NCCN"]);
        let cfg = PretrainConfig {
            steps: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 11,
            ..PretrainConfig::default()
        };
        let mut tcfg = tiny(&vocab);
        tcfg.dropout = 0.1;
        let mut losses = vec![];
        let a = pretrain(&seqs, &vocab, &tcfg, &cfg, |st, _| {
            losses.push(st.loss);
            Ok(())
        })
        .unwrap();
        let b = pretrain(&seqs, &vocab, &tcfg, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.checkpoint(&vocab).to_bytes(), b.checkpoint(&vocab).to_bytes());
        assert_eq!(losses.len(), 5);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let (vocab, seqs) = corpus(&["CCO"]);
        let mut tcfg = tiny(&vocab);
        tcfg.vocab_size += 1;
        let r = pretrain(&seqs, &vocab, &tcfg, &PretrainConfig::default(), |_, _| Ok(()));
        assert!(matches!(r, Err(Error::ConfigMismatch(_))));
    }
}
