//! Protein tower: embedding, stacked valid 1-D convolutions with ReLU, and
//! max pooling over the sequence axis.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::EncodedSequence;
use crate::model::Session;
use crate::params::{truncated_normal, ParamStore, INIT_STD};
use crate::record::{join, Record};
use crate::{Error, NodeId, Result, Tensor};

pub const PREFIX: &str = "protein.";
pub const TOKEN_EMBEDDING: &str = "protein.token_embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinCnnConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub filter_lengths: Vec<usize>,
    pub filter_counts: Vec<usize>,
    pub max_len: usize,
}

impl ProteinCnnConfig {
    /// Filters of length 12 with 32/64/96 channels, 128-wide embedding.
    pub fn kiba(vocab_size: usize) -> Self {
        ProteinCnnConfig {
            vocab_size,
            embed_dim: 128,
            filter_lengths: alloc::vec![12, 12, 12],
            filter_counts: alloc::vec![32, 64, 96],
            max_len: 1000,
        }
    }

    /// Same as [`kiba`](Self::kiba) with filters of length 8.
    pub fn davis(vocab_size: usize) -> Self {
        ProteinCnnConfig {
            filter_lengths: alloc::vec![8, 8, 8],
            ..Self::kiba(vocab_size)
        }
    }

    /// Width of the pooled representation.
    pub fn output_dim(&self) -> usize {
        self.filter_counts.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_lengths.is_empty() || self.filter_lengths.len() != self.filter_counts.len() {
            return Err(Error::invalid("protein filter lengths and counts must be non-empty and equally long"));
        }
        if self.filter_lengths.iter().chain(&self.filter_counts).any(|&v| v == 0)
            || self.vocab_size == 0
            || self.embed_dim == 0
            || self.max_len == 0
        {
            return Err(Error::invalid("protein CNN sizes must be positive"));
        }
        if self.max_len < receptive_field(self) {
            return Err(Error::invalid(format!(
                "protein max length {} is shorter than the receptive field {}",
                self.max_len,
                receptive_field(self)
            )));
        }
        Ok(())
    }

    pub fn write_record(&self, rec: &mut Record) {
        rec.set("model.prot_vocab_size", self.vocab_size);
        rec.set("model.prot_embed_dim", self.embed_dim);
        rec.set("model.filter_lengths", join(&self.filter_lengths));
        rec.set("model.filter_counts", join(&self.filter_counts));
        rec.set("model.prot_max_len", self.max_len);
    }

    pub fn from_record(rec: &Record, base: &ProteinCnnConfig) -> Result<Self> {
        let cfg = ProteinCnnConfig {
            vocab_size: rec.parse_or("model.prot_vocab_size", base.vocab_size)?,
            embed_dim: rec.parse_or("model.prot_embed_dim", base.embed_dim)?,
            filter_lengths: rec.parse_list("model.filter_lengths")?.unwrap_or_else(|| base.filter_lengths.clone()),
            filter_counts: rec.parse_list("model.filter_counts")?.unwrap_or_else(|| base.filter_counts.clone()),
            max_len: rec.parse_or("model.prot_max_len", base.max_len)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `Σ(s_i − 1) + 1`: how many input positions one final output position sees.
pub fn receptive_field(cfg: &ProteinCnnConfig) -> usize {
    cfg.filter_lengths.iter().map(|s| s.saturating_sub(1)).sum::<usize>() + 1
}

pub fn conv_weight(layer: usize) -> String {
    format!("{PREFIX}conv{layer}.weight")
}

pub fn conv_bias(layer: usize) -> String {
    format!("{PREFIX}conv{layer}.bias")
}

/// Embedding from a truncated normal, filters Glorot-uniform, biases zero.
pub fn init_protein<R: Rng + ?Sized>(cfg: &ProteinCnnConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    store.insert(TOKEN_EMBEDDING, truncated_normal(&[cfg.vocab_size, cfg.embed_dim], INIT_STD, rng))?;
    let mut width = cfg.embed_dim;
    for (layer, (&s, &m)) in cfg.filter_lengths.iter().zip(&cfg.filter_counts).enumerate() {
        store.insert(conv_weight(layer), glorot_uniform(&[s, width, m], s * width, s * m, rng))?;
        store.insert(conv_bias(layer), Tensor::zeros(&[m]))?;
        width = m;
    }
    Ok(())
}

pub(crate) fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}

pub struct ProteinTrace {
    /// Post-activation output of each convolution, `[L_i, m_i]`.
    pub feature_maps: Vec<NodeId>,
    pub pooled: NodeId,
}

/// Full tower with intermediate feature maps exposed.
pub fn protein_tower(s: &mut Session<'_>, seq: &EncodedSequence, cfg: &ProteinCnnConfig) -> Result<ProteinTrace> {
    let required = receptive_field(cfg);
    if seq.len() < required {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            required,
        });
    }
    let table = s.param(TOKEN_EMBEDDING)?;
    let mut x = s.graph.embedding_lookup(table, &seq.ids)?;
    let mut feature_maps = Vec::with_capacity(cfg.filter_lengths.len());
    for layer in 0..cfg.filter_lengths.len() {
        let w = s.param(&conv_weight(layer))?;
        let b = s.param(&conv_bias(layer))?;
        let c = s.graph.conv1d(x, w)?;
        let c = s.graph.add(c, b)?;
        x = s.graph.relu(c)?;
        feature_maps.push(x);
    }
    let pooled = s.graph.max_pool_over_length(x)?;
    Ok(ProteinTrace { feature_maps, pooled })
}

/// Pooled protein representation of width `filter_counts.last()`.
pub fn protein_forward(s: &mut Session<'_>, seq: &EncodedSequence, cfg: &ProteinCnnConfig) -> Result<NodeId> {
    Ok(protein_tower(s, seq, cfg)?.pooled)
}
