//! Molecule transformer: token and positional embeddings, post-norm
//! multi-head self-attention blocks, the masked-LM head, and `[REP]` pooling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::EncodedSequence;
use crate::model::Session;
use crate::params::{truncated_normal, ParamStore, INIT_STD};
use crate::record::Record;
use crate::{Error, NodeId, Result, Tensor};

pub const PREFIX: &str = "transformer.";
pub const LM_HEAD_WEIGHT: &str = "lm_head.weight";
pub const LM_HEAD_BIAS: &str = "lm_head.bias";
pub const TOKEN_EMBEDDING: &str = "transformer.token_embedding";
pub const POSITION_EMBEDDING: &str = "transformer.position_embedding";

const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TransformerConfig {
    /// 8 layers, 8 heads, hidden 128, intermediate 512, dropout 0.1, length 100.
    pub fn with_vocab(vocab_size: usize) -> Self {
        TransformerConfig {
            num_layers: 8,
            num_heads: 8,
            hidden: 128,
            intermediate: 512,
            dropout: 0.1,
            max_len: 100,
            vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden == 0 || self.intermediate == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("transformer sizes must be positive"));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("transformer dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn write_record(&self, rec: &mut Record) {
        rec.set("model.layers", self.num_layers);
        rec.set("model.heads", self.num_heads);
        rec.set("model.hidden", self.hidden);
        rec.set("model.intermediate", self.intermediate);
        rec.set("model.dropout", self.dropout);
        rec.set("model.mol_max_len", self.max_len);
        rec.set("model.mol_vocab_size", self.vocab_size);
    }

    /// Reads `model.*` keys, falling back to `base` for absent ones.
    pub fn from_record(rec: &Record, base: &TransformerConfig) -> Result<Self> {
        let cfg = TransformerConfig {
            num_layers: rec.parse_or("model.layers", base.num_layers)?,
            num_heads: rec.parse_or("model.heads", base.num_heads)?,
            hidden: rec.parse_or("model.hidden", base.hidden)?,
            intermediate: rec.parse_or("model.intermediate", base.intermediate)?,
            dropout: rec.parse_or("model.dropout", base.dropout)?,
            max_len: rec.parse_or("model.mol_max_len", base.max_len)?,
            vocab_size: rec.parse_or("model.mol_vocab_size", base.vocab_size)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn layer_param(layer: usize, part: &str) -> String {
    format!("{PREFIX}layer{layer}.{part}")
}

const LAYER_PARTS: [&str; 16] = [
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "output.weight",
    "output.bias",
    "attn_norm.gain",
    "attn_norm.bias",
    "ffn_in.weight",
    "ffn_in.bias",
    "ffn_out.weight",
    "ffn_out.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
];

fn part_shape(cfg: &TransformerConfig, part: &str) -> Vec<usize> {
    let (d, i) = (cfg.hidden, cfg.intermediate);
    match part {
        "ffn_in.weight" => alloc::vec![d, i],
        "ffn_in.bias" => alloc::vec![i],
        "ffn_out.weight" => alloc::vec![i, d],
        p if p.ends_with(".weight") => alloc::vec![d, d],
        _ => alloc::vec![d],
    }
}

/// Adds encoder parameters: weights from a ±2σ truncated normal (σ = 0.02),
/// biases zero, normalization gains one.
pub fn init_encoder<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    store.insert(TOKEN_EMBEDDING, truncated_normal(&[cfg.vocab_size, cfg.hidden], INIT_STD, rng))?;
    store.insert(POSITION_EMBEDDING, truncated_normal(&[cfg.max_len, cfg.hidden], INIT_STD, rng))?;
    for layer in 0..cfg.num_layers {
        for part in LAYER_PARTS {
            let shape = part_shape(cfg, part);
            let tensor = if part.ends_with(".weight") {
                truncated_normal(&shape, INIT_STD, rng)
            } else if part.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(layer_param(layer, part), tensor)?;
        }
    }
    Ok(())
}

/// Adds the masked-LM projection `[hidden, vocab]` and its bias.
pub fn init_lm_head<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    store.insert(LM_HEAD_WEIGHT, truncated_normal(&[cfg.hidden, cfg.vocab_size], INIT_STD, rng))?;
    store.insert(LM_HEAD_BIAS, Tensor::zeros(&[cfg.vocab_size]))?;
    Ok(())
}

/// `x_i = MTE[id_i] + PE[i]` for every position, padding included.
pub fn embed(s: &mut Session<'_>, seq: &EncodedSequence, cfg: &TransformerConfig) -> Result<NodeId> {
    if seq.len() != cfg.max_len {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: alloc::vec![seq.len()],
            rhs: alloc::vec![cfg.max_len],
        });
    }
    let mte = s.param(TOKEN_EMBEDDING)?;
    let pe = s.param(POSITION_EMBEDDING)?;
    let tokens = s.graph.embedding_lookup(mte, &seq.ids)?;
    s.graph.add(tokens, pe)
}

fn linear(s: &mut Session<'_>, x: NodeId, weight: &str, bias: &str) -> Result<NodeId> {
    let w = s.param(weight)?;
    let b = s.param(bias)?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add(y, b)
}

pub struct BlockOutput {
    pub output: NodeId,
    /// Attention probabilities `[L, L]`, one per head.
    pub attention: Vec<NodeId>,
}

/// One post-norm encoder block.
///
/// Per head `softmax(Q_h K_hᵀ / √d_k)·V_h` with padded keys masked out,
/// heads concatenated and projected, then residual + layer norm, then a
/// GELU feed-forward with its own residual + layer norm.
pub fn attention_block(
    s: &mut Session<'_>,
    x: NodeId,
    key_mask: &[bool],
    layer: usize,
    cfg: &TransformerConfig,
) -> Result<BlockOutput> {
    let p = |part: &str| layer_param(layer, part);
    let q = linear(s, x, &p("query.weight"), &p("query.bias"))?;
    let k = linear(s, x, &p("key.weight"), &p("key.bias"))?;
    let v = linear(s, x, &p("value.weight"), &p("value.bias"))?;

    let dk = cfg.head_dim();
    let inv_sqrt_dk = 1.0 / libm::sqrt(dk as f64);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut attention = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = s.graph.slice_cols(q, h * dk, dk)?;
        let kh = s.graph.slice_cols(k, h * dk, dk)?;
        let vh = s.graph.slice_cols(v, h * dk, dk)?;
        let kt = s.graph.transpose(kh)?;
        let scores = s.graph.matmul(qh, kt)?;
        let scores = s.graph.scale(scores, inv_sqrt_dk)?;
        let probs = s.graph.softmax_rows(scores, Some(key_mask))?;
        attention.push(probs);
        heads.push(s.graph.matmul(probs, vh)?);
    }
    let z = s.graph.concat(&heads)?;
    let projected = linear(s, z, &p("output.weight"), &p("output.bias"))?;
    let projected = s.dropout(projected, cfg.dropout)?;
    let residual = s.graph.add(x, projected)?;
    let (g, b) = (s.param(&p("attn_norm.gain"))?, s.param(&p("attn_norm.bias"))?);
    let attended = s.graph.layer_norm(residual, g, b, LAYER_NORM_EPS)?;

    let hidden = linear(s, attended, &p("ffn_in.weight"), &p("ffn_in.bias"))?;
    let hidden = s.graph.gelu(hidden)?;
    let ff = linear(s, hidden, &p("ffn_out.weight"), &p("ffn_out.bias"))?;
    let ff = s.dropout(ff, cfg.dropout)?;
    let residual = s.graph.add(attended, ff)?;
    let (g, b) = (s.param(&p("ffn_norm.gain"))?, s.param(&p("ffn_norm.bias"))?);
    let output = s.graph.layer_norm(residual, g, b, LAYER_NORM_EPS)?;
    Ok(BlockOutput { output, attention })
}

pub struct Encoded {
    /// `[rows, hidden]` final-layer states.
    pub output: NodeId,
    /// Per layer, per head attention probabilities.
    pub attention: Vec<Vec<NodeId>>,
}

/// Embedding followed by `num_layers` attention blocks.
pub fn encode(s: &mut Session<'_>, seq: &EncodedSequence, cfg: &TransformerConfig) -> Result<Encoded> {
    let x = embed(s, seq, cfg)?;
    blocks(s, x, &seq.mask, cfg)
}

/// Like [`encode`] but only over the real (non-padding) prefix, giving
/// `[real_len, hidden]`. Rows are bit-identical to the matching rows of
/// [`encode`] since padded keys carry exactly zero attention.
pub fn encode_real(s: &mut Session<'_>, seq: &EncodedSequence, cfg: &TransformerConfig) -> Result<Encoded> {
    let n = seq.real_len();
    if seq.len() != cfg.max_len || n == 0 || seq.mask[..n].contains(&false) {
        return encode(s, seq, cfg);
    }
    let mte = s.param(TOKEN_EMBEDDING)?;
    let pe = s.param(POSITION_EMBEDDING)?;
    let positions: Vec<usize> = (0..n).collect();
    let tokens = s.graph.embedding_lookup(mte, &seq.ids[..n])?;
    let pos = s.graph.embedding_lookup(pe, &positions)?;
    let x = s.graph.add(tokens, pos)?;
    blocks(s, x, &seq.mask[..n], cfg)
}

fn blocks(s: &mut Session<'_>, mut x: NodeId, mask: &[bool], cfg: &TransformerConfig) -> Result<Encoded> {
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let block = attention_block(s, x, mask, layer, cfg)?;
        x = block.output;
        attention.push(block.attention);
    }
    Ok(Encoded { output: x, attention })
}

/// Final-layer vector at position 0, where `[REP]` sits.
pub fn pool_rep(s: &mut Session<'_>, encoded: NodeId) -> Result<NodeId> {
    s.graph.select_row(encoded, 0)
}

/// Mean of the final-layer vectors over unmasked positions.
pub fn pool_mean(s: &mut Session<'_>, encoded: NodeId, mask: &[bool]) -> Result<NodeId> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::invalid("mean pooling over an empty sequence"));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
    let w = s.graph.constant(Tensor::new(alloc::vec![1, mask.len()], weights)?);
    let pooled = s.graph.matmul(w, encoded)?;
    let width = s.graph.shape(pooled)[1];
    s.graph.reshape(pooled, &[width])
}

/// Per-position vocabulary logits `[max_len, vocab]`.
pub fn lm_logits(s: &mut Session<'_>, encoded: NodeId) -> Result<NodeId> {
    linear(s, encoded, LM_HEAD_WEIGHT, LM_HEAD_BIAS)
}
