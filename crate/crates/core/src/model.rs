//! The full affinity model and the per-pass [`Session`] that binds
//! parameters into a graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, EncodedSequence, MoleculeTruncation, REP_ID};
use crate::interaction::{self, InteractionConfig};
use crate::params::ParamStore;
use crate::protein::{self, ProteinCnnConfig};
use crate::record::Record;
use crate::transformer::{self, TransformerConfig};
use crate::{Error, Graph, NodeId, Result, Tensor};

/// One forward (and optionally backward) pass over a parameter store.
///
/// Parameters are copied into the graph on first use. A session built with
/// [`training`](Self::training) tracks gradients and applies dropout.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<NodeId>>,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Session<'p> {
    pub fn inference(params: &'p ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            track_grads: false,
            dropout_rng: None,
        }
    }

    /// Gradients on, dropout off.
    pub fn with_grads(params: &'p ParamStore) -> Self {
        Session {
            track_grads: true,
            ..Self::inference(params)
        }
    }

    /// Gradients on, dropout driven by `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Session {
            track_grads: true,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::inference(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
        if let Some(id) = self.bound[i] {
            return Ok(id);
        }
        let id = self.graph.leaf(self.params.by_index(i).1.clone(), self.track_grads);
        self.bound[i] = Some(id);
        Ok(id)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        match &mut self.dropout_rng {
            Some(rng) => self.graph.dropout(x, rate, true, rng),
            None if (0.0..1.0).contains(&rate) => Ok(x),
            None => Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)"))),
        }
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.graph.backward(loss)
    }

    /// `(parameter index, gradient)` for every bound parameter that received one.
    pub fn gradients(&self) -> Vec<(usize, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.and_then(|id| self.graph.grad(id)).map(|g| (i, g)))
            .collect()
    }

    /// Owned copy of [`gradients`](Self::gradients).
    pub fn owned_gradients(&self) -> Vec<(usize, Vec<f64>)> {
        self.gradients().into_iter().map(|(i, g)| (i, g.to_vec())).collect()
    }
}

/// How the molecule representation is pooled from the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepPooling {
    /// `[REP]` is kept at position 0 even for truncated molecules and its
    /// final-layer vector is used.
    #[default]
    KeepRep,
    /// Row 0 when `[REP]` is present, otherwise the mean over real tokens.
    MeanPool,
}

impl RepPooling {
    pub fn as_str(self) -> &'static str {
        match self {
            RepPooling::KeepRep => "keep_rep",
            RepPooling::MeanPool => "mean_pool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "keep_rep" => Ok(RepPooling::KeepRep),
            "mean_pool" => Ok(RepPooling::MeanPool),
            other => Err(Error::Format(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub protein: ProteinCnnConfig,
    pub interaction: InteractionConfig,
    pub rep_pooling: RepPooling,
}

impl ModelConfig {
    pub fn kiba(mol_vocab: usize, prot_vocab: usize) -> Self {
        ModelConfig {
            transformer: TransformerConfig::with_vocab(mol_vocab),
            protein: ProteinCnnConfig::kiba(prot_vocab),
            interaction: InteractionConfig::kiba(),
            rep_pooling: RepPooling::KeepRep,
        }
    }

    pub fn davis(mol_vocab: usize, prot_vocab: usize) -> Self {
        ModelConfig {
            transformer: TransformerConfig::with_vocab(mol_vocab),
            protein: ProteinCnnConfig::davis(prot_vocab),
            interaction: InteractionConfig::davis(),
            rep_pooling: RepPooling::KeepRep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.protein.validate()?;
        self.interaction.validate()?;
        self.codec().validate()
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            mol_max_len: self.transformer.max_len,
            prot_max_len: self.protein.max_len,
            truncation: match self.rep_pooling {
                RepPooling::KeepRep => MoleculeTruncation::KeepRep,
                RepPooling::MeanPool => MoleculeTruncation::MiddleWindow,
            },
        }
    }

    pub fn interaction_input_width(&self) -> usize {
        self.transformer.hidden + self.protein.output_dim()
    }

    pub fn to_record(&self) -> Record {
        let mut rec = Record::new();
        self.transformer.write_record(&mut rec);
        self.protein.write_record(&mut rec);
        self.interaction.write_record(&mut rec);
        rec.set("model.rep_pooling", self.rep_pooling.as_str());
        rec
    }

    pub fn from_record(rec: &Record, base: &ModelConfig) -> Result<Self> {
        let cfg = ModelConfig {
            transformer: TransformerConfig::from_record(rec, &base.transformer)?,
            protein: ProteinCnnConfig::from_record(rec, &base.protein)?,
            interaction: InteractionConfig::from_record(rec, &base.interaction)?,
            rep_pooling: match rec.get("model.rep_pooling") {
                Some(v) => RepPooling::parse(v)?,
                None => base.rep_pooling,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fresh parameters for all three towers.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    transformer::init_encoder(&cfg.transformer, &mut rng, &mut store)?;
    protein::init_protein(&cfg.protein, &mut rng, &mut store)?;
    interaction::init_interaction(&cfg.interaction, cfg.interaction_input_width(), &mut rng, &mut store)?;
    Ok(store)
}

/// `M_rep` for one molecule under the configured pooling.
pub fn molecule_rep(s: &mut Session<'_>, cfg: &ModelConfig, molecule: &EncodedSequence) -> Result<NodeId> {
    let encoded = transformer::encode_real(s, molecule, &cfg.transformer)?.output;
    let rows = s.graph.shape(encoded)[0];
    let has_rep = molecule.ids.first() == Some(&REP_ID);
    match cfg.rep_pooling {
        RepPooling::KeepRep if !has_rep => Err(Error::invalid("molecule encoding has no [REP] token at position 0")),
        RepPooling::MeanPool if !has_rep => transformer::pool_mean(s, encoded, &molecule.mask[..rows]),
        _ => transformer::pool_rep(s, encoded),
    }
}

/// Predicted affinity node (`[1]`) for one molecule/protein pair.
pub fn forward(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    molecule: &EncodedSequence,
    protein_seq: &EncodedSequence,
) -> Result<NodeId> {
    let m_rep = molecule_rep(s, cfg, molecule)?;
    let p_rep = protein::protein_forward(s, protein_seq, &cfg.protein)?;
    interaction::predict_affinity(s, m_rep, p_rep, &cfg.interaction)
}

/// Inference-mode prediction.
pub fn predict(
    params: &ParamStore,
    cfg: &ModelConfig,
    molecule: &EncodedSequence,
    protein_seq: &EncodedSequence,
) -> Result<f64> {
    let mut s = Session::inference(params);
    let y = forward(&mut s, cfg, molecule, protein_seq)?;
    Ok(s.graph.value(y).data()[0])
}

/// Final-layer transformer states for one molecule, inference mode.
pub fn encode_molecule_states(
    params: &ParamStore,
    cfg: &TransformerConfig,
    molecule: &EncodedSequence,
) -> Result<Tensor> {
    let mut s = Session::inference(params);
    let out = transformer::encode(&mut s, molecule, cfg)?.output;
    Ok(s.graph.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_molecule, encode_protein, Vocab, VocabKind};

    #[test]
    fn config_record_round_trip() {
        let mut cfg = ModelConfig::davis(40, 25);
        cfg.rep_pooling = RepPooling::MeanPool;
        let rec = cfg.to_record();
        let back = ModelConfig::from_record(&rec, &ModelConfig::kiba(1, 1)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kiba_defaults() {
        let cfg = ModelConfig::kiba(70, 25);
        assert_eq!(cfg.transformer.num_layers, 8);
        assert_eq!(cfg.transformer.num_heads, 8);
        assert_eq!(cfg.transformer.hidden, 128);
        assert_eq!(cfg.transformer.intermediate, 512);
        assert_eq!(cfg.protein.output_dim(), 96);
        assert_eq!(cfg.interaction_input_width(), 128 + 96);
        assert_eq!(cfg.interaction.dense_sizes, [1024, 1024, 512]);
        assert_eq!(ModelConfig::davis(70, 25).interaction.dense_sizes, [1024, 512]);
    }

    #[test]
    fn mean_pool_handles_truncated_molecules() {
        let mv = Vocab::build(["CNO"], VocabKind::Molecule).unwrap();
        let pv = Vocab::build(["MKT"], VocabKind::Protein).unwrap();
        let cfg = ModelConfig {
            transformer: TransformerConfig {
                num_layers: 1,
                num_heads: 1,
                hidden: 4,
                intermediate: 4,
                dropout: 0.0,
                max_len: 6,
                vocab_size: mv.len(),
            },
            protein: ProteinCnnConfig {
                vocab_size: pv.len(),
                embed_dim: 2,
                filter_lengths: vec![2],
                filter_counts: vec![3],
                max_len: 5,
            },
            interaction: InteractionConfig {
                dense_sizes: vec![4],
                dropout: 0.0,
            },
            rep_pooling: RepPooling::MeanPool,
        };
        let params = init_model(&cfg, 1).unwrap();
        let mol = encode_molecule("CCNNOOC", &mv, &cfg.codec()).unwrap();
        assert!(mol.truncated && mol.ids[0] != REP_ID);
        let prot = encode_protein("MKT", &pv, &cfg.codec()).unwrap();
        assert!(predict(&params, &cfg, &mol, &prot).unwrap().is_finite());

        let keep = ModelConfig {
            rep_pooling: RepPooling::KeepRep,
            ..cfg.clone()
        };
        let mol = encode_molecule("CCNNOOC", &mv, &keep.codec()).unwrap();
        assert_eq!(mol.ids[0], REP_ID);
        assert!(predict(&params, &keep, &mol, &prot).unwrap().is_finite());
    }
}
