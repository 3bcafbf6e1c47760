//! Interaction head: concatenated molecule and protein representations
//! through ReLU dense layers with dropout, then a linear regression output.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::model::Session;
use crate::params::ParamStore;
use crate::protein::glorot_uniform;
use crate::record::{join, Record};
use crate::{Error, NodeId, Result, Tensor};

pub const PREFIX: &str = "interaction.";
pub const OUTPUT_WEIGHT: &str = "interaction.output.weight";
pub const OUTPUT_BIAS: &str = "interaction.output.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionConfig {
    pub dense_sizes: Vec<usize>,
    pub dropout: f64,
}

impl InteractionConfig {
    pub fn kiba() -> Self {
        InteractionConfig {
            dense_sizes: alloc::vec![1024, 1024, 512],
            dropout: 0.1,
        }
    }

    pub fn davis() -> Self {
        InteractionConfig {
            dense_sizes: alloc::vec![1024, 512],
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dense_sizes.is_empty() || self.dense_sizes.contains(&0) {
            return Err(Error::invalid("dense sizes must be non-empty and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dense dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn write_record(&self, rec: &mut Record) {
        rec.set("model.dense_sizes", join(&self.dense_sizes));
        rec.set("model.dense_dropout", self.dropout);
    }

    pub fn from_record(rec: &Record, base: &InteractionConfig) -> Result<Self> {
        let cfg = InteractionConfig {
            dense_sizes: rec.parse_list("model.dense_sizes")?.unwrap_or_else(|| base.dense_sizes.clone()),
            dropout: rec.parse_or("model.dense_dropout", base.dropout)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn dense_weight(layer: usize) -> String {
    format!("{PREFIX}dense{layer}.weight")
}

pub fn dense_bias(layer: usize) -> String {
    format!("{PREFIX}dense{layer}.bias")
}

/// Glorot-uniform weights and zero biases; `input_width` is `D_M + m_last`.
pub fn init_interaction<R: Rng + ?Sized>(
    cfg: &InteractionConfig,
    input_width: usize,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    cfg.validate()?;
    let mut width = input_width;
    for (layer, &size) in cfg.dense_sizes.iter().enumerate() {
        store.insert(dense_weight(layer), glorot_uniform(&[width, size], width, size, rng))?;
        store.insert(dense_bias(layer), Tensor::zeros(&[size]))?;
        width = size;
    }
    store.insert(OUTPUT_WEIGHT, glorot_uniform(&[width, 1], width, 1, rng))?;
    store.insert(OUTPUT_BIAS, Tensor::zeros(&[1]))?;
    Ok(())
}

/// Predicted affinity as a `[1]` tensor.
pub fn predict_affinity(
    s: &mut Session<'_>,
    m_rep: NodeId,
    p_rep: NodeId,
    cfg: &InteractionConfig,
) -> Result<NodeId> {
    let joined = s.graph.concat(&[m_rep, p_rep])?;
    let width = s.graph.shape(joined)[0];
    let mut x = s.graph.reshape(joined, &[1, width])?;
    for layer in 0..cfg.dense_sizes.len() {
        let w = s.param(&dense_weight(layer))?;
        if s.graph.shape(w)[0] != s.graph.shape(x)[1] {
            return Err(Error::ShapeMismatch {
                op: "predict_affinity",
                lhs: s.graph.shape(x).to_vec(),
                rhs: s.graph.shape(w).to_vec(),
            });
        }
        let b = s.param(&dense_bias(layer))?;
        let h = s.graph.matmul(x, w)?;
        let h = s.graph.add(h, b)?;
        let h = s.graph.relu(h)?;
        x = s.dropout(h, cfg.dropout)?;
    }
    let w = s.param(OUTPUT_WEIGHT)?;
    let b = s.param(OUTPUT_BIAS)?;
    let y = s.graph.matmul(x, w)?;
    let y = s.graph.add(y, b)?;
    s.graph.reshape(y, &[1])
}

/// `(1/n) Σ (pred − target)²`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: alloc::vec![pred.len()],
            rhs: alloc::vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of zero values"));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Differentiable MSE over `[1]`-shaped prediction nodes.
pub fn mse_loss_node(s: &mut Session<'_>, preds: &[NodeId], targets: &[f64]) -> Result<NodeId> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: alloc::vec![preds.len()],
            rhs: alloc::vec![targets.len()],
        });
    }
    let stacked = s.graph.concat(preds)?;
    let t = s.graph.constant(Tensor::vector(targets.to_vec())?);
    let diff = s.graph.sub(stacked, t)?;
    let sq = s.graph.mul(diff, diff)?;
    s.graph.reduce_mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0], &[2.0]).unwrap(), 4.0);
        assert_eq!(mse_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn store_for(cfg: &InteractionConfig, width: usize) -> ParamStore {
        let mut store = ParamStore::new();
        init_interaction(cfg, width, &mut ChaCha8Rng::seed_from_u64(1), &mut store).unwrap();
        store
    }

    #[test]
    fn zero_weights_predict_output_bias() {
        let cfg = InteractionConfig {
            dense_sizes: alloc::vec![3],
            dropout: 0.1,
        };
        let mut params = store_for(&cfg, 4);
        for i in 0..params.len() {
            params.tensor_mut(i).data_mut().fill(0.0);
        }
        let predict = |params: &ParamStore| {
            let mut s = Session::inference(params);
            let m = s.graph.constant(Tensor::vector(alloc::vec![0.3, -1.0]).unwrap());
            let p = s.graph.constant(Tensor::vector(alloc::vec![2.0, 0.5]).unwrap());
            let y = predict_affinity(&mut s, m, p, &cfg).unwrap();
            s.graph.value(y).data()[0]
        };
        assert_eq!(predict(&params), 0.0);
        let b = params.position(OUTPUT_BIAS).unwrap();
        params.tensor_mut(b).data_mut()[0] = 1.75;
        assert_eq!(predict(&params), 1.75);
    }

    #[test]
    fn hand_set_two_two_one_network() {
        let cfg = InteractionConfig {
            dense_sizes: alloc::vec![2],
            dropout: 0.0,
        };
        let mut params = store_for(&cfg, 2);
        let set = |params: &mut ParamStore, name: &str, t: Tensor| {
            let i = params.position(name).unwrap();
            *params.tensor_mut(i) = t;
        };
        set(&mut params, &dense_weight(0), Tensor::matrix(&[&[1.0, -1.0], &[2.0, 0.5]]).unwrap());
        set(&mut params, &dense_bias(0), Tensor::vector(alloc::vec![0.5, -3.0]).unwrap());
        set(&mut params, OUTPUT_WEIGHT, Tensor::matrix(&[&[2.0], &[4.0]]).unwrap());
        set(&mut params, OUTPUT_BIAS, Tensor::vector(alloc::vec![0.25]).unwrap());
        let mut s = Session::inference(&params);
        let m = s.graph.constant(Tensor::vector(alloc::vec![1.0]).unwrap());
        let p = s.graph.constant(Tensor::vector(alloc::vec![3.0]).unwrap());
        let y = predict_affinity(&mut s, m, p, &cfg).unwrap();
        // h = relu([1 + 6 + 0.5, -1 + 1.5 - 3]) = [7.5, 0]; y = 15 + 0.25
        assert_eq!(s.graph.value(y).data(), &[15.25]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let cfg = InteractionConfig::davis();
        let params = store_for(&cfg, 10);
        let mut s = Session::inference(&params);
        let m = s.graph.constant(Tensor::zeros(&[3]));
        let p = s.graph.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            predict_affinity(&mut s, m, p, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
