//! Masked-LM example generation, optimisation, pretraining and fine-tuning.

pub mod finetune;
pub mod masking;
pub mod optim;
pub mod pretrain;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Independent seeds derived from one run seed, drawn in field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubSeeds {
    pub init: u64,
    pub batches: u64,
    pub dropout: u64,
}

impl SubSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        SubSeeds {
            init: master.next_u64(),
            batches: master.next_u64(),
            dropout: master.next_u64(),
        }
    }
}

/// `pKd = −log10(kd / 1e9)` for a dissociation constant in nanomolar.
pub fn pkd_transform(kd_nanomolar: f64) -> Result<f64> {
    if !kd_nanomolar.is_finite() || kd_nanomolar <= 0.0 {
        return Err(Error::invalid(alloc::format!("kd must be positive and finite, got {kd_nanomolar}")));
    }
    Ok(9.0 - libm::log10(kd_nanomolar))
}
