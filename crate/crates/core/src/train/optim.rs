//! Adam with bias correction and a linear warmup schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update at learning rate `lr`. `grads` holds `(parameter index,
/// gradient)` pairs; parameters without an entry are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[(usize, Vec<f64>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    for (i, g) in grads {
        if *i >= params.len() {
            return Err(Error::invalid(format!("gradient for unknown parameter {i}")));
        }
        let len = params.by_index(*i).1.len();
        if g.len() != len || state.m[*i].len() != len {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![len],
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, g) in grads {
        let (m, v) = (&mut state.m[*i], &mut state.v[*i]);
        let p = params.tensor_mut(*i).data_mut();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.epsilon);
        }
    }
    Ok(())
}

/// Learning rate at 1-based `step`: linear ramp over `warmup_steps`, then flat.
pub fn warmup_lr(base: f64, step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * step as f64 / warmup_steps as f64
    }
}

/// `ceil(fraction × total)`.
pub fn warmup_steps(total: u64, fraction: f64) -> u64 {
    libm::ceil(total as f64 * fraction) as u64
}
