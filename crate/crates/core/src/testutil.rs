//! Finite-difference gradient oracle shared by unit tests.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, NodeId, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &ids).unwrap();
    g.value(loss).item().unwrap()
}

/// Relative error with a floor that keeps near-zero gradients from
/// amplifying finite-difference rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

pub fn assert_gradients_match<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids).unwrap();
    g.backward(loss).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let zeros = alloc::vec![0.0; inputs[k].len()];
        let analytic = g.grad(*id).map(|s| s.to_vec()).unwrap_or(zeros);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (evaluate(&plus, &build) - evaluate(&minus, &build)) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            assert!(
                err < FD_REL_TOL,
                "input {k} element {i}: analytic {} vs numeric {numeric} (rel err {err})",
                analytic[i]
            );
        }
    }
}
