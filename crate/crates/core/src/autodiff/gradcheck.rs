//! Double-precision gradient checking against central finite differences.
//!
//! The function under test is rebuilt on a fresh `Graph<f64>` for every
//! evaluation, so the analytic and numeric routes share nothing but the
//! forward definition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::tensor::{Result, Tensor};

pub const FD_EPSILON: f64 = 1e-3;

/// Smaller steps tried when a probe disagrees at `FD_EPSILON`. A relu or max
/// switching branch inside the stencil spoils the difference at large steps
/// only, whereas a wrong backward rule disagrees at every step.
pub const FD_FALLBACK_STEPS: [f64; 2] = [1e-4, 1e-5];

const RETRY_ABOVE: f64 = 1e-6;

/// Element-wise relative error with denominator `max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Uniform random tensors in `[-2, 2]`.
pub fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.gen_range(-2.0..2.0)))
        .collect()
}

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights so
/// that every output element contributes with a distinct coefficient.
fn weighted_sum<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn(&y.shape(), |_| rng.gen_range(-1.0..1.0));
    let w = y.graph().constant(w);
    Ok(y.mul(w)?.sum_all())
}

fn evaluate<F>(inputs: &[Tensor<f64>], seed: u64, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&g, &vars)?;
    Ok(weighted_sum(y, seed)?.item())
}

/// Maximum relative error over every input element.
pub fn check_gradients<F>(shapes: &[Vec<usize>], seed: u64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_gradients_at(random_inputs(shapes, seed), seed, usize::MAX, f)
}

/// Maximum relative error at the given inputs, probing at most
/// `max_per_input` randomly chosen coordinates of each input. Each probe
/// reports its best agreement over `FD_EPSILON` and `FD_FALLBACK_STEPS`.
pub fn check_gradients_at<F>(
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    max_per_input: usize,
    f: F,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&g, &vars)?;
        let loss = weighted_sum(y, seed)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            let x0 = input.data()[i];
            let mut err = f64::INFINITY;
            for eps in std::iter::once(FD_EPSILON).chain(FD_FALLBACK_STEPS) {
                probe[k].data_mut()[i] = x0 + eps;
                let plus = evaluate(&probe, seed, &f)?;
                probe[k].data_mut()[i] = x0 - eps;
                let minus = evaluate(&probe, seed, &f)?;
                probe[k].data_mut()[i] = x0;
                err = err.min(relative_error(analytic[k].data()[i], (plus - minus) / (2.0 * eps)));
                if err <= RETRY_ABOVE {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
