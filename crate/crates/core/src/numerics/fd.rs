//! Central finite-difference gradient checker.
//!
//! The checker only calls the forward evaluator, so it stays independent of
//! the reverse-mode pass it validates. It runs in `f64`.

use super::graph::{Bindings, ComputationGraph};
use super::tensor::Tensor;
use super::NumericsError;

/// Compare the analytic gradient of `leaf` against central differences with
/// step `h`, returning the max over entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check(
    graph: &ComputationGraph,
    bindings: &Bindings<f64>,
    leaf: &str,
    step: f64,
) -> Result<f64, NumericsError> {
    if step <= 0.0 {
        return Err(NumericsError::InvalidStep(step));
    }
    let base = bindings
        .get(leaf)
        .ok_or_else(|| NumericsError::UnboundLeaf(leaf.to_string()))?
        .clone();
    let analytic = graph
        .gradient(bindings)?
        .get(leaf)
        .cloned()
        .ok_or_else(|| NumericsError::UnboundLeaf(leaf.to_string()))?;

    let mut worst = 0.0f64;
    for idx in 0..base.len() {
        let x = base.values()[idx];
        if x + step == x || x - step == x {
            return Err(NumericsError::StepUnderflow { leaf: leaf.to_string(), step });
        }
        let plus = eval_perturbed(graph, bindings, leaf, &base, idx, x + step)?;
        let minus = eval_perturbed(graph, bindings, leaf, &base, idx, x - step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.values()[idx];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

fn eval_perturbed(
    graph: &ComputationGraph,
    bindings: &Bindings<f64>,
    leaf: &str,
    base: &Tensor<f64>,
    idx: usize,
    value: f64,
) -> Result<f64, NumericsError> {
    let mut values = base.values().to_vec();
    values[idx] = value;
    let perturbed = Tensor::new(base.shape().to_vec(), values)?;
    let mut b = bindings.clone();
    b.bind(leaf, perturbed);
    let out = graph.evaluate(&b)?;
    if out.len() != 1 {
        return Err(NumericsError::NonScalarOutput {
            shape: format!("{:?}", out.shape()),
        });
    }
    Ok(out.values()[0])
}
