use super::{Tape, Tensor, TensorId};
use crate::error::Result;

/// Compare tape gradients of a scalar-valued builder against central finite
/// differences, returning the max relative error over all input coordinates.
///
/// `build` receives a fresh tape plus one leaf per input (in order) and must
/// return the scalar loss node. Relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.data(loss)[0])
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let mut max_rel = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            perturbed[pi].data_mut()[ci] = orig + eps;
            let f_plus = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig - eps;
            let f_minus = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
