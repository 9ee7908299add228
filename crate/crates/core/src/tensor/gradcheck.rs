//! Central finite-difference gradient checking.
//!
//! Used by unit and acceptance tests as an oracle that is independent of the
//! tape's backward rules: it only ever evaluates forward values.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Worst abs error of an input divided by that input's largest gradient
    /// magnitude (infinity-norm relative error).
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f(inputs)` with central differences of step
/// `eps`.
///
/// Non-scalar outputs are projected onto fixed pseudo-random weights; the
/// numeric side accumulates that projection in `f64` so single-precision
/// rounding of the output does not swamp the difference quotient.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let weights = projection(tape.value(out));
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out);
        if y.shape() != weights.shape() {
            return Err(Error::contract("gradient check output changed shape"));
        }
        Ok(y.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };

    let mut report = GradCheckReport { max_abs_err: 0.0, max_rel_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            work[i].data_mut()[j] = hi;
            let up = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // Divide by the step actually taken after f32 rounding.
            let numeric = (up - down) / (hi as f64 - lo as f64);
            let a = grads[j] as f64;
            worst = worst.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            report.checked += 1;
        }
        report.max_abs_err = report.max_abs_err.max(worst);
        report.max_rel_err = report.max_rel_err.max(worst / scale.max(1e-6));
    }
    Ok(report)
}

fn projection(y: &Tensor) -> Tensor {
    if y.is_scalar() {
        return Tensor::new(y.shape(), vec![1.0]).unwrap_or_else(|_| Tensor::scalar(1.0));
    }
    let mut rng = SplitMix64::new(0x6A09_E667);
    Tensor::new(y.shape(), (0..y.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("same shape")
}
