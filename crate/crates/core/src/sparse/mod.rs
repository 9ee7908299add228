//! Sparsifying activations, an ISTA/FISTA sparse-coding solver and the atom
//! orthogonality regulariser.

mod activation;
mod ista;

pub use activation::{shifted_relu, soft_threshold, top_k_rows, ActivationPolicy};
pub use ista::{ista_solve, sparse_code_objective, IstaVariant, SolveReport, SparseCodeProblem};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Entries with magnitude above this count as nonzero.
pub const NONZERO_EPS: f32 = 1e-8;

/// Fraction of entries with `|s| > 1e-8`.
pub fn density(s: &Tensor) -> f64 {
    density_of(s.data())
}

pub fn density_of(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.abs() > NONZERO_EPS).count() as f64 / values.len() as f64
}

/// `Σ_{i≠j} ⟨d_i, d_j⟩²` over the rows of `d` (shape `[M, C]`), recorded on
/// the tape so it can be added to a training loss.
pub fn ortho_penalty(tape: &mut Tape, d: Var) -> Result<Var> {
    tape.value(d).dims2("ortho_penalty")?;
    let dt = tape.transpose(d)?;
    let gram = tape.matmul(d, dt)?;
    let gram_sq = tape.mul(gram, gram)?;
    let total = tape.sum(gram_sq)?;
    let d_sq = tape.mul(d, d)?;
    let norms = tape.sum_axis(d_sq, 1)?;
    let norms_sq = tape.mul(norms, norms)?;
    let diag = tape.sum(norms_sq)?;
    tape.sub(total, diag)
}

/// Plain-value version of [`ortho_penalty`].
pub fn ortho_penalty_value(d: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(d.clone());
    let p = ortho_penalty(&mut tape, v)?;
    Ok(tape.value(p).item())
}
