//! Proximal-gradient sparse coding: `min_S ½‖X − S·D‖²_F + λ‖S‖₁`.
//!
//! Iterates run in `f64`; the result is returned as an `f32` tensor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IstaVariant {
    #[default]
    Ista,
    /// Nesterov-accelerated, without restarts.
    Fista,
}

#[derive(Debug, Clone)]
pub struct SparseCodeProblem {
    /// `[N, C]`
    pub signal: Tensor,
    /// `[M, C]`, one atom per row.
    pub dictionary: Tensor,
    pub lambda: f32,
    pub max_iters: usize,
    pub tol: f64,
    pub variant: IstaVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    pub lipschitz: f64,
    /// Objective after each iteration (index 0 is the zero initialisation).
    pub objective_history: Vec<f64>,
}

const POWER_ITERS: usize = 20;
const LIPSCHITZ_MARGIN: f64 = 1.1;

struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn from(t: &Tensor) -> Self {
        Self { rows: t.rows(), cols: t.cols(), data: t.data().iter().map(|&x| x as f64).collect() }
    }
}

/// `½‖X − S·D‖² + λ‖S‖₁` evaluated in `f64`.
pub fn sparse_code_objective(signal: &Tensor, dictionary: &Tensor, codes: &Tensor, lambda: f32) -> Result<f64> {
    let (x, d) = (Dense::from(signal), Dense::from(dictionary));
    let s: Vec<f64> = codes.data().iter().map(|&v| v as f64).collect();
    Ok(objective(&x, &d, &s, lambda as f64))
}

fn residual(x: &Dense, d: &Dense, s: &[f64]) -> Vec<f64> {
    let (n, m, c) = (x.rows, d.rows, d.cols);
    let mut r = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..m {
            let sik = s[i * m + k];
            if sik == 0.0 {
                continue;
            }
            for j in 0..c {
                r[i * c + j] += sik * d.data[k * c + j];
            }
        }
        for j in 0..c {
            r[i * c + j] -= x.data[i * c + j];
        }
    }
    r
}

fn objective(x: &Dense, d: &Dense, s: &[f64], lambda: f64) -> f64 {
    let r = residual(x, d, s);
    0.5 * r.iter().map(|v| v * v).sum::<f64>() + lambda * s.iter().map(|v| v.abs()).sum::<f64>()
}

/// Largest eigenvalue of `D·Dᵀ` by power iteration.
fn top_eigenvalue(d: &Dense) -> f64 {
    let (m, c) = (d.rows, d.cols);
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] = (0..c).map(|k| d.data[i * c + k] * d.data[j * c + k]).sum();
        }
    }
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w: Vec<f64> = (0..m).map(|i| (0..m).map(|j| gram[i * m + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w.iter().map(|x| x / norm).collect();
        let gv: Vec<f64> = (0..m).map(|i| (0..m).map(|j| gram[i * m + j] * v[j]).sum()).collect();
        lambda = v.iter().zip(&gv).map(|(a, b)| a * b).sum();
    }
    lambda
}

fn gradient(x: &Dense, d: &Dense, s: &[f64]) -> Vec<f64> {
    // (S·D − X)·Dᵀ
    let (n, m, c) = (x.rows, d.rows, d.cols);
    let r = residual(x, d, s);
    let mut g = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..m {
            g[i * m + k] = (0..c).map(|j| r[i * c + j] * d.data[k * c + j]).sum();
        }
    }
    g
}

fn shrink(v: f64, t: f64) -> f64 {
    let m = v.abs() - t;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// Solves the sparse-coding problem from a zero start.
///
/// Step size is `1/L` with `L` = 1.1 × a 20-step power-iteration estimate of
/// the top eigenvalue of `D·Dᵀ`. Stops when the relative objective change
/// drops below `tol`; otherwise returns the best iterate seen with
/// `converged = false`.
pub fn ista_solve(p: &SparseCodeProblem) -> Result<(Tensor, SolveReport)> {
    let (n, c) = p.signal.dims2("ista_solve")?;
    let (m, dc) = p.dictionary.dims2("ista_solve")?;
    if c != dc {
        return Err(Error::dim("ista_solve", format!("signal has {c} channels, atoms have {dc}")));
    }
    if !(p.lambda > 0.0 && p.lambda.is_finite()) {
        return Err(Error::contract(format!("lambda must be positive, got {}", p.lambda)));
    }
    if p.max_iters == 0 || !(p.tol > 0.0) {
        return Err(Error::contract("max_iters and tol must be positive"));
    }
    if !p.dictionary.is_finite() || !p.signal.is_finite() {
        return Err(Error::Numeric("ista_solve input".into()));
    }
    let x = Dense::from(&p.signal);
    let d = Dense::from(&p.dictionary);
    let lambda = p.lambda as f64;
    let lipschitz = (LIPSCHITZ_MARGIN * top_eigenvalue(&d)).max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;

    let mut s = vec![0.0; n * m];
    let mut y = s.clone();
    let mut t = 1.0f64;
    let mut obj = objective(&x, &d, &s, lambda);
    let mut history = vec![obj];
    let mut best = (obj, s.clone());
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..p.max_iters {
        iterations += 1;
        let base = match p.variant {
            IstaVariant::Ista => &s,
            IstaVariant::Fista => &y,
        };
        let g = gradient(&x, &d, base);
        let next: Vec<f64> = base.iter().zip(&g).map(|(b, g)| shrink(b - step * g, step * lambda)).collect();
        if p.variant == IstaVariant::Fista {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = next.iter().zip(&s).map(|(a, b)| a + beta * (a - b)).collect();
            t = t_next;
        }
        s = next;
        let new_obj = objective(&x, &d, &s, lambda);
        history.push(new_obj);
        if new_obj < best.0 {
            best = (new_obj, s.clone());
        }
        let change = (obj - new_obj).abs() / obj.abs().max(1e-300);
        obj = new_obj;
        if change < p.tol {
            converged = true;
            break;
        }
    }

    let (final_objective, codes) = if converged { (obj, s) } else { best };
    let tensor = Tensor::new(&[n, m], codes.iter().map(|&v| v as f32).collect())?;
    Ok((tensor, SolveReport { iterations, final_objective, converged, lipschitz, objective_history: history }))
}
