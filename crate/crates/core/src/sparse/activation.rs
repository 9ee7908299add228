use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{soft_threshold_scalar, top_k_mask};
use crate::tensor::{Tape, Tensor, Var};

/// The sparsifying nonlinearity `σ_λ` applied to adapter coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationPolicy {
    /// `sign(x)·max(|x| − λ, 0)`
    SoftThreshold { lambda: f32 },
    /// `max(x − λ, 0)`
    ShiftedRelu { lambda: f32 },
    /// Keep the `k` largest-magnitude coefficients per token.
    TopK { k: usize },
}

impl Default for ActivationPolicy {
    fn default() -> Self {
        ActivationPolicy::SoftThreshold { lambda: 0.1 }
    }
}

impl ActivationPolicy {
    pub fn validate(&self, atoms: usize) -> Result<()> {
        match *self {
            ActivationPolicy::SoftThreshold { lambda } | ActivationPolicy::ShiftedRelu { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::contract(format!("lambda must be nonnegative, got {lambda}")));
                }
            }
            ActivationPolicy::TopK { k } => {
                if k == 0 || k > atoms {
                    return Err(Error::contract(format!("top-k needs 1 <= k <= {atoms}, got {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ActivationPolicy::SoftThreshold { .. } => "soft_threshold",
            ActivationPolicy::ShiftedRelu { .. } => "shifted_relu",
            ActivationPolicy::TopK { .. } => "top_k",
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            ActivationPolicy::SoftThreshold { lambda } => tape.soft_threshold(x, lambda),
            ActivationPolicy::ShiftedRelu { lambda } => tape.shifted_relu(x, lambda),
            ActivationPolicy::TopK { k } => tape.top_k(x, k),
        }
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            ActivationPolicy::SoftThreshold { lambda } => soft_threshold(x, lambda),
            ActivationPolicy::ShiftedRelu { lambda } => shifted_relu(x, lambda),
            ActivationPolicy::TopK { k } => top_k_rows(x, k),
        }
    }
}

fn check_lambda(lambda: f32) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("lambda must be nonnegative, got {lambda}")))
    }
}

/// Proximal operator of `λ‖·‖₁`.
pub fn soft_threshold(x: &Tensor, lambda: f32) -> Result<Tensor> {
    check_lambda(lambda)?;
    Ok(x.map(|v| soft_threshold_scalar(v, lambda)))
}

pub fn shifted_relu(x: &Tensor, lambda: f32) -> Result<Tensor> {
    check_lambda(lambda)?;
    Ok(x.map(|v| (v - lambda).max(0.0)))
}

/// Keeps the `k` largest-magnitude entries of each row (ties to the lower
/// column index) and zeroes the rest.
pub fn top_k_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let mask = top_k_mask(x.data(), x.last_dim(), k)?;
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::sparse::density;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn v(xs: &[f32]) -> Tensor {
        Tensor::new(&[xs.len()], xs.to_vec()).unwrap()
    }

    fn close(a: &Tensor, b: &[f32]) -> bool {
        a.data().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn soft_threshold_examples() {
        assert!(close(&soft_threshold(&v(&[2.0, -0.5, 0.1]), 0.3).unwrap(), &[1.7, -0.2, 0.0]));
        let x = v(&[0.3, -1.2, 5.0]);
        assert_eq!(soft_threshold(&x, 0.0).unwrap(), x);
        assert_eq!(soft_threshold(&v(&[0.2, -0.3, 0.0]), 0.3).unwrap().max_abs(), 0.0);
        assert!(matches!(soft_threshold(&x, -0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn shifted_relu_examples() {
        assert!(close(&shifted_relu(&v(&[2.0, -0.5, 0.1]), 0.3).unwrap(), &[1.7, 0.0, 0.0]));
        assert!(close(&shifted_relu(&v(&[2.0, -0.5, 0.0]), 0.0).unwrap(), &[2.0, 0.0, 0.0]));
        assert_eq!(shifted_relu(&v(&[0.1, -4.0]), 0.3).unwrap().max_abs(), 0.0);
        assert!(shifted_relu(&v(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        let x = Tensor::from_rows(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(top_k_rows(&x, 2).unwrap().data(), &[3.0, 0.0, 2.0]);
        assert_eq!(top_k_rows(&x, 3).unwrap(), x);
        let ties = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(top_k_rows(&ties, 1).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert!(top_k_rows(&x, 0).is_err());
        assert!(top_k_rows(&x, 4).is_err());
    }

    #[test]
    fn top_k_keeps_sign_and_uses_magnitude() {
        let x = Tensor::from_rows(&[vec![0.5, -3.0, 2.0]]).unwrap();
        assert_eq!(top_k_rows(&x, 1).unwrap().data(), &[0.0, -3.0, 0.0]);
    }

    #[test]
    fn activation_gradients() {
        let mut rng = SplitMix64::new(3);
        // Keep samples away from the kinks at |x| = λ.
        let data: Vec<f32> = (0..12)
            .map(|_| {
                let mut x = rng.uniform(-2.0, 2.0);
                while (x.abs() - 0.3).abs() < 0.05 || (x - 0.3).abs() < 0.05 {
                    x = rng.uniform(-2.0, 2.0);
                }
                x
            })
            .collect();
        let x = Tensor::new(&[3, 4], data).unwrap();
        for policy in [
            ActivationPolicy::SoftThreshold { lambda: 0.3 },
            ActivationPolicy::ShiftedRelu { lambda: 0.3 },
            ActivationPolicy::TopK { k: 2 },
        ] {
            let r = check_gradients(&[x.clone()], 1e-3, move |tape, vs| policy.apply(tape, vs[0])).unwrap();
            assert!(r.max_rel_err < 1e-3, "{policy:?}: {r:?}");
        }
    }

    proptest! {
        // Soft-thresholding minimises ½(u − x)² + λ|u|.
        #[test]
        fn soft_threshold_is_l1_prox(x in -3.0f64..3.0, lambda in 0.0f64..1.5) {
            let u = soft_threshold(&v(&[x as f32]), lambda as f32).unwrap().item() as f64;
            let obj = |u: f64| 0.5 * (u - x).powi(2) + lambda * u.abs();
            let best = (0..=6000).map(|i| -3.0 + i as f64 * 1e-3).fold(f64::INFINITY, |m, g| m.min(obj(g)));
            prop_assert!(obj(u) <= best + 1e-6);
        }

        #[test]
        fn top_k_density_is_exact(seed in any::<u64>(), k in 1usize..8) {
            let mut rng = SplitMix64::new(seed);
            let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
            let s = top_k_rows(&x, k).unwrap();
            prop_assert!((density(&s) - k as f64 / 8.0).abs() < 1e-12);
        }
    }
}
