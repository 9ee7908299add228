use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameterized;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only adapter dictionaries `D`.
    AtomsOnly,
    /// Only adapter coefficient encoders `W_s`.
    CoefficientsOnly,
    /// `W_s` and `D`.
    Both,
    /// Everything except fixed projections; pre-training only.
    FullModel,
}

fn last_segment(name: &str) -> (&str, &str) {
    match name.rsplit_once('.') {
        Some((head, tail)) => (head, tail),
        None => ("", name),
    }
}

fn is_adapter(name: &str, leaf: &str) -> bool {
    let (head, tail) = last_segment(name);
    tail == leaf && (head == "adapter" || head.ends_with(".adapter"))
}

impl FreezePolicy {
    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::AtomsOnly => "atoms_only",
            FreezePolicy::CoefficientsOnly => "coefficients_only",
            FreezePolicy::Both => "both",
            FreezePolicy::FullModel => "full_model",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "atoms_only" => Ok(FreezePolicy::AtomsOnly),
            "coefficients_only" => Ok(FreezePolicy::CoefficientsOnly),
            "both" => Ok(FreezePolicy::Both),
            "full_model" => Ok(FreezePolicy::FullModel),
            _ => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
        }
    }

    /// Whether the parameter called `name` trains under this policy.
    pub fn trains(self, name: &str) -> bool {
        let atoms = is_adapter(name, "d");
        let coeffs = is_adapter(name, "w_s");
        match self {
            FreezePolicy::AtomsOnly => atoms,
            FreezePolicy::CoefficientsOnly => coeffs,
            FreezePolicy::Both => atoms || coeffs,
            FreezePolicy::FullModel => last_segment(name).1 != "projection",
        }
    }

    /// Marks tensors trainable or frozen and drops stale gradients.
    pub fn apply(self, model: &mut dyn Parameterized) {
        model.visit_params_mut(&mut |name, t| {
            t.set_requires_grad(false);
            t.set_requires_grad(self.trains(name));
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_matching() {
        use FreezePolicy::*;
        assert!(AtomsOnly.trains("adapter.d"));
        assert!(AtomsOnly.trains("decoder.1.adapter.d"));
        assert!(!AtomsOnly.trains("adapter.w_s"));
        assert!(!AtomsOnly.trains("decoder.1.mlp_out.d"));
        assert!(CoefficientsOnly.trains("decoder.0.adapter.w_s"));
        assert!(!CoefficientsOnly.trains("attention.w_q"));
        assert!(Both.trains("adapter.d") && Both.trains("adapter.w_s") && !Both.trains("positions"));
        assert!(FullModel.trains("attention.w_q") && !FullModel.trains("projection"));
        for p in [AtomsOnly, CoefficientsOnly, Both, FullModel] {
            assert_eq!(FreezePolicy::parse(p.name()).unwrap(), p);
        }
    }
}
