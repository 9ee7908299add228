use crate::attention::{head_mean, join, AttentionLayer, SparseAdapter};
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

const NORM_EPS: f32 = 1e-5;

/// Affine map `x·W + b` over the last dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt(), rng).with_grad(true),
            bias: Tensor::zeros(&[fan_out]).with_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(prefix, "weight"), &self.weight);
        let b = tape.param(&join(prefix, "bias"), &self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Pre-norm transformer layer: `x += attn(ln(x)) [+ ΔO]; x += mlp(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub attention: AttentionLayer,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub adapter: Option<SparseAdapter>,
}

/// What a layer exposes besides its output, for analysis.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub out: Var,
    /// Sparse adapter codes, `[B, N, M]`.
    pub codes: Option<Var>,
    /// Adapter coefficients multiplying `D`, `[B, N, M]`.
    pub coeffs: Option<Var>,
    /// Adapter output `ΔO`, `[B, N, C]`.
    pub delta: Option<Var>,
}

impl TransformerLayer {
    pub fn new(dim: usize, heads: usize, hidden: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            attention: AttentionLayer::random(dim, dim, heads, rng)?,
            mlp_in: Linear::new(dim, hidden, rng),
            mlp_out: Linear::new(hidden, dim, rng),
            adapter: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<LayerTrace> {
        let h = tape.layer_norm(x, NORM_EPS)?;
        let w = self.attention.bind(tape, &join(prefix, "attention"));
        let att = self.attention.attend(tape, &w, h)?;
        let (mut update, mut codes, mut coeffs, mut delta) = (att.out, None, None, None);
        if let Some(ad) = &self.adapter {
            let aw = ad.bind(tape, &join(prefix, "adapter"));
            let a = head_mean(tape, att.maps, self.attention.heads)?;
            let r = ad.apply(tape, &aw, h, a)?;
            update = tape.add(update, r.delta)?;
            codes = Some(r.codes);
            coeffs = Some(r.coeffs);
            delta = Some(r.delta);
        }
        let x = tape.add(x, update)?;
        let h = tape.layer_norm(x, NORM_EPS)?;
        let h = self.mlp_in.forward(tape, &join(prefix, "mlp_in"), h)?;
        let h = tape.relu(h)?;
        let h = self.mlp_out.forward(tape, &join(prefix, "mlp_out"), h)?;
        let out = tape.add(x, h)?;
        Ok(LayerTrace { out, codes, coeffs, delta })
    }
}

impl Parameterized for TransformerLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attention.visit_params(&mut |n, t| f(&join("attention", n), t));
        self.mlp_in.visit_params(&mut |n, t| f(&join("mlp_in", n), t));
        self.mlp_out.visit_params(&mut |n, t| f(&join("mlp_out", n), t));
        if let Some(ad) = &self.adapter {
            ad.visit_params(&mut |n, t| f(&join("adapter", n), t));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attention.visit_params_mut(&mut |n, t| f(&join("attention", n), t));
        self.mlp_in.visit_params_mut(&mut |n, t| f(&join("mlp_in", n), t));
        self.mlp_out.visit_params_mut(&mut |n, t| f(&join("mlp_out", n), t));
        if let Some(ad) = &mut self.adapter {
            ad.visit_params_mut(&mut |n, t| f(&join("adapter", n), t));
        }
    }
}
