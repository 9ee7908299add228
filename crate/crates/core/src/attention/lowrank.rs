use serde::{Deserialize, Serialize};

use super::join;
use super::layer::{as_batch, AttentionLayer, AttentionWeights};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Projection::Query),
            "k" => Ok(Projection::Key),
            "v" => Ok(Projection::Value),
            "o" => Ok(Projection::Output),
            _ => Err(Error::Config(format!("unknown projection `{s}` (expected q, k, v or o)"))),
        }
    }

    fn weight(self, layer: &AttentionLayer) -> &Tensor {
        match self {
            Projection::Query => &layer.w_q,
            Projection::Key => &layer.w_k,
            Projection::Value => &layer.w_v,
            Projection::Output => &layer.w_o,
        }
    }

    fn slot(self, w: &mut AttentionWeights) -> &mut Var {
        match self {
            Projection::Query => &mut w.q,
            Projection::Key => &mut w.k,
            Projection::Value => &mut w.v,
            Projection::Output => &mut w.o,
        }
    }
}

/// Update `W_A·W_B` for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub target: Projection,
    pub a: Tensor,
    pub b: Tensor,
}

/// Low-rank weight adapter over a subset of an attention layer's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub factors: Vec<LowRankFactor>,
}

impl LowRankAdapter {
    /// `W_A ~ N(0, 1/rows)`, `W_B = 0`.
    pub fn new(layer: &AttentionLayer, rank: usize, targets: &[Projection], rng: &mut SplitMix64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("low-rank adapter needs rank >= 1"));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::contract("low-rank adapter needs at least one target projection"));
        }
        let factors = targets
            .into_iter()
            .map(|target| {
                let w = target.weight(layer);
                let (rows, cols) = (w.rows(), w.cols());
                LowRankFactor {
                    target,
                    a: Tensor::randn(&[rows, rank], 1.0 / (rows as f32).sqrt(), rng).with_grad(true),
                    b: Tensor::zeros(&[rank, cols]).with_grad(true),
                }
            })
            .collect();
        Ok(Self { rank, factors })
    }

    pub fn factor(&self, target: Projection) -> Option<&LowRankFactor> {
        self.factors.iter().find(|f| f.target == target)
    }

    pub fn factor_mut(&mut self, target: Projection) -> Option<&mut LowRankFactor> {
        self.factors.iter_mut().find(|f| f.target == target)
    }

    fn check(&self, layer: &AttentionLayer) -> Result<()> {
        for f in &self.factors {
            let w = f.target.weight(layer);
            if f.a.shape() != [w.rows(), self.rank] || f.b.shape() != [self.rank, w.cols()] {
                return Err(Error::dim(
                    "low-rank adapter",
                    format!("factors {:?}·{:?} for weight {:?}", f.a.shape(), f.b.shape(), w.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Replaces each targeted base weight with `W + W_A·W_B` on the tape.
    pub fn adapt(&self, tape: &mut Tape, prefix: &str, base: &AttentionWeights) -> Result<AttentionWeights> {
        let mut w = *base;
        for f in &self.factors {
            let name = f.target.name();
            let a = tape.param(&join(prefix, &format!("{name}_a")), &f.a);
            let b = tape.param(&join(prefix, &format!("{name}_b")), &f.b);
            let update = tape.matmul(a, b)?;
            let slot = f.target.slot(&mut w);
            *slot = tape.add(*slot, update)?;
        }
        Ok(w)
    }
}

impl Parameterized for LowRankAdapter {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for fac in &self.factors {
            f(&format!("{}_a", fac.target.name()), &fac.a);
            f(&format!("{}_b", fac.target.name()), &fac.b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for fac in &mut self.factors {
            let name = fac.target.name();
            f(&format!("{name}_a"), &mut fac.a);
            f(&format!("{name}_b"), &mut fac.b);
        }
    }
}

/// Attention on `x: [N, C_i]` with every targeted weight `W` replaced by `W + W_A·W_B`.
pub fn lowrank_adapted_forward(layer: &AttentionLayer, lora: &LowRankAdapter, x: &Tensor) -> Result<Tensor> {
    lora.check(layer)?;
    let (n, _) = x.dims2("lowrank_adapted_forward")?;
    let mut tape = Tape::new();
    let xv = tape.constant(as_batch(x)?);
    let base = layer.bind(&mut tape, "layer");
    let w = lora.adapt(&mut tape, "lora", &base)?;
    let out = layer.attend(&mut tape, &w, xv)?.out;
    tape.value(out).reshape(&[n, layer.c_out()])
}
