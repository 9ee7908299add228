use super::join;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

/// One multi-head attention block.
///
/// `w_q`, `w_k`, `w_v` are `[C_i, C_o]`; `w_o` is `[C_o, C_o]`. Head `h`
/// owns columns `h·C_o/H..(h+1)·C_o/H` of the three input projections and of
/// `w_o`, so its value-output map is `W_vo⁽ʰ⁾ = W_v⁽ʰ⁾·W_o⁽ʰ⁾ᵀ` and the block
/// output is `Σ_h A⁽ʰ⁾·X·W_vo⁽ʰ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    /// Multiplier on `Q·Kᵀ` before the softmax. 1.0 gives the plain
    /// `softmax(X·W_q·W_kᵀ·Xᵀ)`.
    pub logit_scale: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[B, N, C_o]`
    pub out: Var,
    /// `[B·H, N, N]`, batch-major then head.
    pub maps: Var,
}

impl AttentionLayer {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let (ci, co) = w_q.dims2("attention")?;
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != [ci, co] {
                return Err(Error::dim("attention", format!("{name} is {:?}, expected [{ci}, {co}]", w.shape())));
            }
        }
        if w_o.shape() != [co, co] {
            return Err(Error::dim("attention", format!("w_o is {:?}, expected [{co}, {co}]", w_o.shape())));
        }
        if heads == 0 || co % heads != 0 {
            return Err(Error::dim("attention", format!("{co} output channels cannot split into {heads} heads")));
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads, logit_scale: 1.0 })
    }

    /// Gaussian init with `1/√fan_in` scale and a `1/√(C_o/H)` logit scale.
    pub fn random(c_in: usize, c_out: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        let si = 1.0 / (c_in as f32).sqrt();
        let so = 1.0 / (c_out as f32).sqrt();
        let mut layer = Self::new(
            Tensor::randn(&[c_in, c_out], si, rng),
            Tensor::randn(&[c_in, c_out], si, rng),
            Tensor::randn(&[c_in, c_out], si, rng),
            Tensor::randn(&[c_out, c_out], so, rng),
            heads,
        )?;
        layer.logit_scale = 1.0 / (layer.head_dim() as f32).sqrt();
        layer.set_all_trainable(true);
        Ok(layer)
    }

    pub fn with_logit_scale(mut self, scale: f32) -> Self {
        self.logit_scale = scale;
        self
    }

    pub fn c_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn c_out(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.c_out() / self.heads
    }

    pub fn freeze(&mut self) {
        self.set_all_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |_, t| any |= t.requires_grad());
        !any
    }

    /// `W_vo⁽ʰ⁾ = W_v⁽ʰ⁾·W_o⁽ʰ⁾ᵀ`, shape `[C_i, C_o]`.
    pub fn value_output(&self, head: usize) -> Result<Tensor> {
        let d = self.head_dim();
        let v = self.w_v.slice_cols(head * d, (head + 1) * d)?;
        let o = self.w_o.slice_cols(head * d, (head + 1) * d)?;
        v.matmul(&o.transpose()?)
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> AttentionWeights {
        AttentionWeights {
            q: tape.param(&join(prefix, "w_q"), &self.w_q),
            k: tape.param(&join(prefix, "w_k"), &self.w_k),
            v: tape.param(&join(prefix, "w_v"), &self.w_v),
            o: tape.param(&join(prefix, "w_o"), &self.w_o),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[2] != self.c_in() {
            return Err(Error::dim("attention", format!("input {shape:?}, layer expects [B, N, {}]", self.c_in())));
        }
        Ok(())
    }

    /// Per-head attention maps `[B·H, N, N]` for `x: [B, N, C_i]`.
    pub fn maps(&self, tape: &mut Tape, w: &AttentionWeights, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let q = tape.matmul(x, w.q)?;
        let k = tape.matmul(x, w.k)?;
        let qh = tape.split_heads(q, self.heads)?;
        let kh = tape.split_heads(k, self.heads)?;
        let mut logits = tape.bmm_nt(qh, kh)?;
        if self.logit_scale != 1.0 {
            logits = tape.scale(logits, self.logit_scale)?;
        }
        tape.softmax(logits)
    }

    /// Multi-head attention on `x: [B, N, C_i]` with the given (possibly
    /// adapted) weights.
    pub fn attend(&self, tape: &mut Tape, w: &AttentionWeights, x: Var) -> Result<AttentionOutput> {
        let maps = self.maps(tape, w, x)?;
        let v = tape.matmul(x, w.v)?;
        let vh = tape.split_heads(v, self.heads)?;
        let ctx = tape.bmm(maps, vh)?;
        let merged = tape.merge_heads(ctx, self.heads)?;
        let wo_t = tape.transpose(w.o)?;
        let out = tape.matmul(merged, wo_t)?;
        Ok(AttentionOutput { out, maps })
    }
}

impl Parameterized for AttentionLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("w_o", &self.w_o);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("w_o", &mut self.w_o);
    }
}

pub(crate) fn as_batch(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2("attention input")?;
    x.reshape(&[1, n, c])
}

/// Runs one layer on `x: [N, C_i]`; returns `O: [N, C_o]` and the per-head
/// attention maps (`[N, N]` each).
pub fn attention_forward(layer: &AttentionLayer, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, _) = x.dims2("attention_forward")?;
    let mut tape = Tape::new();
    let xv = tape.constant(as_batch(x)?);
    let w = layer.bind(&mut tape, "");
    let r = layer.attend(&mut tape, &w, xv)?;
    let out = tape.value(r.out).reshape(&[n, layer.c_out()])?;
    let maps = tape.value(r.maps);
    let heads = (0..layer.heads)
        .map(|h| Tensor::new(&[n, n], maps.data()[h * n * n..(h + 1) * n * n].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, heads))
}

/// Attention as coefficients times atoms: `coeffs = [A⁽¹⁾ … A⁽ᴴ⁾]` (`[N, N·H]`)
/// and `atoms` stacks `X·W_vo⁽ʰ⁾` (`[N·H, C_o]`), so `coeffs·atoms = O`.
pub fn composite_dictionary_view(layer: &AttentionLayer, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, maps) = attention_forward(layer, x)?;
    let coeffs = Tensor::hstack(&maps)?;
    let atoms = (0..layer.heads).map(|h| x.matmul(&layer.value_output(h)?)).collect::<Result<Vec<_>>>()?;
    Ok((coeffs, Tensor::vstack(&atoms)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(ci: usize, co: usize, h: usize, seed: u64) -> AttentionLayer {
        AttentionLayer::random(ci, co, h, &mut SplitMix64::new(seed)).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let l = layer(4, 6, 2, 1);
        let x = Tensor::randn(&[1, 4], 1.0, &mut SplitMix64::new(2));
        let (o, maps) = attention_forward(&l, &x).unwrap();
        assert!(maps.iter().all(|a| a.data() == [1.0]));
        let mut expected = Tensor::zeros(&[1, 6]);
        for h in 0..2 {
            expected = expected.add(&x.matmul(&l.value_output(h).unwrap()).unwrap()).unwrap();
        }
        assert!(o.max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn single_head_is_plain_attention_then_output_projection() {
        let l = layer(5, 4, 1, 3).with_logit_scale(1.0);
        let x = Tensor::randn(&[3, 5], 1.0, &mut SplitMix64::new(4));
        let (o, _) = attention_forward(&l, &x).unwrap();
        // softmax(X Wq Wkᵀ Xᵀ) X Wv Woᵀ, coded directly.
        let q = x.matmul(&l.w_q).unwrap();
        let k = x.matmul(&l.w_k).unwrap();
        let logits = q.matmul(&k.transpose().unwrap()).unwrap();
        let mut a = logits.clone();
        for i in 0..3 {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            for j in 0..3 {
                a.set(i, j, e[j] / s);
            }
        }
        let expected = a.matmul(&x).unwrap().matmul(&l.w_v).unwrap().matmul(&l.w_o.transpose().unwrap()).unwrap();
        assert!(o.max_abs_diff(&expected) < 1e-6, "{}", o.max_abs_diff(&expected));
    }

    #[test]
    fn composite_view_shapes_and_product() {
        let l = layer(4, 8, 2, 5);
        let x = Tensor::randn(&[1, 4], 1.0, &mut SplitMix64::new(6));
        let (c, a) = composite_dictionary_view(&l, &x).unwrap();
        assert_eq!(c.shape(), &[1, 2]);
        assert_eq!(a.shape(), &[2, 8]);
        let x = Tensor::randn(&[5, 4], 1.0, &mut SplitMix64::new(7));
        let (c, a) = composite_dictionary_view(&l, &x).unwrap();
        let (o, _) = attention_forward(&l, &x).unwrap();
        assert!(c.matmul(&a).unwrap().max_abs_diff(&o) < 1e-5);
    }

    #[test]
    fn rejects_bad_shapes() {
        let l = layer(4, 8, 2, 8);
        assert!(matches!(attention_forward(&l, &Tensor::ones(&[3, 5])), Err(Error::Dimension { .. })));
        let w = Tensor::zeros(&[4, 6]);
        assert!(AttentionLayer::new(w.clone(), w.clone(), w.clone(), Tensor::zeros(&[6, 6]), 4).is_err());
        assert!(AttentionLayer::new(w.clone(), w.clone(), w, Tensor::zeros(&[5, 5]), 2).is_err());
    }

    #[test]
    fn freezing_marks_every_weight() {
        let mut l = layer(4, 4, 1, 9);
        assert!(!l.is_frozen());
        l.freeze();
        assert!(l.is_frozen());
    }
}
