use crate::attention::{head_mean, join, AdapterForm, AttentionLayer, SparseAdapter};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::ActivationPolicy;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SignalModelConfig {
    /// Signal length `L`.
    pub length: usize,
    /// Projection channels; these are the attention tokens.
    pub channels: usize,
    pub heads: usize,
    pub atoms: usize,
    pub activation: ActivationPolicy,
    pub form: AdapterForm,
    /// Adds the plain `A·X·W_v·W_oᵀ` path next to the dictionary path.
    pub value_path: bool,
}

impl Default for SignalModelConfig {
    fn default() -> Self {
        Self {
            length: 64,
            channels: 64,
            heads: 4,
            atoms: 100,
            activation: ActivationPolicy::default(),
            form: AdapterForm::Implementation,
            value_path: false,
        }
    }
}

/// Masked-signal reconstructor built around one attention block.
///
/// A frozen random projection lifts the 1-D signal to `channels` copies.
/// Channel `c` becomes a token whose features are `[p_c·x̃, mask]` (width
/// `2L`) plus a learned positional row. The block's dictionary path
/// `σ(·)·D` emits one length-`L` vector per token and the prediction is
/// their sum, so each atom (row of `D`) is a time-domain waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalModel {
    pub config: SignalModelConfig,
    pub projection: Tensor,
    pub positions: Tensor,
    pub attention: AttentionLayer,
    pub adapter: SparseAdapter,
}

#[derive(Debug, Clone, Copy)]
pub struct SignalForward {
    /// `[B, L]`
    pub prediction: Var,
    /// Sparse codes, `[B, channels, M]`.
    pub codes: Var,
    /// Coefficients multiplying `D`, `[B, channels, M]`.
    pub coeffs: Var,
    /// Dictionary-path output per token, `[B, channels, L]`.
    pub delta: Var,
}

impl SignalModel {
    pub fn new(config: SignalModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        let (l, c) = (config.length, config.channels);
        if l == 0 || c == 0 {
            return Err(Error::contract("signal model needs a positive length and channel count"));
        }
        let features = 2 * l;
        let projection = Tensor::randn(&[c], 1.0, rng);
        let positions = Tensor::randn(&[c, features], 0.1, rng).with_grad(true);
        let attention = AttentionLayer::random(features, l, config.heads, rng)?;
        let adapter = SparseAdapter::new(features, l, config.atoms, config.activation, config.form, rng)?;
        Ok(Self { config, projection, positions, attention, adapter })
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.config.length
    }

    /// Token features `[B, channels, 2L]` before the positional table.
    fn lift(&self, masked: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let l = self.config.length;
        let (b, lm) = masked.dims2("signal model")?;
        if lm != l || mask.shape() != masked.shape() {
            return Err(Error::dim(
                "signal model",
                format!("inputs {:?} and {:?}, model length {l}", masked.shape(), mask.shape()),
            ));
        }
        let c = self.config.channels;
        let f = 2 * l;
        let mut out = vec![0.0f32; b * c * f];
        for bi in 0..b {
            let (xs, ms) = (masked.row(bi), mask.row(bi));
            for (ci, &p) in self.projection.data().iter().enumerate() {
                let dst = &mut out[(bi * c + ci) * f..(bi * c + ci + 1) * f];
                for (d, &x) in dst[..l].iter_mut().zip(xs) {
                    *d = p * x;
                }
                dst[l..].copy_from_slice(ms);
            }
        }
        Tensor::new(&[b, c, f], out)
    }

    /// Runs the model on `masked, mask: [B, L]`.
    pub fn forward(&self, tape: &mut Tape, masked: &Tensor, mask: &Tensor) -> Result<SignalForward> {
        let raw = tape.constant(self.lift(masked, mask)?);
        let pos = tape.param("positions", &self.positions);
        let x = tape.add_broadcast(raw, pos)?;
        let w = self.attention.bind(tape, "attention");
        let aw = self.adapter.bind(tape, "adapter");
        let (maps, base) = if self.config.value_path {
            let r = self.attention.attend(tape, &w, x)?;
            (r.maps, Some(r.out))
        } else {
            (self.attention.maps(tape, &w, x)?, None)
        };
        let a = head_mean(tape, maps, self.attention.heads)?;
        let r = self.adapter.apply(tape, &aw, x, a)?;
        let tokens = match base {
            Some(o) => tape.add(o, r.delta)?,
            None => r.delta,
        };
        let prediction = tape.sum_axis(tokens, 1)?;
        Ok(SignalForward { prediction, codes: r.codes, coeffs: r.coeffs, delta: r.delta })
    }

    /// Prediction `[B, L]` without gradients.
    pub fn predict(&self, masked: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = self.forward(&mut tape, masked, mask)?;
        Ok(tape.value(r.prediction).clone())
    }
}

impl Parameterized for SignalModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("projection", &self.projection);
        f("positions", &self.positions);
        self.attention.visit_params(&mut |n, t| f(&join("attention", n), t));
        self.adapter.visit_params(&mut |n, t| f(&join("adapter", n), t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("projection", &mut self.projection);
        f("positions", &mut self.positions);
        self.attention.visit_params_mut(&mut |n, t| f(&join("attention", n), t));
        self.adapter.visit_params_mut(&mut |n, t| f(&join("adapter", n), t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_fourier_batch, FourierTaskSpec};

    fn small() -> SignalModelConfig {
        SignalModelConfig { length: 8, channels: 4, heads: 2, atoms: 6, ..Default::default() }
    }

    #[test]
    fn zero_dictionary_predicts_zero() {
        let m = SignalModel::new(SignalModelConfig::default(), &mut SplitMix64::new(0)).unwrap();
        let b = gen_fourier_batch(&FourierTaskSpec::low(1), 3).unwrap();
        let p = m.predict(&b.masked, &b.mask).unwrap();
        assert_eq!(p.shape(), &[3, 64]);
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn prediction_is_sum_of_atoms_weighted_by_summed_coefficients() {
        let mut r = SplitMix64::new(1);
        let mut m = SignalModel::new(small(), &mut r).unwrap();
        m.adapter.d = Tensor::randn(&[6, 8], 1.0, &mut r);
        let x = Tensor::randn(&[2, 8], 1.0, &mut r);
        let mask = Tensor::ones(&[2, 8]);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, &mask).unwrap();
        let coeffs = tape.value(out.coeffs);
        for bi in 0..2 {
            let mut weights = vec![0.0f32; 6];
            for c in 0..4 {
                for (w, j) in weights.iter_mut().zip(0..6) {
                    *w += coeffs.data()[(bi * 4 + c) * 6 + j];
                }
            }
            for t in 0..8 {
                let want: f32 = (0..6).map(|j| weights[j] * m.adapter.d.at(j, t)).sum();
                assert!((tape.value(out.prediction).at(bi, t) - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn value_path_changes_output_and_rejects_bad_lengths() {
        let mut r = SplitMix64::new(2);
        let m = SignalModel::new(SignalModelConfig { value_path: true, ..small() }, &mut r).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut r);
        assert!(m.predict(&x, &Tensor::ones(&[1, 8])).unwrap().max_abs() > 0.0);
        assert!(m.predict(&Tensor::ones(&[1, 7]), &Tensor::ones(&[1, 7])).is_err());
    }
}
