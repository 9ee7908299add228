use super::digits::{PIXELS, SIDE};
use super::layers::{LayerTrace, Linear, TransformerLayer};
use crate::attention::join;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    /// Weight of the KL term in the training loss.
    pub kl_weight: f32,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            patch: 7,
            dim: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            latent: 32,
            mlp_hidden: 256,
            kl_weight: 1e-3,
        }
    }
}

impl VaeConfig {
    pub fn tokens(&self) -> usize {
        (SIDE / self.patch).pow(2)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }
}

/// Transformer encoder/decoder VAE over non-overlapping image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitVae {
    pub config: VaeConfig,
    pub patch_embed: Linear,
    pub encoder_positions: Tensor,
    pub encoder: Vec<TransformerLayer>,
    pub to_mu: Linear,
    pub to_logvar: Linear,
    pub from_latent: Linear,
    pub decoder_positions: Tensor,
    pub decoder: Vec<TransformerLayer>,
    pub to_patch: Linear,
}

#[derive(Debug, Clone)]
pub struct VaeForward {
    /// Reconstruction in patch layout, `[B, T, P²]`, values in `(0, 1)`.
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
    /// Mean squared error against the target.
    pub recon_loss: Var,
    /// Batch-mean KL divergence to the standard normal.
    pub kl: Var,
    pub loss: Var,
    pub decoder_traces: Vec<LayerTrace>,
}

/// Plain-tensor result of [`vae_forward`].
#[derive(Debug, Clone)]
pub struct VaeOutput {
    /// `[B, 784]`
    pub recon: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub recon_mse: f32,
    pub kl: f32,
}

/// `[B, 784]` images to `[B, T, P²]` patches in row-major patch order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let b = images.numel() / PIXELS;
    if images.numel() != b * PIXELS || b == 0 || SIDE % patch != 0 {
        return Err(Error::dim("patchify", format!("{:?} into {patch}×{patch} patches", images.shape())));
    }
    let per = SIDE / patch;
    let mut out = vec![0.0f32; images.numel()];
    let src = images.data();
    for bi in 0..b {
        for r in 0..SIDE {
            for c in 0..SIDE {
                let token = (r / patch) * per + c / patch;
                let within = (r % patch) * patch + c % patch;
                out[bi * PIXELS + token * patch * patch + within] = src[bi * PIXELS + r * SIDE + c];
            }
        }
    }
    Tensor::new(&[b, per * per, patch * patch], out)
}

/// Inverse of [`patchify`], returning `[B, 784]`.
pub fn unpatchify(patches: &Tensor, patch: usize) -> Result<Tensor> {
    let b = patches.numel() / PIXELS;
    if patches.numel() != b * PIXELS || b == 0 || SIDE % patch != 0 {
        return Err(Error::dim("unpatchify", format!("{:?} from {patch}×{patch} patches", patches.shape())));
    }
    let per = SIDE / patch;
    let mut out = vec![0.0f32; patches.numel()];
    let src = patches.data();
    for bi in 0..b {
        for r in 0..SIDE {
            for c in 0..SIDE {
                let token = (r / patch) * per + c / patch;
                let within = (r % patch) * patch + c % patch;
                out[bi * PIXELS + r * SIDE + c] = src[bi * PIXELS + token * patch * patch + within];
            }
        }
    }
    Tensor::new(&[b, PIXELS], out)
}

/// `mean_b Σ_j ½(μ² + e^{logvar} − 1 − logvar)`.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    let (b, d) = (shape[0], shape[1..].iter().product::<usize>());
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let total = tape.sum(s)?;
    let total = tape.scale(total, 0.5 / b as f32)?;
    let offset = tape.constant(Tensor::scalar(0.5 * d as f32));
    tape.sub(total, offset)
}

impl DigitVae {
    pub fn new(config: VaeConfig, rng: &mut SplitMix64) -> Result<Self> {
        if config.patch == 0 || SIDE % config.patch != 0 {
            return Err(Error::contract(format!("patch size {} does not tile {SIDE}×{SIDE}", config.patch)));
        }
        let (t, d, p) = (config.tokens(), config.dim, config.patch_pixels());
        let layers = |n: usize, rng: &mut SplitMix64| {
            (0..n).map(|_| TransformerLayer::new(d, config.heads, config.mlp_hidden, rng)).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            patch_embed: Linear::new(p, d, rng),
            encoder_positions: Tensor::randn(&[t, d], 0.02, rng).with_grad(true),
            encoder: layers(config.encoder_layers, rng)?,
            to_mu: Linear::new(d, config.latent, rng),
            to_logvar: Linear::new(d, config.latent, rng),
            from_latent: Linear::new(config.latent, t * d, rng),
            decoder_positions: Tensor::randn(&[t, d], 0.02, rng).with_grad(true),
            decoder: layers(config.decoder_layers, rng)?,
            to_patch: Linear::new(d, p, rng),
            config,
        })
    }

    /// Encodes `input`, samples the latent (or uses the mean when `noise`
    /// is `None`), decodes and scores against `target` (both `[B, 784]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        target: &Tensor,
        noise: Option<&mut SplitMix64>,
    ) -> Result<VaeForward> {
        if input.shape() != target.shape() {
            return Err(Error::dim("vae", format!("input {:?} vs target {:?}", input.shape(), target.shape())));
        }
        let cfg = &self.config;
        let patches = tape.constant(patchify(input, cfg.patch)?);
        let b = tape.shape(patches)[0];
        let (t, d) = (cfg.tokens(), cfg.dim);

        let mut h = self.patch_embed.forward(tape, "patch_embed", patches)?;
        let pos = tape.param("encoder_positions", &self.encoder_positions);
        h = tape.add_broadcast(h, pos)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(tape, &format!("encoder.{i}"), h)?.out;
        }
        let h = tape.layer_norm(h, 1e-5)?;
        let pooled = tape.mean_axis(h, 1)?;
        let mu = self.to_mu.forward(tape, "to_mu", pooled)?;
        let logvar = self.to_logvar.forward(tape, "to_logvar", pooled)?;

        let z = match noise {
            Some(rng) => {
                let eps = tape.constant(Tensor::new(&[b, cfg.latent], rng.normal_vec(b * cfg.latent, 1.0))?);
                let half = tape.scale(logvar, 0.5)?;
                let std = tape.exp(half)?;
                let jitter = tape.mul(std, eps)?;
                tape.add(mu, jitter)?
            }
            None => mu,
        };

        let g = self.from_latent.forward(tape, "from_latent", z)?;
        let mut g = tape.reshape(g, &[b, t, d])?;
        let pos = tape.param("decoder_positions", &self.decoder_positions);
        g = tape.add_broadcast(g, pos)?;
        let mut decoder_traces = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            let tr = layer.forward(tape, &format!("decoder.{i}"), g)?;
            g = tr.out;
            decoder_traces.push(tr);
        }
        let g = tape.layer_norm(g, 1e-5)?;
        let logits = self.to_patch.forward(tape, "to_patch", g)?;
        let recon = tape.sigmoid(logits)?;

        let target = tape.constant(patchify(target, cfg.patch)?);
        let diff = tape.sub(recon, target)?;
        let sq = tape.mul(diff, diff)?;
        let recon_loss = tape.mean(sq)?;
        let kl = gaussian_kl(tape, mu, logvar)?;
        let weighted = tape.scale(kl, cfg.kl_weight)?;
        let loss = tape.add(recon_loss, weighted)?;
        Ok(VaeForward { recon, mu, logvar, recon_loss, kl, loss, decoder_traces })
    }

    /// Deterministic reconstruction (latent mean) of `input`, `[B, 784]`.
    pub fn reconstruct(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = self.forward(&mut tape, input, input, None)?;
        unpatchify(tape.value(r.recon), self.config.patch)
    }

    pub fn attach_decoder_adapters(&mut self, make: &mut dyn FnMut(usize) -> Result<crate::attention::SparseAdapter>) -> Result<()> {
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            layer.adapter = Some(make(i)?);
        }
        Ok(())
    }
}

/// One reparameterized pass with `x` as its own target.
pub fn vae_forward(vae: &DigitVae, x: &Tensor, noise_seed: u64) -> Result<VaeOutput> {
    let x = x.reshape(&[x.numel() / PIXELS.max(1), PIXELS])?;
    let mut tape = Tape::new();
    let mut rng = SplitMix64::new(noise_seed);
    let r = vae.forward(&mut tape, &x, &x, Some(&mut rng))?;
    Ok(VaeOutput {
        recon: unpatchify(tape.value(r.recon), vae.config.patch)?,
        mu: tape.value(r.mu).clone(),
        logvar: tape.value(r.logvar).clone(),
        recon_mse: tape.value(r.recon_loss).item(),
        kl: tape.value(r.kl).item(),
    })
}

impl Parameterized for DigitVae {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.visit_params(&mut |n, t| f(&join("patch_embed", n), t));
        f("encoder_positions", &self.encoder_positions);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit_params(&mut |n, t| f(&format!("encoder.{i}.{n}"), t));
        }
        self.to_mu.visit_params(&mut |n, t| f(&join("to_mu", n), t));
        self.to_logvar.visit_params(&mut |n, t| f(&join("to_logvar", n), t));
        self.from_latent.visit_params(&mut |n, t| f(&join("from_latent", n), t));
        f("decoder_positions", &self.decoder_positions);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit_params(&mut |n, t| f(&format!("decoder.{i}.{n}"), t));
        }
        self.to_patch.visit_params(&mut |n, t| f(&join("to_patch", n), t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_params_mut(&mut |n, t| f(&join("patch_embed", n), t));
        f("encoder_positions", &mut self.encoder_positions);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_params_mut(&mut |n, t| f(&format!("encoder.{i}.{n}"), t));
        }
        self.to_mu.visit_params_mut(&mut |n, t| f(&join("to_mu", n), t));
        self.to_logvar.visit_params_mut(&mut |n, t| f(&join("to_logvar", n), t));
        self.from_latent.visit_params_mut(&mut |n, t| f(&join("from_latent", n), t));
        f("decoder_positions", &mut self.decoder_positions);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_params_mut(&mut |n, t| f(&format!("decoder.{i}.{n}"), t));
        }
        self.to_patch.visit_params_mut(&mut |n, t| f(&join("to_patch", n), t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::synth_digits;
    use crate::tensor::gradcheck::check_gradients;

    #[test]
    fn patch_round_trip() {
        let x = Tensor::randn(&[2, PIXELS], 1.0, &mut SplitMix64::new(0));
        let p = patchify(&x, 7).unwrap();
        assert_eq!(p.shape(), &[2, 16, 49]);
        assert_eq!(p.at(0, 0), x.at(0, 0));
        assert_eq!(p.data()[7], x.data()[SIDE]);
        assert_eq!(unpatchify(&p, 7).unwrap(), x);
    }

    #[test]
    fn kl_at_prior_is_zero_and_nonnegative_elsewhere() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[3, 4]));
        let lv = tape.constant(Tensor::zeros(&[3, 4]));
        let kl = gaussian_kl(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let mut r = SplitMix64::new(1);
        for _ in 0..20 {
            let mu = tape.constant(Tensor::randn(&[2, 3], 2.0, &mut r));
            let lv = tape.constant(Tensor::randn(&[2, 3], 2.0, &mut r));
            let kl = gaussian_kl(&mut tape, mu, lv).unwrap();
            assert!(tape.value(kl).item() >= 0.0);
        }
    }

    #[test]
    fn default_shapes() {
        let vae = DigitVae::new(VaeConfig::default(), &mut SplitMix64::new(2)).unwrap();
        let x = synth_digits(3, 2, &[5]).unwrap().batch(&[0, 1]).unwrap();
        let out = vae_forward(&vae, &x, 7).unwrap();
        assert_eq!(out.recon.shape(), &[2, PIXELS]);
        assert_eq!(out.mu.shape(), &[2, 32]);
        assert!(out.kl >= 0.0 && out.recon_mse > 0.0);
        assert!(out.recon.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 0.3));
        let d = tape.sub(x, x).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let m = tape.mean(sq).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn reparameterization_gradients() {
        // Gradient through `mu + exp(logvar / 2)·ε` and the KL term on a 2-d latent.
        let eps = Tensor::randn(&[3, 2], 1.0, &mut SplitMix64::new(3));
        let target = Tensor::randn(&[3, 2], 1.0, &mut SplitMix64::new(4));
        let inputs = [Tensor::randn(&[3, 2], 0.5, &mut SplitMix64::new(5)), Tensor::randn(&[3, 2], 0.5, &mut SplitMix64::new(6))];
        let r = check_gradients(&inputs, 1e-3, |t, v| {
            let e = t.constant(eps.clone());
            let half = t.scale(v[1], 0.5)?;
            let std = t.exp(half)?;
            let j = t.mul(std, e)?;
            let z = t.add(v[0], j)?;
            let tg = t.constant(target.clone());
            let d = t.sub(z, tg)?;
            let sq = t.mul(d, d)?;
            let rec = t.mean(sq)?;
            let kl = gaussian_kl(t, v[0], v[1])?;
            t.add(rec, kl)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
