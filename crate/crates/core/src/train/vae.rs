use super::optim::{clip_grad_norm, Adam};
use super::policy::FreezePolicy;
use super::report::{EpochRecord, RunReport};
use super::{atom_usage, TrainConfig};
use crate::attention::{AdapterForm, SparseAdapter};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::{density_of, ortho_penalty};
use crate::tasks::{corrupt, DigitDataset, DigitVae};
use crate::tensor::{Parameterized, Tape, Tensor};

pub const PRETRAIN_CLASSES: [u8; 5] = [5, 6, 7, 8, 9];
pub const FINETUNE_CLASSES: [u8; 1] = [3];
pub const NOISE_STD: f32 = 0.3;
const EVAL_NOISE_SALT: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeEval {
    /// Denoising MSE of the latent-mean reconstruction.
    pub loss: f64,
    pub density: f64,
    pub usage: Vec<u64>,
}

/// Splits off the last `eval_size` images (at most half the set) for evaluation.
fn split(data: &DigitDataset, eval_size: usize) -> Result<(DigitDataset, DigitDataset)> {
    let n = data.len();
    let n_eval = eval_size.min(n / 2);
    if n_eval == 0 {
        return Err(Error::contract(format!("{n} images are too few to train and evaluate")));
    }
    let train: Vec<usize> = (0..n - n_eval).collect();
    let eval: Vec<usize> = (n - n_eval..n).collect();
    Ok((data.subset(&train), data.subset(&eval)))
}

fn noisy_pair(data: &DigitDataset, idx: &[usize], rng: &mut SplitMix64) -> Result<(Tensor, Tensor)> {
    let clean = data.batch(idx)?;
    Ok((corrupt(&clean, NOISE_STD, rng), clean))
}

/// Denoising error on `data` with noise drawn from `noise_seed`, evaluated in
/// chunks of `batch` images.
pub fn evaluate_vae(vae: &DigitVae, data: &DigitDataset, noise_seed: u64, batch: usize) -> Result<VaeEval> {
    let mut rng = SplitMix64::new(noise_seed);
    let (mut sq, mut count) = (0.0f64, 0usize);
    let mut codes: Vec<Vec<f32>> = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (noisy, clean) = noisy_pair(data, chunk, &mut rng)?;
        let mut tape = Tape::new();
        let out = vae.forward(&mut tape, &noisy, &clean, None)?;
        let n = clean.numel();
        sq += tape.value(out.recon_loss).item() as f64 * n as f64;
        count += n;
        for (l, tr) in out.decoder_traces.iter().enumerate() {
            if let Some(c) = tr.codes {
                if codes.len() <= l {
                    codes.resize(l + 1, Vec::new());
                }
                codes[l].extend_from_slice(tape.value(c).data());
            }
        }
    }
    let all: Vec<f32> = codes.iter().flatten().copied().collect();
    let usage = vae
        .decoder
        .iter()
        .zip(&codes)
        .filter_map(|(layer, c)| layer.adapter.as_ref().map(|a| atom_usage(c, a.atoms())))
        .flatten()
        .collect();
    Ok(VaeEval { loss: sq / count.max(1) as f64, density: if all.is_empty() { 0.0 } else { density_of(&all) }, usage })
}

fn fit(vae: &mut DigitVae, data: &DigitDataset, policy: FreezePolicy, cfg: &TrainConfig, stage: &str) -> Result<RunReport> {
    cfg.validate()?;
    policy.apply(vae);
    let (train, eval) = split(data, cfg.eval_size)?;
    let eval_seed = cfg.seed ^ EVAL_NOISE_SALT;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer)?;
    let first = evaluate_vae(vae, &eval, eval_seed, cfg.batch_size)?;
    let mut report = RunReport {
        stage: stage.to_string(),
        seed: cfg.seed,
        initial_eval_loss: first.loss,
        final_eval_loss: first.loss,
        trainable_params: vae.trainable_param_count(),
        atom_usage: first.usage,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (noisy, clean) = noisy_pair(&train, chunk, &mut rng)?;
            let mut tape = Tape::new();
            let out = vae.forward(&mut tape, &noisy, &clean, Some(&mut rng))?;
            let mut loss = out.loss;
            if cfg.ortho_weight > 0.0 {
                for (i, layer) in vae.decoder.iter().enumerate() {
                    if layer.adapter.as_ref().is_some_and(|a| a.d.requires_grad()) {
                        let d = tape.var_by_name(&format!("decoder.{i}.adapter.d")).expect("adapter bound");
                        let pen = ortho_penalty(&mut tape, d)?;
                        let pen = tape.scale(pen, cfg.ortho_weight)?;
                        loss = tape.add(loss, pen)?;
                    }
                }
            }
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                report.failure = Some(format!("epoch {epoch}: non-finite training loss"));
                return Ok(report);
            }
            tape.backward(loss)?;
            vae.pull_grads(&tape);
            clip_grad_norm(vae, cfg.clip_norm);
            if let Err(Error::Numeric(what)) = opt.step(vae) {
                report.failure = Some(format!("epoch {epoch}: non-finite {what}"));
                return Ok(report);
            }
            total += tape.value(out.recon_loss).item() as f64;
            steps += 1;
        }
        let ev = evaluate_vae(vae, &eval, eval_seed, cfg.batch_size)?;
        report.history.push(EpochRecord {
            epoch,
            train_loss: total / steps.max(1) as f64,
            eval_loss: ev.loss,
            density: ev.density,
        });
        report.final_eval_loss = ev.loss;
        report.atom_usage = ev.usage;
    }
    Ok(report)
}

fn check_labels(data: &DigitDataset, allowed: &[u8]) -> Result<()> {
    match data.labels().iter().find(|l| !allowed.contains(l)) {
        Some(l) => Err(Error::contract(format!("label {l} is outside the expected classes {allowed:?}"))),
        None => Ok(()),
    }
}

/// Denoising pre-training on digits 5 to 9.
pub fn pretrain_vae(data_59: &DigitDataset, vae: &mut DigitVae, cfg: &TrainConfig) -> Result<RunReport> {
    check_labels(data_59, &PRETRAIN_CLASSES)?;
    fit(vae, data_59, FreezePolicy::FullModel, cfg, "pretrain_vae")
}

/// Attaches a zero-initialized dictionary adapter with `atoms` atoms to every
/// decoder attention layer of a copy of `vae` and trains only the adapters
/// on digit-3 denoising.
pub fn finetune_vae_dictionary(
    data_3: &DigitDataset,
    vae: &DigitVae,
    atoms: usize,
    cfg: &TrainConfig,
) -> Result<(DigitVae, RunReport)> {
    check_labels(data_3, &FINETUNE_CLASSES)?;
    let mut tuned = vae.clone();
    let mut rng = SplitMix64::new(cfg.seed).fork(0xADA);
    let dim = tuned.config.dim;
    let activation = cfg.effective_activation();
    tuned.attach_decoder_adapters(&mut |_| {
        SparseAdapter::new(dim, dim, atoms, activation, AdapterForm::Implementation, &mut rng)
    })?;
    let report = fit(&mut tuned, data_3, FreezePolicy::Both, cfg, "finetune_vae_dictionary")?;
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{synth_digits, VaeConfig};

    fn tiny_vae() -> DigitVae {
        let cfg = VaeConfig { patch: 14, dim: 8, heads: 2, encoder_layers: 1, decoder_layers: 1, latent: 4, mlp_hidden: 8, kl_weight: 1e-3 };
        DigitVae::new(cfg, &mut SplitMix64::new(0)).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, eval_size: 4, atoms: 6, ..Default::default() }
    }

    #[test]
    fn label_contracts() {
        let mut vae = tiny_vae();
        let threes = synth_digits(0, 8, &[3]).unwrap();
        assert!(pretrain_vae(&threes, &mut vae, &cfg(1)).is_err());
        let highs = synth_digits(0, 8, &[5, 9]).unwrap();
        assert!(finetune_vae_dictionary(&highs, &vae, 6, &cfg(1)).is_err());
    }

    #[test]
    fn zero_init_adapters_match_frozen_and_base_stays_fixed() {
        let mut vae = tiny_vae();
        let highs = synth_digits(1, 12, &[5, 6, 7, 8, 9]).unwrap();
        let r = pretrain_vae(&highs, &mut vae, &cfg(1)).unwrap();
        assert_eq!(r.history.len(), 1);
        let threes = synth_digits(2, 12, &[3]).unwrap();
        let (tuned0, r0) = finetune_vae_dictionary(&threes, &vae, 6, &cfg(0)).unwrap();
        let x = threes.batch(&[0, 1]).unwrap();
        assert_eq!(tuned0.reconstruct(&x).unwrap(), vae.reconstruct(&x).unwrap());
        assert_eq!(r0.initial_eval_loss, evaluate_vae(&vae, &split(&threes, 4).unwrap().1, 0 ^ EVAL_NOISE_SALT, 4).unwrap().loss);

        let (tuned, r) = finetune_vae_dictionary(&threes, &vae, 6, &cfg(2)).unwrap();
        assert_eq!(r.trainable_params, 2 * 8 * 6);
        let base: Vec<_> = vae.snapshot();
        for (name, t) in tuned.snapshot() {
            if let Some((_, b)) = base.iter().find(|(n, _)| *n == name) {
                assert_eq!(t.data(), b.data(), "{name} moved");
            }
        }
    }
}
