use super::optim::{clip_grad_norm, Adam};
use super::policy::FreezePolicy;
use super::report::{EpochRecord, RunReport};
use super::{atom_usage, TrainConfig};
use crate::error::{Error, Result};
use crate::sparse::{density_of, ortho_penalty};
use crate::tasks::{FourierBatch, FourierGenerator, FourierTaskSpec, SignalModel};
use crate::tensor::{Parameterized, Tape};

/// Held-out data is drawn from a stream offset from the training seed.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalEval {
    pub loss: f64,
    pub density: f64,
    pub usage: Vec<u64>,
}

fn eval_batch(spec: &FourierTaskSpec, size: usize) -> Result<FourierBatch> {
    let spec = FourierTaskSpec { seed: spec.seed.wrapping_add(EVAL_SEED_OFFSET), ..spec.clone() };
    FourierGenerator::new(&spec)?.next_batch(size)
}

/// Full-signal MSE, code density and atom usage on `batch`.
pub fn evaluate_signal(model: &SignalModel, batch: &FourierBatch) -> Result<SignalEval> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.masked, &batch.mask)?;
    let pred = tape.value(out.prediction);
    let loss = pred
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum::<f64>()
        / pred.numel() as f64;
    let codes = tape.value(out.codes).data();
    Ok(SignalEval { loss, density: density_of(codes), usage: atom_usage(codes, model.adapter.atoms()) })
}

fn train_step(model: &mut SignalModel, batch: &FourierBatch, cfg: &TrainConfig, opt: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.masked, &batch.mask)?;
    let target = tape.constant(batch.target.clone());
    let diff = tape.sub(out.prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    let task = tape.mean(sq)?;
    let task_value = tape.value(task).item() as f64;
    let mut loss = task;
    if cfg.ortho_weight > 0.0 && model.adapter.d.requires_grad() {
        let d = tape.var_by_name("adapter.d").expect("dictionary is bound by forward");
        let pen = ortho_penalty(&mut tape, d)?;
        let pen = tape.scale(pen, cfg.ortho_weight)?;
        loss = tape.add(loss, pen)?;
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric("training loss".into()));
    }
    tape.backward(loss)?;
    model.pull_grads(&tape);
    clip_grad_norm(model, cfg.clip_norm);
    opt.step(model)?;
    Ok(task_value)
}

fn fit(model: &mut SignalModel, spec: &FourierTaskSpec, policy: FreezePolicy, cfg: &TrainConfig, stage: &str) -> Result<RunReport> {
    cfg.validate()?;
    policy.apply(model);
    let eval = eval_batch(spec, cfg.eval_size)?;
    let mut train = FourierGenerator::new(spec)?;
    let mut opt = Adam::new(cfg.optimizer)?;
    let first = evaluate_signal(model, &eval)?;
    let mut report = RunReport {
        stage: stage.to_string(),
        seed: cfg.seed,
        initial_eval_loss: first.loss,
        final_eval_loss: first.loss,
        trainable_params: model.trainable_param_count(),
        atom_usage: first.usage,
        ..Default::default()
    };
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch = train.next_batch(cfg.batch_size)?;
            match train_step(model, &batch, cfg, &mut opt) {
                Ok(l) => total += l,
                Err(Error::Numeric(what)) => {
                    report.failure = Some(format!("epoch {epoch}: non-finite {what}"));
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
        }
        let ev = evaluate_signal(model, &eval)?;
        report.history.push(EpochRecord {
            epoch,
            train_loss: total / cfg.batches_per_epoch as f64,
            eval_loss: ev.loss,
            density: ev.density,
        });
        report.final_eval_loss = ev.loss;
        report.atom_usage = ev.usage;
    }
    Ok(report)
}

/// Trains every parameter except the fixed input projection on `spec_low`.
pub fn pretrain_signal(spec_low: &FourierTaskSpec, model: &mut SignalModel, cfg: &TrainConfig) -> Result<RunReport> {
    fit(model, spec_low, FreezePolicy::FullModel, cfg, "pretrain_signal")
}

/// Fine-tunes a copy of `pretrained` on `spec_high`, training only what
/// `policy` allows.
pub fn finetune_signal(
    spec_high: &FourierTaskSpec,
    pretrained: &SignalModel,
    policy: FreezePolicy,
    cfg: &TrainConfig,
) -> Result<(SignalModel, RunReport)> {
    if policy == FreezePolicy::FullModel {
        return Err(Error::Config("fine-tuning keeps the base model frozen; full_model is for pre-training".into()));
    }
    let mut model = pretrained.clone();
    let report = fit(&mut model, spec_high, policy, cfg, &format!("finetune_signal_{}", policy.name()))?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tasks::SignalModelConfig;

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, batches_per_epoch: 3, eval_size: 16, atoms: 12, ..Default::default() }
    }

    fn tiny_model() -> SignalModel {
        let cfg = SignalModelConfig { length: 16, channels: 8, heads: 2, atoms: 12, ..Default::default() };
        SignalModel::new(cfg, &mut SplitMix64::new(0)).unwrap()
    }

    fn tiny_spec(band: (usize, usize)) -> FourierTaskSpec {
        FourierTaskSpec { length: 16, num_bases: 3, freq_band: band, mask_observed: 6, seed: 4 }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut m = tiny_model();
        let before = m.clone();
        let r = pretrain_signal(&tiny_spec((0, 4)), &mut m, &tiny_cfg(0)).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(m.snapshot(), before.snapshot());
    }

    #[test]
    fn runs_are_deterministic_and_respect_freezing() {
        let spec = tiny_spec((0, 4));
        let mut a = tiny_model();
        let mut b = tiny_model();
        let ra = pretrain_signal(&spec, &mut a, &tiny_cfg(2)).unwrap();
        let rb = pretrain_signal(&spec, &mut b, &tiny_cfg(2)).unwrap();
        assert_eq!(ra.history_csv(), rb.history_csv());
        assert_eq!(ra.history.len(), 2);
        assert_eq!(a.projection, tiny_model().projection);

        let high = tiny_spec((5, 8));
        let (atoms, r) = finetune_signal(&high, &a, FreezePolicy::AtomsOnly, &tiny_cfg(1)).unwrap();
        assert_eq!(atoms.adapter.w_s.data(), a.adapter.w_s.data());
        assert_ne!(atoms.adapter.d.data(), a.adapter.d.data());
        assert_eq!(atoms.attention.w_q.data(), a.attention.w_q.data());
        assert_eq!(r.trainable_params, 12 * 16);
        let (coeffs, _) = finetune_signal(&high, &a, FreezePolicy::CoefficientsOnly, &tiny_cfg(1)).unwrap();
        assert_eq!(coeffs.adapter.d.data(), a.adapter.d.data());
        assert_ne!(coeffs.adapter.w_s.data(), a.adapter.w_s.data());
        assert!(finetune_signal(&high, &a, FreezePolicy::FullModel, &tiny_cfg(1)).is_err());
    }
}
