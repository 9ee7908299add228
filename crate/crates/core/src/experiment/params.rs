//! Typed views of flat experiment configs. Key names match the fields
//! they set.

use std::path::PathBuf;

use crate::attention::AdapterForm;
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::sparse::ActivationPolicy;
use crate::tasks::{FourierTaskSpec, SignalModelConfig, VaeConfig};
use crate::train::{AdamConfig, FreezePolicy, OptimizerKind, TrainConfig};

pub const FOURIER_KEYS: &[&str] = &["length", "num_bases", "freq_band", "mask_observed"];
pub const TRAIN_KEYS: &[&str] = &[
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "epochs",
    "batch_size",
    "batches_per_epoch",
    "eval_size",
    "ortho_weight",
    "atoms",
    "clip_norm",
];
pub const ACTIVATION_KEYS: &[&str] = &["activation", "lambda", "k", "density"];
pub const SIGNAL_MODEL_KEYS: &[&str] = &["channels", "heads", "form", "value_path"];
pub const VAE_KEYS: &[&str] =
    &["patch", "dim", "heads", "encoder_layers", "decoder_layers", "latent", "mlp_hidden", "kl_weight"];
pub const DIGIT_SOURCE_KEYS: &[&str] = &["train_count", "idx_images", "idx_labels"];

/// Union of key groups plus extras, for `reject_unknown`.
pub fn keys(groups: &[&[&'static str]], extra: &[&'static str]) -> Vec<&'static str> {
    let mut all: Vec<&'static str> = groups.iter().flat_map(|g| g.iter().copied()).chain(extra.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Contract(msg) => Error::Config(msg),
        other => other,
    }
}

pub fn seed(cfg: &FlatConfig) -> Result<u64> {
    cfg.get_or("seed", 0)
}

pub fn fourier_spec(cfg: &FlatConfig, default_band: (usize, usize)) -> Result<FourierTaskSpec> {
    let base = FourierTaskSpec::low(seed(cfg)?);
    let spec = FourierTaskSpec {
        length: cfg.get_or("length", base.length)?,
        num_bases: cfg.get_or("num_bases", base.num_bases)?,
        freq_band: cfg.get_range("freq_band")?.unwrap_or(default_band),
        mask_observed: cfg.get_or("mask_observed", base.mask_observed)?,
        seed: base.seed,
    };
    spec.validate().map_err(as_config)?;
    Ok(spec)
}

/// Explicit activation settings, or `None` when the config names none.
pub fn activation(cfg: &FlatConfig) -> Result<Option<ActivationPolicy>> {
    let kind = cfg.raw("activation");
    if kind.is_none() && !cfg.contains("lambda") && !cfg.contains("k") {
        return Ok(None);
    }
    let lambda = cfg.get_or("lambda", 0.1f32)?;
    let policy = match kind.unwrap_or(if cfg.contains("k") { "top_k" } else { "soft_threshold" }) {
        "soft_threshold" => ActivationPolicy::SoftThreshold { lambda },
        "shifted_relu" => ActivationPolicy::ShiftedRelu { lambda },
        "top_k" => ActivationPolicy::TopK { k: cfg.require("k")? },
        other => return Err(Error::Config(format!("unknown activation `{other}`"))),
    };
    Ok(Some(policy))
}

pub fn train_config(cfg: &FlatConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let o = AdamConfig::default();
    let kind = match cfg.raw("optimizer").unwrap_or("adam") {
        "adam" => OptimizerKind::Adam,
        "adamw" => OptimizerKind::AdamW,
        other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
    };
    let t = TrainConfig {
        optimizer: AdamConfig {
            kind,
            lr: cfg.get_or("lr", o.lr)?,
            beta1: cfg.get_or("beta1", o.beta1)?,
            beta2: cfg.get_or("beta2", o.beta2)?,
            eps: cfg.get_or("eps", o.eps)?,
            weight_decay: cfg.get_or("weight_decay", o.weight_decay)?,
        },
        epochs: cfg.get_or("epochs", d.epochs)?,
        batch_size: cfg.get_or("batch_size", d.batch_size)?,
        batches_per_epoch: cfg.get_or("batches_per_epoch", d.batches_per_epoch)?,
        eval_size: cfg.get_or("eval_size", d.eval_size)?,
        seed: seed(cfg)?,
        activation: activation(cfg)?.unwrap_or(d.activation),
        density_target: cfg.get("density")?,
        ortho_weight: cfg.get_or("ortho_weight", d.ortho_weight)?,
        atoms: cfg.get_or("atoms", d.atoms)?,
        clip_norm: cfg.get_or("clip_norm", d.clip_norm)?,
    };
    t.validate().map_err(as_config)?;
    Ok(t)
}

pub fn signal_model(cfg: &FlatConfig, train: &TrainConfig, length: usize) -> Result<SignalModelConfig> {
    let d = SignalModelConfig::default();
    let m = SignalModelConfig {
        length,
        channels: cfg.get_or("channels", d.channels)?,
        heads: cfg.get_or("heads", d.heads)?,
        atoms: train.atoms,
        activation: train.effective_activation(),
        form: match cfg.raw("form") {
            Some(f) => AdapterForm::parse(f)?,
            None => d.form,
        },
        value_path: cfg.get_or("value_path", d.value_path)?,
    };
    if m.channels == 0 || m.heads == 0 || length % m.heads != 0 {
        return Err(Error::Config(format!("{} heads must divide signal length {length}", m.heads)));
    }
    Ok(m)
}

pub fn vae_config(cfg: &FlatConfig) -> Result<VaeConfig> {
    let d = VaeConfig::default();
    let v = VaeConfig {
        patch: cfg.get_or("patch", d.patch)?,
        dim: cfg.get_or("dim", d.dim)?,
        heads: cfg.get_or("heads", d.heads)?,
        encoder_layers: cfg.get_or("encoder_layers", d.encoder_layers)?,
        decoder_layers: cfg.get_or("decoder_layers", d.decoder_layers)?,
        latent: cfg.get_or("latent", d.latent)?,
        mlp_hidden: cfg.get_or("mlp_hidden", d.mlp_hidden)?,
        kl_weight: cfg.get_or("kl_weight", d.kl_weight)?,
    };
    if v.patch == 0 || 28 % v.patch != 0 || v.heads == 0 || v.dim % v.heads != 0 || v.latent == 0 {
        return Err(Error::Config("VAE needs a patch size dividing 28 and heads dividing dim".into()));
    }
    Ok(v)
}

pub fn policy(cfg: &FlatConfig, default: FreezePolicy) -> Result<FreezePolicy> {
    cfg.raw("policy").map_or(Ok(default), FreezePolicy::parse)
}

/// An input path that must exist before anything runs.
pub fn existing_path(cfg: &FlatConfig, key: &str) -> Result<Option<PathBuf>> {
    match cfg.raw(key) {
        None => Ok(None),
        Some(p) => {
            let path = PathBuf::from(p);
            if path.exists() {
                Ok(Some(path))
            } else {
                Err(Error::MissingPath(path))
            }
        }
    }
}

pub fn require_path(cfg: &FlatConfig, key: &str) -> Result<PathBuf> {
    existing_path(cfg, key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}
