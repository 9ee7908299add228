use std::path::{Path, PathBuf};

use serde_json::json;

use super::params::{self, keys, ACTIVATION_KEYS, DIGIT_SOURCE_KEYS, FOURIER_KEYS, SIGNAL_MODEL_KEYS, TRAIN_KEYS, VAE_KEYS};
use crate::analysis::{atoms_for_mass, layer_atom_mass};
use crate::attention::{save_adapter_bundle, AdapterForm, SparseAdapter};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::ActivationPolicy;
use crate::tasks::{corrupt, load_idx, synth_digits, DigitDataset, DigitVae, FourierTaskSpec, SignalModel, SignalModelConfig, VaeConfig};
use crate::tensor::{load_snapshot, save_snapshot, Parameterized, Tensor};
use crate::train::{
    finetune_signal, finetune_vae_dictionary, pretrain_signal, pretrain_vae, FreezePolicy, RunReport, TrainConfig,
    FINETUNE_CLASSES, NOISE_STD, PRETRAIN_CLASSES,
};

pub const CONFIG_ECHO: &str = "config.txt";
pub const SNAPSHOT_DIR: &str = "snapshot";
/// Share of `|ΔO|` mass the atom-count summary covers.
pub const MASS_FRACTION: f64 = 0.95;
const PROBE_SALT: u64 = 0x9E0B_E5A1;

#[derive(Debug, Clone, PartialEq)]
pub struct DigitSource {
    pub seed: u64,
    pub count: usize,
    pub idx: Option<(PathBuf, PathBuf)>,
}

impl DigitSource {
    fn from_config(cfg: &FlatConfig, seed: u64) -> Result<Self> {
        let idx = match (params::existing_path(cfg, "idx_images")?, params::existing_path(cfg, "idx_labels")?) {
            (Some(i), Some(l)) => Some((i, l)),
            (None, None) => None,
            _ => return Err(Error::Config("idx_images and idx_labels go together".into())),
        };
        Ok(Self { seed, count: cfg.get_or("train_count", 2000)?, idx })
    }

    pub fn load(&self, classes: &[u8]) -> Result<DigitDataset> {
        match &self.idx {
            Some((images, labels)) => {
                let all = load_idx(images, labels)?.filter_classes(classes);
                let n = self.count.min(all.len());
                Ok(all.subset(&(0..n).collect::<Vec<_>>()))
            }
            None => synth_digits(self.seed, self.count, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunPlan {
    PretrainSignal { spec: FourierTaskSpec, model: SignalModelConfig, train: TrainConfig },
    FinetuneSignal {
        spec: FourierTaskSpec,
        source: PathBuf,
        model: SignalModelConfig,
        activation: Option<ActivationPolicy>,
        policy: FreezePolicy,
        train: TrainConfig,
    },
    PretrainVae { data: DigitSource, vae: VaeConfig, train: TrainConfig },
    FinetuneVae { data: DigitSource, source: PathBuf, train: TrainConfig },
}

/// Config and snapshot directory of an earlier run.
fn source_run(cfg: &FlatConfig) -> Result<(PathBuf, FlatConfig)> {
    let dir = params::require_path(cfg, "snapshot")?;
    let snap = dir.join(SNAPSHOT_DIR);
    if !snap.is_dir() {
        return Err(Error::MissingPath(snap));
    }
    Ok((dir.clone(), FlatConfig::load(&dir.join(CONFIG_ECHO))?))
}

fn expect_stage(cfg: &FlatConfig, stage: &str) -> Result<()> {
    match cfg.raw("stage") {
        Some(s) if s == stage => Ok(()),
        Some(s) => Err(Error::Config(format!("snapshot comes from stage `{s}`, expected `{stage}`"))),
        None => Err(Error::Config("snapshot config names no stage".into())),
    }
}

pub fn plan(cfg: &FlatConfig) -> Result<RunPlan> {
    let stage = cfg.require::<String>("stage")?;
    let common = ["stage", "seed"];
    match stage.as_str() {
        "pretrain_signal" => {
            cfg.reject_unknown(&keys(&[FOURIER_KEYS, TRAIN_KEYS, ACTIVATION_KEYS, SIGNAL_MODEL_KEYS], &common))?;
            let spec = params::fourier_spec(cfg, FourierTaskSpec::LOW_BAND)?;
            let train = params::train_config(cfg)?;
            let model = params::signal_model(cfg, &train, spec.length)?;
            Ok(RunPlan::PretrainSignal { spec, model, train })
        }
        "finetune_signal" => {
            cfg.reject_unknown(&keys(&[FOURIER_KEYS, TRAIN_KEYS, ACTIVATION_KEYS], &["stage", "seed", "policy", "snapshot"]))?;
            let spec = params::fourier_spec(cfg, FourierTaskSpec::HIGH_BAND)?;
            let policy = params::policy(cfg, FreezePolicy::AtomsOnly)?;
            if policy == FreezePolicy::FullModel {
                return Err(Error::Config("fine-tuning keeps the base model frozen; use a pretrain stage".into()));
            }
            let (source, src) = source_run(cfg)?;
            expect_stage(&src, "pretrain_signal")?;
            let src_spec = params::fourier_spec(&src, FourierTaskSpec::LOW_BAND)?;
            let model = params::signal_model(&src, &params::train_config(&src)?, src_spec.length)?;
            if spec.length != model.length {
                return Err(Error::Config(format!("length {} differs from the snapshot's {}", spec.length, model.length)));
            }
            let mut train = params::train_config(cfg)?;
            if cfg.contains("atoms") && train.atoms != model.atoms {
                return Err(Error::Config(format!("atoms {} differs from the snapshot's {}", train.atoms, model.atoms)));
            }
            train.atoms = model.atoms;
            train.validate().map_err(|e| Error::Config(e.to_string()))?;
            let explicit = params::activation(cfg)?.is_some() || cfg.contains("density");
            let activation = explicit.then(|| train.effective_activation());
            Ok(RunPlan::FinetuneSignal { spec, source, model, activation, policy, train })
        }
        "pretrain_vae" => {
            cfg.reject_unknown(&keys(&[TRAIN_KEYS, VAE_KEYS, DIGIT_SOURCE_KEYS], &common))?;
            let seed = params::seed(cfg)?;
            Ok(RunPlan::PretrainVae {
                data: DigitSource::from_config(cfg, seed)?,
                vae: params::vae_config(cfg)?,
                train: params::train_config(cfg)?,
            })
        }
        "finetune_vae" => {
            cfg.reject_unknown(&keys(&[TRAIN_KEYS, ACTIVATION_KEYS, DIGIT_SOURCE_KEYS], &["stage", "seed", "snapshot"]))?;
            let (source, src) = source_run(cfg)?;
            expect_stage(&src, "pretrain_vae")?;
            params::vae_config(&src)?;
            let seed = params::seed(cfg)?;
            Ok(RunPlan::FinetuneVae {
                data: DigitSource::from_config(cfg, seed.wrapping_add(1))?,
                source,
                train: params::train_config(cfg)?,
            })
        }
        other => Err(Error::Config(format!(
            "unknown stage `{other}` (expected pretrain_signal, finetune_signal, pretrain_vae or finetune_vae)"
        ))),
    }
}

/// Rebuilds the pre-trained signal model stored in a run directory.
pub fn load_signal_model(dir: &Path, config: SignalModelConfig) -> Result<SignalModel> {
    let mut model = SignalModel::new(config, &mut SplitMix64::new(0))?;
    load_snapshot(&mut model, dir.join(SNAPSHOT_DIR))?;
    Ok(model)
}

/// Rebuilds a VAE stored in a run directory, with decoder adapters when
/// the run fine-tuned them.
pub fn load_vae(dir: &Path) -> Result<DigitVae> {
    let src = FlatConfig::load(&dir.join(CONFIG_ECHO))?;
    let mut vae = if src.raw("stage") == Some("finetune_vae") {
        let base = FlatConfig::load(&PathBuf::from(src.require::<String>("snapshot")?).join(CONFIG_ECHO))?;
        let mut vae = DigitVae::new(params::vae_config(&base)?, &mut SplitMix64::new(0))?;
        let train = params::train_config(&src)?;
        let dim = vae.config.dim;
        let mut rng = SplitMix64::new(0);
        vae.attach_decoder_adapters(&mut |_| {
            SparseAdapter::new(dim, dim, train.atoms, train.effective_activation(), AdapterForm::Implementation, &mut rng)
        })?;
        vae
    } else {
        DigitVae::new(params::vae_config(&src)?, &mut SplitMix64::new(0))?
    };
    load_snapshot(&mut vae, dir.join(SNAPSHOT_DIR))?;
    Ok(vae)
}

/// Noisy digit-3 inputs for post-hoc analysis.
pub fn digit_probe(seed: u64, count: usize) -> Result<Tensor> {
    let data = synth_digits(seed ^ PROBE_SALT, count, &FINETUNE_CLASSES)?;
    let clean = data.batch(&(0..data.len()).collect::<Vec<_>>())?;
    Ok(corrupt(&clean, NOISE_STD, &mut SplitMix64::new(seed ^ PROBE_SALT)))
}

fn finish(out: &Path, mut report: RunReport, model: &dyn Parameterized) -> Result<Option<String>> {
    save_snapshot(model, out.join(SNAPSHOT_DIR))?;
    report.snapshot = Some(SNAPSHOT_DIR.to_string());
    report.write(out)?;
    Ok(report.failure)
}

impl RunPlan {
    pub fn execute(&self, out: &Path) -> Result<Option<String>> {
        match self {
            RunPlan::PretrainSignal { spec, model, train } => {
                let mut m = SignalModel::new(model.clone(), &mut SplitMix64::new(train.seed))?;
                let report = pretrain_signal(spec, &mut m, train)?;
                finish(out, report, &m)
            }
            RunPlan::FinetuneSignal { spec, source, model, activation, policy, train } => {
                let mut base = load_signal_model(source, model.clone())?;
                if let Some(a) = activation {
                    base.adapter.activation = *a;
                    base.config.activation = *a;
                }
                let (tuned, report) = finetune_signal(spec, &base, *policy, train)?;
                save_adapter_bundle(&tuned.adapter, &out.join("adapter"))?;
                finish(out, report, &tuned)
            }
            RunPlan::PretrainVae { data, vae, train } => {
                let images = data.load(&PRETRAIN_CLASSES)?;
                let mut model = DigitVae::new(vae.clone(), &mut SplitMix64::new(train.seed))?;
                let report = pretrain_vae(&images, &mut model, train)?;
                finish(out, report, &model)
            }
            RunPlan::FinetuneVae { data, source, train } => {
                let images = data.load(&FINETUNE_CLASSES)?;
                let base = load_vae(source)?;
                let (tuned, report) = finetune_vae_dictionary(&images, &base, train.atoms, train)?;
                for (i, layer) in tuned.decoder.iter().enumerate() {
                    if let Some(a) = &layer.adapter {
                        save_adapter_bundle(a, &out.join(format!("adapters/layer{i}")))?;
                    }
                }
                let probe = digit_probe(train.seed, train.eval_size)?;
                let layers: Vec<_> = layer_atom_mass(&tuned, &probe)?
                    .into_iter()
                    .enumerate()
                    .map(|(layer, mass)| json!({ "layer": layer, "atoms_for_mass": atoms_for_mass(&mass, MASS_FRACTION), "mass": mass }))
                    .collect();
                let summary = json!({ "mass_fraction": MASS_FRACTION, "layers": layers });
                std::fs::write(out.join("atom_mass.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
                finish(out, report, &tuned)
            }
        }
    }
}
