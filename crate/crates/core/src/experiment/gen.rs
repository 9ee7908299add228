use std::path::{Path, PathBuf};

use super::params::{self, keys, FOURIER_KEYS};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::tasks::{gen_fourier_batch, load_idx, synth_digits, FourierTaskSpec};
use crate::tensor::write_tensor;

pub(super) enum GenPlan {
    Fourier { spec: FourierTaskSpec, count: usize },
    Digits { seed: u64, count: usize, classes: Vec<u8>, idx: Option<(PathBuf, PathBuf)> },
}

pub(super) fn plan(cfg: &FlatConfig) -> Result<GenPlan> {
    let task = cfg.raw("task").unwrap_or("fourier");
    match task {
        "fourier" => {
            cfg.reject_unknown(&keys(&[FOURIER_KEYS], &["task", "seed", "count"]))?;
            Ok(GenPlan::Fourier {
                spec: params::fourier_spec(cfg, FourierTaskSpec::LOW_BAND)?,
                count: cfg.get_or("count", 256)?,
            })
        }
        "digits" => {
            cfg.reject_unknown(&["task", "seed", "count", "classes", "idx_images", "idx_labels"])?;
            let classes: Vec<u8> = cfg.get_list("classes")?.unwrap_or_else(|| (0..10).collect());
            if let Some(&bad) = classes.iter().find(|&&c| c > 9) {
                return Err(Error::Config(format!("digit class {bad} is out of range")));
            }
            let idx = match (params::existing_path(cfg, "idx_images")?, params::existing_path(cfg, "idx_labels")?) {
                (Some(i), Some(l)) => Some((i, l)),
                (None, None) => None,
                _ => return Err(Error::Config("idx_images and idx_labels go together".into())),
            };
            Ok(GenPlan::Digits { seed: params::seed(cfg)?, count: cfg.get_or("count", 1000)?, classes, idx })
        }
        other => Err(Error::Config(format!("unknown task `{other}` (expected fourier or digits)"))),
    }
}

impl GenPlan {
    pub(super) fn execute(&self, out: &Path) -> Result<Option<String>> {
        match self {
            GenPlan::Fourier { spec, count } => {
                if *count > 0 {
                    let batch = gen_fourier_batch(spec, *count)?;
                    write_tensor(&batch.masked, out.join("masked.atns"))?;
                    write_tensor(&batch.mask, out.join("mask.atns"))?;
                    write_tensor(&batch.target, out.join("target.atns"))?;
                }
            }
            GenPlan::Digits { seed, count, classes, idx } => {
                let data = match idx {
                    Some((images, labels)) => {
                        let all = load_idx(images, labels)?.filter_classes(classes);
                        let n = (*count).min(all.len());
                        all.subset(&(0..n).collect::<Vec<_>>())
                    }
                    None => synth_digits(*seed, *count, classes)?,
                };
                if !data.is_empty() {
                    data.save(out)?;
                }
            }
        }
        Ok(None)
    }
}
