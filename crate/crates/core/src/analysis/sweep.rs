use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::ActivationPolicy;
use crate::tasks::{FourierGenerator, FourierTaskSpec, SignalModel, SignalModelConfig};
use crate::train::{evaluate_signal, finetune_signal, pretrain_signal, FreezePolicy, TrainConfig};

pub const SWEEP_HEADER: &str = "axis_value,eval_loss,transfer_loss,density";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Coefficient density `ρ`, realized as top-k with `k = round(ρ·M)`.
    Density,
    /// Dictionary size `M`.
    Atoms,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Density => "rho",
            SweepAxis::Atoms => "atoms",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rho" | "density" => Ok(SweepAxis::Density),
            "atoms" | "m" | "M" => Ok(SweepAxis::Atoms),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected rho or atoms)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub model: SignalModelConfig,
    pub low: FourierTaskSpec,
    pub high: FourierTaskSpec,
    /// Held-out bands are the fine-tuning band moved down by this many bins.
    pub transfer_shift: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub policy: FreezePolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub eval_loss: f64,
    pub transfer_loss: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.axis_value, r.eval_loss, r.transfer_loss, r.density);
        }
        s
    }

    /// Whether eval loss never increases along the table.
    pub fn eval_non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].eval_loss <= w[0].eval_loss)
    }
}

fn shifted(spec: &FourierTaskSpec, shift: usize) -> FourierTaskSpec {
    let (lo, hi) = spec.freq_band;
    let shift = shift.min(lo);
    FourierTaskSpec { freq_band: (lo - shift, hi - shift), seed: spec.seed ^ 0x7EA5_F00D, ..spec.clone() }
}

fn pretrained(cfg: &SweepConfig, model_cfg: SignalModelConfig) -> Result<SignalModel> {
    let mut model = SignalModel::new(model_cfg, &mut SplitMix64::new(cfg.seed))?;
    let pre = TrainConfig { atoms: model.config.atoms, seed: cfg.seed, ..cfg.pretrain.clone() };
    let report = pretrain_signal(&cfg.low, &mut model, &pre)?;
    if let Some(f) = report.failure {
        return Err(Error::Numeric(format!("pre-training: {f}")));
    }
    Ok(model)
}

fn top_k(rho: f64, atoms: usize) -> usize {
    ((rho * atoms as f64).round() as usize).clamp(1, atoms)
}

/// Fine-tunes one model per axis value and tabulates eval loss on the
/// fine-tuning band, loss on a shifted held-out band, and coefficient density.
/// Rows follow the order of `values`.
pub fn ablation_sweep(axis: SweepAxis, values: &[f64], cfg: &SweepConfig) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let transfer_spec = shifted(&cfg.high, cfg.transfer_shift);
    let transfer = FourierGenerator::new(&transfer_spec)?.next_batch(cfg.finetune.eval_size)?;
    let shared = match axis {
        SweepAxis::Density => Some(pretrained(cfg, cfg.model.clone())?),
        SweepAxis::Atoms => None,
    };
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut base = match (&shared, axis) {
            (Some(m), _) => m.clone(),
            (None, _) => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!("dictionary size must be a positive integer, got {v}")));
                }
                pretrained(cfg, SignalModelConfig { atoms: v as usize, ..cfg.model.clone() })?
            }
        };
        let atoms = base.config.atoms;
        let mut ft = TrainConfig { atoms, seed: cfg.seed, ..cfg.finetune.clone() };
        if axis == SweepAxis::Density {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("density must lie in (0, 1], got {v}")));
            }
            let activation = ActivationPolicy::TopK { k: top_k(v, atoms) };
            base.adapter.activation = activation;
            base.config.activation = activation;
            ft.density_target = Some(v);
        }
        let (model, report) = finetune_signal(&cfg.high, &base, cfg.policy, &ft)?;
        if let Some(f) = report.failure {
            return Err(Error::Numeric(format!("fine-tuning at {v}: {f}")));
        }
        let held_out = evaluate_signal(&model, &transfer)?;
        let density = report.history.last().map_or(held_out.density, |h| h.density);
        rows.push(SweepRow { axis_value: v, eval_loss: report.final_eval_loss, transfer_loss: held_out.loss, density });
    }
    Ok(SweepTable { axis, rows })
}
