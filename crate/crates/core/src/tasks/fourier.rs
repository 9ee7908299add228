use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Masked band-limited signal reconstruction task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTaskSpec {
    pub length: usize,
    pub num_bases: usize,
    /// Inclusive range of integer frequencies, in cycles per `length`.
    pub freq_band: (usize, usize),
    pub mask_observed: usize,
    pub seed: u64,
}

impl FourierTaskSpec {
    pub const LOW_BAND: (usize, usize) = (0, 24);
    pub const HIGH_BAND: (usize, usize) = (25, 32);

    pub fn low(seed: u64) -> Self {
        Self { length: 64, num_bases: 5, freq_band: Self::LOW_BAND, mask_observed: 16, seed }
    }

    pub fn high(seed: u64) -> Self {
        Self { freq_band: Self::HIGH_BAND, ..Self::low(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.freq_band;
        if lo > hi {
            return Err(Error::contract(format!("frequency band {lo}..{hi} is empty")));
        }
        if self.length == 0 || self.num_bases == 0 {
            return Err(Error::contract("signal length and basis count must be positive"));
        }
        if self.mask_observed > self.length {
            return Err(Error::contract(format!(
                "cannot observe {} of {} positions",
                self.mask_observed, self.length
            )));
        }
        Ok(())
    }
}

/// `[batch, length]` each. `masked = target ⊙ mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBatch {
    pub masked: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
}

impl FourierBatch {
    pub fn len(&self) -> usize {
        self.target.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws successive batches from one seeded stream.
#[derive(Debug, Clone)]
pub struct FourierGenerator {
    spec: FourierTaskSpec,
    rng: SplitMix64,
}

impl FourierGenerator {
    pub fn new(spec: &FourierTaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec: spec.clone(), rng: SplitMix64::new(spec.seed) })
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<FourierBatch> {
        if batch == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let s = &self.spec;
        let (lo, hi) = s.freq_band;
        let n = s.length;
        let picks = s.num_bases.min(hi - lo + 1);
        let mut target = vec![0.0f32; batch * n];
        let mut mask = vec![0.0f32; batch * n];
        for b in 0..batch {
            let mut sig = vec![0.0f64; n];
            for f in self.rng.sample_distinct(hi - lo + 1, picks) {
                let freq = (lo + f) as f64;
                let amp = self.rng.uniform(-1.0, 1.0) as f64;
                let use_cos = self.rng.coin();
                for (t, v) in sig.iter_mut().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI * freq * t as f64 / n as f64;
                    *v += amp * if use_cos { phase.cos() } else { phase.sin() };
                }
            }
            for (dst, v) in target[b * n..(b + 1) * n].iter_mut().zip(&sig) {
                *dst = *v as f32;
            }
            for t in self.rng.sample_distinct(n, s.mask_observed) {
                mask[b * n + t] = 1.0;
            }
        }
        let target = Tensor::new(&[batch, n], target)?;
        let mask = Tensor::new(&[batch, n], mask)?;
        let masked = target.hadamard(&mask)?;
        Ok(FourierBatch { masked, mask, target })
    }
}

pub fn gen_fourier_batch(spec: &FourierTaskSpec, batch: usize) -> Result<FourierBatch> {
    FourierGenerator::new(spec)?.next_batch(batch)
}
