//! Rank-1 stability comparison between a low-rank value update and a
//! top-1 sparse dictionary adapter.
//!
//! A frozen attention block reads `N` canvas tokens whose features are a
//! fixed positional row plus a context embedding (one of `V`). Each method
//! is fitted so that the training context produces one fixed high-band
//! signal, then scored on noisy copies of that context embedding.

use serde::{Deserialize, Serialize};

use crate::attention::{head_mean, AdapterForm, AttentionLayer, LowRankAdapter, Projection, SparseAdapter};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::{ActivationPolicy, NONZERO_EPS};
use crate::tasks::{FourierGenerator, FourierTaskSpec};
use crate::tensor::{Parameterized, Tape, Tensor, Var};
use crate::train::{clip_grad_norm, Adam, AdamConfig};

const LOGIT_SHARPNESS: f32 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelConfig {
    /// Context vocabulary size `V`.
    pub vocab: usize,
    pub embed: usize,
    /// Canvas tokens; also the signal length.
    pub tokens: usize,
    pub c_out: usize,
    pub heads: usize,
    pub atoms: usize,
    pub steps: usize,
    pub lr: f32,
    pub probes: usize,
    /// Probe noise norm relative to the context embedding norm.
    pub probe_noise: f32,
    pub freq_band: (usize, usize),
    pub num_bases: usize,
    pub seed: u64,
}

impl Default for DuelConfig {
    fn default() -> Self {
        Self {
            vocab: 8,
            embed: 96,
            tokens: 64,
            c_out: 32,
            heads: 2,
            atoms: 16,
            steps: 2000,
            lr: 1e-2,
            probes: 5,
            probe_noise: 0.2,
            freq_band: (25, 32),
            num_bases: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub train_loss: f64,
    /// Mean loss over the perturbed contexts.
    pub probe_loss: f64,
    /// Mean over coefficient entries of their variance across all contexts.
    pub coeff_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelReport {
    pub seed: u64,
    pub context: usize,
    /// Mean square of the target signal.
    pub target_power: f64,
    pub sparse: MethodScore,
    pub low_rank: MethodScore,
    pub sparse_probe_losses: Vec<f64>,
    pub low_rank_probe_losses: Vec<f64>,
    /// Every row of top-1 codes has at most one nonzero on every context.
    pub support_ok: bool,
}

impl DuelReport {
    pub fn sparse_wins(&self) -> bool {
        self.sparse.probe_loss <= self.low_rank.probe_loss
    }
}

struct Setup {
    layer: AttentionLayer,
    positions: Tensor,
    readout: Tensor,
    target: Tensor,
    train_context: Tensor,
    probes: Vec<Tensor>,
    context: usize,
}

impl Setup {
    fn new(cfg: &DuelConfig) -> Result<Self> {
        if cfg.vocab == 0 || cfg.tokens == 0 || cfg.embed == 0 || cfg.atoms == 0 || cfg.steps == 0 {
            return Err(Error::Config("duel sizes and step count must be positive".into()));
        }
        let mut rng = SplitMix64::new(cfg.seed);
        let mut layer = AttentionLayer::random(cfg.embed, cfg.c_out, cfg.heads, &mut rng)?;
        // Tied query/key weights with a sharp scale make each canvas token
        // attend mostly to itself.
        layer.w_k = layer.w_q.clone();
        let scale = LOGIT_SHARPNESS / (layer.head_dim() as f32).sqrt();
        let mut layer = layer.with_logit_scale(scale);
        layer.freeze();
        let positions = Tensor::randn(&[cfg.tokens, cfg.embed], 1.0, &mut rng);
        let readout = Tensor::randn(&[cfg.c_out, 1], 1.0 / (cfg.c_out as f32).sqrt(), &mut rng);
        let vocab = Tensor::randn(&[cfg.vocab, cfg.embed], 1.0, &mut rng);
        let context = rng.below(cfg.vocab);
        let train_context = Tensor::new(&[cfg.embed], vocab.row(context).to_vec())?;
        let spec = FourierTaskSpec {
            length: cfg.tokens,
            num_bases: cfg.num_bases,
            freq_band: cfg.freq_band,
            mask_observed: 1,
            seed: cfg.seed ^ 0xD0E1,
        };
        let target = FourierGenerator::new(&spec)?.next_batch(1)?.target;
        let norm = train_context.frobenius() as f32;
        let probes = (0..cfg.probes)
            .map(|_| {
                let noise = Tensor::randn(&[cfg.embed], 1.0, &mut rng);
                let scale = cfg.probe_noise * norm / (noise.frobenius() as f32).max(f32::MIN_POSITIVE);
                train_context.add(&noise.scale(scale))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layer, positions, readout, target, train_context, probes, context })
    }

    /// Canvas features `[B, N, C]` for each context embedding.
    fn inputs(&self, contexts: &[&Tensor]) -> Result<Tensor> {
        let (n, c) = (self.positions.rows(), self.positions.cols());
        let mut data = Vec::with_capacity(contexts.len() * n * c);
        for ctx in contexts {
            for i in 0..n {
                data.extend(self.positions.row(i).iter().zip(ctx.data()).map(|(p, e)| p + e));
            }
        }
        Tensor::new(&[contexts.len(), n, c], data)
    }

    fn all_contexts(&self) -> Vec<&Tensor> {
        std::iter::once(&self.train_context).chain(&self.probes).collect()
    }
}

enum Method<'a> {
    Sparse(&'a SparseAdapter),
    LowRank(&'a LowRankAdapter),
}

struct Pass {
    signal: Var,
    coeffs: Var,
    codes: Option<Var>,
}

fn forward(setup: &Setup, method: &Method, tape: &mut Tape, x: Tensor) -> Result<Pass> {
    let x = tape.constant(x);
    let base = setup.layer.bind(tape, "");
    let readout = tape.constant(setup.readout.clone());
    let (out, coeffs, codes) = match method {
        Method::Sparse(adapter) => {
            let r = setup.layer.attend(tape, &base, x)?;
            let a = head_mean(tape, r.maps, setup.layer.heads)?;
            let aw = adapter.bind(tape, "");
            let ad = adapter.apply(tape, &aw, x, a)?;
            (tape.add(r.out, ad.delta)?, ad.coeffs, Some(ad.codes))
        }
        Method::LowRank(lora) => {
            let w = lora.adapt(tape, "", &base)?;
            let r = setup.layer.attend(tape, &w, x)?;
            let f = lora.factor(Projection::Value).expect("value factor");
            let a_fac = tape.var_by_name("v_a").unwrap_or_else(|| tape.param("v_a", &f.a));
            let xa = tape.matmul(x, a_fac)?;
            let maps = head_mean(tape, r.maps, setup.layer.heads)?;
            (r.out, tape.bmm(maps, xa)?, None)
        }
    };
    let signal = tape.matmul(out, readout)?;
    Ok(Pass { signal, coeffs, codes })
}

fn mse(pred: &Tensor, target: &[f32]) -> Vec<f64> {
    let n = target.len();
    pred.data()
        .chunks_exact(n)
        .map(|row| row.iter().zip(target).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum::<f64>() / n as f64)
        .collect()
}

trait Contender: Parameterized {
    fn method(&self) -> Method<'_>;
}

impl Contender for SparseAdapter {
    fn method(&self) -> Method<'_> {
        Method::Sparse(self)
    }
}

impl Contender for LowRankAdapter {
    fn method(&self) -> Method<'_> {
        Method::LowRank(self)
    }
}

fn fit(setup: &Setup, cfg: &DuelConfig, model: &mut impl Contender) -> Result<()> {
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() })?;
    let x = setup.inputs(&[&setup.train_context])?;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let pass = forward(setup, &model.method(), &mut tape, x.clone())?;
        let target = tape.constant(setup.target.reshape(&[1, cfg.tokens, 1])?);
        let diff = tape.sub(pass.signal, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Numeric("duel training loss".into()));
        }
        tape.backward(loss)?;
        model.pull_grads(&tape);
        clip_grad_norm(model, 1.0);
        opt.step(model)?;
    }
    Ok(())
}

fn score(setup: &Setup, method: &Method) -> Result<(MethodScore, Vec<f64>, bool)> {
    let contexts = setup.all_contexts();
    let mut tape = Tape::new();
    let pass = forward(setup, method, &mut tape, setup.inputs(&contexts)?)?;
    let losses = mse(tape.value(pass.signal), setup.target.data());
    let coeffs = tape.value(pass.coeffs);
    let per = coeffs.numel() / contexts.len();
    let mut var = 0.0;
    for i in 0..per {
        let vals: Vec<f64> = (0..contexts.len()).map(|b| coeffs.data()[b * per + i] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        var += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    }
    let support_ok = match pass.codes {
        Some(c) => {
            let codes = tape.value(c);
            let m = *codes.shape().last().expect("atom axis");
            codes.data().chunks_exact(m).all(|row| row.iter().filter(|v| v.abs() > NONZERO_EPS).count() <= 1)
        }
        None => true,
    };
    let probes = losses[1..].to_vec();
    let probe_loss = if probes.is_empty() { 0.0 } else { probes.iter().sum::<f64>() / probes.len() as f64 };
    Ok((MethodScore { train_loss: losses[0], probe_loss, coeff_variance: var / per as f64 }, probes, support_ok))
}

/// Fits a rank-1 value update and a top-1 sparse adapter to the same
/// context-conditioned target and scores both on perturbed contexts.
pub fn stability_duel(cfg: &DuelConfig) -> Result<DuelReport> {
    let setup = Setup::new(cfg)?;
    let mut rng = SplitMix64::new(cfg.seed).fork(0xD0E1);
    let mut sparse = SparseAdapter::new(
        cfg.embed,
        cfg.c_out,
        cfg.atoms,
        ActivationPolicy::TopK { k: 1 },
        AdapterForm::Implementation,
        &mut rng,
    )?;
    let mut lora = LowRankAdapter::new(&setup.layer, 1, &[Projection::Value], &mut rng)?;
    fit(&setup, cfg, &mut sparse)?;
    fit(&setup, cfg, &mut lora)?;
    let (s, s_probes, support_ok) = score(&setup, &sparse.method())?;
    let (l, l_probes, _) = score(&setup, &lora.method())?;
    Ok(DuelReport {
        seed: cfg.seed,
        context: setup.context,
        target_power: setup.target.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / cfg.tokens as f64,
        sparse: s,
        low_rank: l,
        sparse_probe_losses: s_probes,
        low_rank_probe_losses: l_probes,
        support_ok,
    })
}
