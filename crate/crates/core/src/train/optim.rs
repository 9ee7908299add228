use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// One Adam update of `param` in place. `step` is the 1-based step number
/// used for bias correction.
pub fn adam_step(param: &mut [f32], grad: &[f32], state: &mut Moments, step: u64, cfg: &AdamConfig) {
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let step_size = (cfg.lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let decay = match cfg.kind {
        OptimizerKind::AdamW => cfg.lr * cfg.weight_decay,
        OptimizerKind::Adam => 0.0,
    };
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = match cfg.kind {
            OptimizerKind::Adam => g + cfg.weight_decay * *p,
            OptimizerKind::AdamW => g,
        };
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        if decay != 0.0 {
            *p -= decay * *p;
        }
        *p -= step_size * *m / (v.sqrt() / bc2_sqrt + cfg.eps);
    }
}

/// Adam over the trainable tensors of a model, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, state: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the gradients held on the model's trainable tensors. Tensors
    /// without a gradient are skipped.
    pub fn step(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        let mut bad = None;
        model.visit_params(&mut |name, t| {
            if bad.is_none() && t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("gradient of `{name}`")));
        }
        self.step += 1;
        let (step, cfg) = (self.step, self.config);
        let state = &mut self.state;
        model.visit_params_mut(&mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let Some(g) = t.take_grad() else { return };
            let moments = state.entry(name.to_string()).or_default();
            adam_step(t.data_mut(), &g, moments, step, &cfg);
            t.set_grad(Some(g)).expect("gradient keeps its shape");
        });
        Ok(())
    }
}

/// Global L2 norm of all gradients on the model.
pub fn grad_norm(model: &dyn Parameterized) -> f64 {
    let mut s = 0.0f64;
    model.visit_params(&mut |_, t| {
        if let Some(g) = t.grad() {
            s += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    });
    s.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut dyn Parameterized, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        model.visit_params_mut(&mut |_, t| {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|x| *x *= scale);
                t.set_grad(Some(g)).expect("gradient keeps its shape");
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl Parameterized for One {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.0);
        }
    }

    fn one(w: f32) -> One {
        One(Tensor::new(&[1], vec![w]).unwrap().with_grad(true))
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_the_step() {
        let mut m = one(2.0);
        m.0.set_grad(Some(vec![0.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.data(), &[2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = one(1.0);
        m.0.set_grad(Some(vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        opt.step(&mut m).unwrap();
        assert!((m.0.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn descends_a_parabola_monotonically() {
        // Reference simulation of Adam on w² in f64.
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut mm, mut vv) = (1.0f64, 0.0, 0.0);
        let mut model = one(1.0);
        let mut opt = Adam::new(AdamConfig { lr: lr as f32, ..Default::default() }).unwrap();
        let mut last = 1.0f32;
        for t in 1..=10 {
            let g = 2.0 * w;
            mm = b1 * mm + (1.0 - b1) * g;
            vv = b2 * vv + (1.0 - b2) * g * g;
            w -= lr * (mm / (1.0 - b1.powi(t))) / ((vv / (1.0 - b2.powi(t))).sqrt() + eps);

            let cur = model.0.data()[0];
            model.0.set_grad(Some(vec![2.0 * cur])).unwrap();
            opt.step(&mut model).unwrap();
            let now = model.0.data()[0].abs();
            assert!(now < last);
            last = now;
            assert!((model.0.data()[0] as f64 - w).abs() < 1e-5);
        }
    }

    #[test]
    fn adamw_decays_without_gradient_signal() {
        let mut m = one(1.0);
        m.0.set_grad(Some(vec![0.0])).unwrap();
        let mut opt = Adam::new(AdamConfig { kind: OptimizerKind::AdamW, lr: 0.1, weight_decay: 0.5, ..Default::default() }).unwrap();
        opt.step(&mut m).unwrap();
        assert!((m.0.data()[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut m = one(1.0);
        m.0.set_grad(Some(vec![f32::NAN])).unwrap();
        let err = Adam::new(AdamConfig::default()).unwrap().step(&mut m).unwrap_err();
        assert!(matches!(&err, Error::Numeric(s) if s.contains("`w`")), "{err}");
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut m = One(Tensor::zeros(&[2]).with_grad(true));
        m.0.set_grad(Some(vec![3.0, 4.0])).unwrap();
        assert_eq!(clip_grad_norm(&mut m, 1.0), 5.0);
        assert!((grad_norm(&m) - 1.0).abs() < 1e-6);
        assert_eq!(m.0.grad().unwrap(), &[0.6, 0.8]);
    }
}
