use serde::{Deserialize, Serialize};

use super::join;
use super::layer::{as_batch, AttentionLayer};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sparse::ActivationPolicy;
use crate::tensor::{Parameterized, Tape, Tensor, Var};

pub const COEFF_INIT_STD: f32 = 0.02;

/// Where the attention map enters the sparse code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterForm {
    /// `ΔO = A·σ(X·W_s)·D`
    #[default]
    Implementation,
    /// `ΔO = σ(A·X·W_s)·D`
    Formulation,
}

impl AdapterForm {
    pub fn name(self) -> &'static str {
        match self {
            AdapterForm::Implementation => "implementation",
            AdapterForm::Formulation => "formulation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "implementation" => Ok(AdapterForm::Implementation),
            "formulation" => Ok(AdapterForm::Formulation),
            _ => Err(Error::Config(format!("unknown adapter form `{s}`"))),
        }
    }
}

/// Sparse dictionary adapter: a coefficient encoder `W_s: [C_i, M]` and an
/// atom dictionary `D: [M, C_o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdapter {
    pub w_s: Tensor,
    pub d: Tensor,
    pub activation: ActivationPolicy,
    pub form: AdapterForm,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterWeights {
    pub w_s: Var,
    pub d: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterOutput {
    /// `[B, N, C_o]`
    pub delta: Var,
    /// Output of the sparsifying activation, `[B, N, M]`.
    pub codes: Var,
    /// Coefficients that multiply `D` directly, `[B, N, M]`. Equal to
    /// `codes` in the formulation form, `A·codes` otherwise.
    pub coeffs: Var,
}

/// Plain-tensor result of [`adapter_forward`].
#[derive(Debug, Clone)]
pub struct AdapterResult {
    pub delta: Tensor,
    pub codes: Tensor,
    pub coeffs: Tensor,
}

impl SparseAdapter {
    /// `W_s ~ N(0, 0.02²)`, `D = 0`.
    pub fn new(
        c_in: usize,
        c_out: usize,
        atoms: usize,
        activation: ActivationPolicy,
        form: AdapterForm,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if atoms == 0 {
            return Err(Error::contract("a sparse adapter needs at least one atom"));
        }
        let w_s = Tensor::randn(&[c_in, atoms], COEFF_INIT_STD, rng).with_grad(true);
        let d = Tensor::zeros(&[atoms, c_out]).with_grad(true);
        Self::from_parts(w_s, d, activation, form)
    }

    pub fn from_parts(w_s: Tensor, d: Tensor, activation: ActivationPolicy, form: AdapterForm) -> Result<Self> {
        let (_, m) = w_s.dims2("sparse adapter")?;
        let (md, _) = d.dims2("sparse adapter")?;
        if m != md {
            return Err(Error::dim("sparse adapter", format!("W_s has {m} atoms, D has {md}")));
        }
        activation.validate(m)?;
        Ok(Self { w_s, d, activation, form })
    }

    pub fn atoms(&self) -> usize {
        self.d.rows()
    }

    pub fn c_in(&self) -> usize {
        self.w_s.rows()
    }

    pub fn c_out(&self) -> usize {
        self.d.cols()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> AdapterWeights {
        AdapterWeights { w_s: tape.param(&join(prefix, "w_s"), &self.w_s), d: tape.param(&join(prefix, "d"), &self.d) }
    }

    /// `x: [B, N, C_i]`, `a: [B, N, N]`.
    pub fn apply(&self, tape: &mut Tape, w: &AdapterWeights, x: Var, a: Var) -> Result<AdapterOutput> {
        let (xs, as_) = (tape.shape(x).to_vec(), tape.shape(a).to_vec());
        if xs.len() != 3 || xs[2] != self.c_in() || as_.len() != 3 || as_[0] != xs[0] || as_[1] != xs[1] || as_[2] != xs[1]
        {
            return Err(Error::dim(
                "sparse adapter",
                format!("input {xs:?} with attention {as_:?}, adapter expects C_i = {}", self.c_in()),
            ));
        }
        let (codes, coeffs) = match self.form {
            AdapterForm::Implementation => {
                let pre = tape.matmul(x, w.w_s)?;
                let codes = self.activation.apply(tape, pre)?;
                (codes, tape.bmm(a, codes)?)
            }
            AdapterForm::Formulation => {
                let ax = tape.bmm(a, x)?;
                let pre = tape.matmul(ax, w.w_s)?;
                let codes = self.activation.apply(tape, pre)?;
                (codes, codes)
            }
        };
        let delta = tape.matmul(coeffs, w.d)?;
        Ok(AdapterOutput { delta, codes, coeffs })
    }
}

impl Parameterized for SparseAdapter {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_s", &self.w_s);
        f("d", &self.d);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_s", &mut self.w_s);
        f("d", &mut self.d);
    }
}

/// Averages per-head maps `[B·H, N, N]` into one map per sequence `[B, N, N]`.
pub fn head_mean(tape: &mut Tape, maps: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(maps);
    }
    let s = tape.shape(maps).to_vec();
    let [bh, n, _] = s[..] else {
        return Err(Error::dim("head_mean", format!("expected [B*H, N, N], got {s:?}")));
    };
    let r = tape.reshape(maps, &[bh / heads, heads, n, n])?;
    tape.mean_axis(r, 1)
}

/// Sparse adapter on one sequence: `x: [N, C_i]`, attention map `a: [N, N]`.
pub fn adapter_forward(adapter: &SparseAdapter, x: &Tensor, a: &Tensor) -> Result<AdapterResult> {
    let (n, _) = x.dims2("adapter_forward")?;
    if a.shape() != [n, n] {
        return Err(Error::dim("adapter_forward", format!("attention {:?} for {n} tokens", a.shape())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(as_batch(x)?);
    let av = tape.constant(a.reshape(&[1, n, n])?);
    let w = adapter.bind(&mut tape, "");
    let r = adapter.apply(&mut tape, &w, xv, av)?;
    let m = adapter.atoms();
    Ok(AdapterResult {
        delta: tape.value(r.delta).reshape(&[n, adapter.c_out()])?,
        codes: tape.value(r.codes).reshape(&[n, m])?,
        coeffs: tape.value(r.coeffs).reshape(&[n, m])?,
    })
}

/// `O + ΔO` for one sequence, with the adapter reading the head-mean map.
pub fn adapted_attention_forward(layer: &AttentionLayer, adapter: &SparseAdapter, x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2("adapted_attention_forward")?;
    if adapter.c_in() != layer.c_in() || adapter.c_out() != layer.c_out() {
        return Err(Error::dim(
            "adapted_attention_forward",
            format!(
                "adapter [{}, {}] on layer [{}, {}]",
                adapter.c_in(),
                adapter.c_out(),
                layer.c_in(),
                layer.c_out()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(as_batch(x)?);
    let lw = layer.bind(&mut tape, "layer");
    let aw = adapter.bind(&mut tape, "adapter");
    let base = layer.attend(&mut tape, &lw, xv)?;
    let a = head_mean(&mut tape, base.maps, layer.heads)?;
    let delta = adapter.apply(&mut tape, &aw, xv, a)?.delta;
    let out = tape.add(base.out, delta)?;
    tape.value(out).reshape(&[n, layer.c_out()])
}

/// Which atoms [`select_atoms`] keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtomSelection {
    Indices(Vec<usize>),
    /// The `n` atoms with the largest [`atom_importance`].
    Count(usize),
}

/// Mean of `|S|` down each column.
pub fn atom_importance(coeffs: &Tensor) -> Result<Vec<f32>> {
    let (n, m) = coeffs.dims2("atom_importance")?;
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        for (a, v) in acc.iter_mut().zip(coeffs.row(i)) {
            *a += v.abs() as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// Indices of the `count` most important atoms; ties go to the lower index.
pub(crate) fn top_atoms(coeffs: &Tensor, count: usize) -> Result<Vec<usize>> {
    let imp = atom_importance(coeffs)?;
    let mut idx: Vec<usize> = (0..imp.len()).collect();
    idx.sort_by(|&i, &j| imp[j].total_cmp(&imp[i]));
    idx.truncate(count.min(imp.len()));
    Ok(idx)
}

/// `ΔO` recomputed from `coeffs: [N, M]` with every column outside `keep`
/// zeroed.
pub fn select_atoms(adapter: &SparseAdapter, coeffs: &Tensor, keep: &AtomSelection) -> Result<Tensor> {
    let (n, m) = coeffs.dims2("select_atoms")?;
    if m != adapter.atoms() {
        return Err(Error::dim("select_atoms", format!("{m} coefficient columns for {} atoms", adapter.atoms())));
    }
    let kept = match keep {
        AtomSelection::Indices(ix) => {
            if let Some(&bad) = ix.iter().find(|&&i| i >= m) {
                return Err(Error::contract(format!("atom index {bad} out of range for {m} atoms")));
            }
            ix.clone()
        }
        AtomSelection::Count(c) => top_atoms(coeffs, *c)?,
    };
    let mut mask = vec![0.0f32; m];
    for i in kept {
        mask[i] = 1.0;
    }
    let mut masked = coeffs.clone();
    for r in 0..n {
        for (j, &k) in mask.iter().enumerate() {
            if k == 0.0 {
                masked.set(r, j, 0.0);
            }
        }
    }
    masked.matmul(&adapter.d)
}

/// Per-atom outer products `S[:, m] ⊗ D[m, :]`; they sum to `ΔO`.
pub fn atom_contributions(coeffs: &Tensor, d: &Tensor) -> Result<Vec<Tensor>> {
    let (n, m) = coeffs.dims2("atom_contributions")?;
    let (md, c) = d.dims2("atom_contributions")?;
    if m != md {
        return Err(Error::dim("atom_contributions", format!("{m} coefficient columns for {md} atoms")));
    }
    (0..m)
        .map(|j| {
            let mut out = Tensor::zeros(&[n, c]);
            for i in 0..n {
                let s = coeffs.at(i, j);
                for (o, &a) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(d.row(j)) {
                    *o = s * a;
                }
            }
            Ok(out)
        })
        .collect()
}
