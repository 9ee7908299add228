//! Perturbation expansion of elementwise polynomial layers.
//!
//! For `f(x) = Σₖ cₖ xᵏ` applied per channel and a perturbation `Σₘ sₘ dₘ`
//! whose atoms never share a nonzero channel, the binomial theorem splits
//! `f(x + Σₘ sₘ dₘ) − f(x)` exactly into one series per atom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise tolerance for the orthogonality hypothesis.
pub const ORTHO_TOL: f64 = 1e-6;
/// Largest relative residual accepted as an exact decomposition.
pub const EXPANSION_TOL: f64 = 1e-6;

/// Elementwise polynomial `f(x) = Σₖ cₖ xᵏ`, `k = 1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLayer {
    coeffs: Vec<f64>,
}

impl PolyLayer {
    /// `coeffs[k - 1]` multiplies `xᵏ`.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::contract("polynomial layer needs degree K >= 1"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::contract("polynomial coefficients must be finite"));
        }
        Ok(Self { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.eval(v)).collect()
    }

    fn eval(&self, v: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| (acc + c) * v)
    }

    /// Series of one scaled atom around `x`:
    /// `Σₖ cₖ Σⱼ₌₁..ₖ C(k,j)·x^{k−j}⊙(s·d)^j`.
    pub fn atom_series(&self, x: &[f64], atom: &ScaledAtom) -> Vec<f64> {
        x.iter()
            .zip(&atom.atom)
            .map(|(&xi, &di)| {
                let p = atom.scale * di;
                let mut total = 0.0;
                for (k, &c) in (1..).zip(&self.coeffs) {
                    let mut inner = 0.0;
                    for j in 1..=k {
                        inner += binomial(k, j) * xi.powi((k - j) as i32) * p.powi(j as i32);
                    }
                    total += c * inner;
                }
                total
            })
            .collect()
    }

    /// The series of [`atom_series`](Self::atom_series) as a polynomial in
    /// the perturbation size: entry `g` of each channel's vector multiplies `tᵍ`
    /// where the channel's perturbation is `t·dᵢ`.
    fn series_in_t(&self, x: &[f64], atom: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .zip(atom)
            .map(|(&xi, &di)| {
                let mut out = vec![0.0; self.degree() + 1];
                for (k, &c) in (1..).zip(&self.coeffs) {
                    for j in 1..=k {
                        out[j] += c * binomial(k, j) * xi.powi((k - j) as i32) * di.powi(j as i32);
                    }
                }
                out
            })
            .collect()
    }

    /// Same series for a perturbation that is itself a polynomial `q(t)` per channel.
    fn compose_in_t(&self, u: &[f64], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
        u.iter()
            .zip(q)
            .map(|(&ui, qi)| {
                let mut out = vec![0.0];
                let mut q_pow = vec![1.0];
                let powers: Vec<Vec<f64>> = (0..self.degree())
                    .map(|_| {
                        q_pow = poly_mul(&q_pow, qi);
                        q_pow.clone()
                    })
                    .collect();
                for (k, &c) in (1..).zip(&self.coeffs) {
                    for j in 1..=k {
                        let w = c * binomial(k, j) * ui.powi((k - j) as i32);
                        poly_add_scaled(&mut out, &powers[j - 1], w);
                    }
                }
                out
            })
            .collect()
    }
}

/// A perturbation term `s·d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledAtom {
    pub scale: f64,
    pub atom: Vec<f64>,
}

impl ScaledAtom {
    pub fn new(scale: f64, atom: Vec<f64>) -> Self {
        Self { scale, atom }
    }

    fn scaled(&self) -> impl Iterator<Item = f64> + '_ {
        self.atom.iter().map(move |&d| self.scale * d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    /// `f(x)`
    pub base: Vec<f64>,
    /// `f(x + Σ sₘ dₘ)` evaluated directly.
    pub direct: Vec<f64>,
    /// One series per atom.
    pub series: Vec<Vec<f64>>,
    /// `‖direct − base − Σ series‖ / ‖direct‖`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerExpansion {
    /// `g(f(x))`
    pub base: Vec<f64>,
    /// `g(f(x + Σ prev) + Σ cur)` evaluated directly.
    pub direct: Vec<f64>,
    /// Output contribution of each previous-layer atom.
    pub previous: Vec<Vec<f64>>,
    /// Output contribution of each current-layer atom.
    pub current: Vec<Vec<f64>>,
    /// Per previous-layer atom, the largest channel magnitude of each
    /// monomial order `1..=K_f·K_g` in its scale.
    pub previous_orders: Vec<Vec<f64>>,
    pub residual: f64,
}

impl TwoLayerExpansion {
    /// Highest monomial order with a nonzero contribution across previous-layer atoms.
    pub fn max_previous_order(&self) -> usize {
        self.previous_orders
            .iter()
            .filter_map(|p| p.iter().rposition(|&v| v > 0.0).map(|i| i + 1))
            .max()
            .unwrap_or(0)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add_scaled(acc: &mut Vec<f64>, p: &[f64], w: f64) {
    if acc.len() < p.len() {
        acc.resize(p.len(), 0.0);
    }
    for (a, &v) in acc.iter_mut().zip(p) {
        *a += w * v;
    }
}

fn poly_eval(p: &[f64], t: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_residual(direct: &[f64], base: &[f64], parts: &[&Vec<f64>]) -> f64 {
    let r: Vec<f64> = (0..direct.len()).map(|i| direct[i] - base[i] - parts.iter().map(|p| p[i]).sum::<f64>()).collect();
    let scale = norm(direct);
    if scale > 0.0 {
        norm(&r) / scale
    } else {
        norm(&r)
    }
}

fn check_lengths(dim: usize, atoms: &[ScaledAtom], what: &str) -> Result<()> {
    for (i, a) in atoms.iter().enumerate() {
        if a.atom.len() != dim {
            return Err(Error::dim("expansion", format!("{what} atom {i} has length {}, input has {dim}", a.atom.len())));
        }
    }
    Ok(())
}

/// Checks the hypothesis for a pair of atoms. The inner product must vanish,
/// and for degree >= 2 the elementwise product must too, since cross terms
/// `dᵢ⊙dⱼ` survive elementwise powers even when `⟨dᵢ, dⱼ⟩ = 0`.
fn check_pair(a: &[f64], b: &[f64], degree: usize, name: impl Fn() -> String) -> Result<()> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if dot.abs() > ORTHO_TOL {
        return Err(Error::contract(format!("{} are not orthogonal: inner product {dot}", name())));
    }
    if degree >= 2 {
        if let Some((c, p)) = a.iter().zip(b).map(|(x, y)| x * y).enumerate().find(|(_, p)| p.abs() > ORTHO_TOL) {
            return Err(Error::contract(format!(
                "{} overlap at channel {c} (product {p}); elementwise powers need disjoint supports",
                name()
            )));
        }
    }
    Ok(())
}

fn check_set(atoms: &[ScaledAtom], degree: usize, what: &str) -> Result<()> {
    for i in 0..atoms.len() {
        for j in i + 1..atoms.len() {
            check_pair(&atoms[i].atom, &atoms[j].atom, degree, || format!("{what}atoms {i} and {j}"))?;
        }
    }
    Ok(())
}

fn perturbed(x: &[f64], atoms: &[ScaledAtom]) -> Vec<f64> {
    let mut out = x.to_vec();
    for a in atoms {
        for (o, p) in out.iter_mut().zip(a.scaled()) {
            *o += p;
        }
    }
    out
}

/// Splits `f(x + Σ sₘ dₘ) − f(x)` into per-atom series and reports the residual.
pub fn expansion_decompose(poly: &PolyLayer, x: &[f64], atoms: &[ScaledAtom]) -> Result<Expansion> {
    check_lengths(x.len(), atoms, "")?;
    check_set(atoms, poly.degree(), "")?;
    let base = poly.apply(x);
    let direct = poly.apply(&perturbed(x, atoms));
    let series: Vec<Vec<f64>> = atoms.iter().map(|a| poly.atom_series(x, a)).collect();
    let residual = relative_residual(&direct, &base, &series.iter().collect::<Vec<_>>());
    Ok(Expansion { base, direct, series, residual })
}

/// Decomposes `g(f(x + Σ prev) + Σ cur)` into contributions of both atom sets.
///
/// Previous-layer atoms are carried through both polynomials as series in
/// their own scale, so their contributions reach orders up to `K_f·K_g`.
pub fn expansion_two_layer(
    first: &PolyLayer,
    second: &PolyLayer,
    x: &[f64],
    previous: &[ScaledAtom],
    current: &[ScaledAtom],
) -> Result<TwoLayerExpansion> {
    check_lengths(x.len(), previous, "previous-layer ")?;
    check_lengths(x.len(), current, "current-layer ")?;
    check_set(previous, first.degree().max(second.degree()), "previous-layer ")?;
    check_set(current, second.degree(), "current-layer ")?;
    for (i, p) in previous.iter().enumerate() {
        for (j, c) in current.iter().enumerate() {
            check_pair(&p.atom, &c.atom, second.degree(), || format!("previous-layer atom {i} and current-layer atom {j}"))?;
        }
    }

    let hidden = first.apply(x);
    let base = second.apply(&hidden);
    let mut inner = first.apply(&perturbed(x, previous));
    for c in current {
        for (h, p) in inner.iter_mut().zip(c.scaled()) {
            *h += p;
        }
    }
    let direct = second.apply(&inner);

    let mut prev_out = Vec::with_capacity(previous.len());
    let mut orders = Vec::with_capacity(previous.len());
    for atom in previous {
        let q = first.series_in_t(x, &atom.atom);
        let composed = second.compose_in_t(&hidden, &q);
        let top = first.degree() * second.degree();
        let mut profile = vec![0.0f64; top];
        for channel in &composed {
            for (g, &c) in channel.iter().enumerate().skip(1) {
                let v = (c * atom.scale.powi(g as i32)).abs();
                profile[g - 1] = profile[g - 1].max(v);
            }
        }
        prev_out.push(composed.iter().map(|p| poly_eval(p, atom.scale)).collect::<Vec<f64>>());
        orders.push(profile);
    }
    let cur_out: Vec<Vec<f64>> = current.iter().map(|a| second.atom_series(&hidden, a)).collect();
    let parts: Vec<&Vec<f64>> = prev_out.iter().chain(&cur_out).collect();
    let residual = relative_residual(&direct, &base, &parts);
    Ok(TwoLayerExpansion { base, direct, previous: prev_out, current: cur_out, previous_orders: orders, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(scale: f64, d: &[f64]) -> ScaledAtom {
        ScaledAtom::new(scale, d.to_vec())
    }

    #[test]
    fn linear_series_is_the_perturbation() {
        let poly = PolyLayer::new(vec![1.0]).unwrap();
        let atoms = [atom(2.0, &[1.0, 1.0, 0.0]), atom(-1.0, &[1.0, -1.0, 0.0])];
        let e = expansion_decompose(&poly, &[0.3, -0.2, 0.9], &atoms).unwrap();
        assert_eq!(e.series[0], vec![2.0, 2.0, 0.0]);
        assert_eq!(e.series[1], vec![-1.0, 1.0, 0.0]);
        assert!(e.residual < 1e-15);
    }

    #[test]
    fn square_with_unit_atoms() {
        let poly = PolyLayer::new(vec![0.0, 1.0]).unwrap();
        let atoms = [atom(1.0, &[1.0, 0.0]), atom(1.0, &[0.0, 1.0])];
        let e = expansion_decompose(&poly, &[1.0, 1.0], &atoms).unwrap();
        assert_eq!(e.series, vec![vec![3.0, 0.0], vec![0.0, 3.0]]);
        let delta: Vec<f64> = e.direct.iter().zip(&e.base).map(|(d, b)| d - b).collect();
        assert_eq!(delta, vec![3.0, 3.0]);
        assert_eq!(e.residual, 0.0);
    }

    #[test]
    fn rejects_non_orthogonal_pair_by_name() {
        let poly = PolyLayer::new(vec![0.0, 1.0]).unwrap();
        let atoms = [atom(1.0, &[1.0, 0.0]), atom(1.0, &[1.0, 1.0])];
        let err = expansion_decompose(&poly, &[1.0, 1.0], &atoms).unwrap_err().to_string();
        assert!(err.contains("atoms 0 and 1") && err.contains("inner product 1"), "{err}");
    }

    #[test]
    fn overlapping_orthogonal_atoms_leave_cross_terms() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let atoms = [atom(1.0, &[s, s]), atom(1.0, &[s, -s])];
        let quad = PolyLayer::new(vec![0.0, 1.0]).unwrap();
        assert!(expansion_decompose(&quad, &[0.5, 0.5], &atoms).unwrap_err().to_string().contains("overlap"));
        let linear = PolyLayer::new(vec![3.0]).unwrap();
        assert!(expansion_decompose(&linear, &[0.5, 0.5], &atoms).unwrap().residual < 1e-15);
    }

    #[test]
    fn two_linear_layers_add_perturbations() {
        let id = PolyLayer::new(vec![1.0]).unwrap();
        let e = expansion_two_layer(&id, &id, &[1.0, 2.0], &[atom(0.5, &[1.0, 0.0])], &[atom(2.0, &[0.0, 1.0])]).unwrap();
        assert_eq!(e.previous, vec![vec![0.5, 0.0]]);
        assert_eq!(e.current, vec![vec![0.0, 2.0]]);
        assert_eq!(e.residual, 0.0);
        assert_eq!(e.max_previous_order(), 1);
    }

    #[test]
    fn two_quadratic_layers_reach_order_four() {
        let q = PolyLayer::new(vec![0.5, 1.0]).unwrap();
        let e = expansion_two_layer(&q, &q, &[0.3, -0.7, 1.1], &[atom(0.8, &[1.0, 0.0, 0.0])], &[atom(-0.4, &[0.0, 0.0, 1.0])])
            .unwrap();
        assert!(e.residual < EXPANSION_TOL, "{}", e.residual);
        assert_eq!(e.max_previous_order(), 4);
    }

    #[test]
    fn no_atoms_is_the_plain_composition() {
        let f = PolyLayer::new(vec![0.2, -0.1, 0.05]).unwrap();
        let g = PolyLayer::new(vec![1.0, 0.3]).unwrap();
        let x = [0.4, -1.2];
        let e = expansion_two_layer(&f, &g, &x, &[], &[]).unwrap();
        assert_eq!(e.direct, g.apply(&f.apply(&x)));
        assert_eq!(e.direct, e.base);
        assert_eq!(e.residual, 0.0);
    }

    #[test]
    fn cross_layer_overlap_is_rejected() {
        let q = PolyLayer::new(vec![0.0, 1.0]).unwrap();
        let err = expansion_two_layer(&q, &q, &[1.0, 1.0], &[atom(1.0, &[1.0, 0.0])], &[atom(1.0, &[1.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("previous-layer atom 0 and current-layer atom 0"));
    }
}
