use crate::attention::{atom_importance, top_atoms, SparseAdapter};
use crate::error::{Error, Result};
use crate::tasks::{unpatchify, DigitVae};
use crate::tensor::{Tape, Tensor};

/// Output and per-layer adapter coefficients of one deterministic pass.
#[derive(Debug, Clone)]
pub struct AdaptedRun {
    /// `[B, ...]`; influence maps average over the leading axis.
    pub output: Tensor,
    /// Coefficients multiplying `D` at each adapter slot, rows flattened to `[*, M]`.
    pub coeffs: Vec<Option<Tensor>>,
}

/// A model with indexed sparse-adapter slots.
pub trait AdaptedModel: Clone {
    fn adapter_slots(&self) -> usize;
    fn adapter(&self, slot: usize) -> Option<&SparseAdapter>;
    fn adapter_mut(&mut self, slot: usize) -> Option<&mut SparseAdapter>;
    fn run(&self, input: &Tensor) -> Result<AdaptedRun>;
}

impl AdaptedModel for DigitVae {
    fn adapter_slots(&self) -> usize {
        self.decoder.len()
    }

    fn adapter(&self, slot: usize) -> Option<&SparseAdapter> {
        self.decoder.get(slot)?.adapter.as_ref()
    }

    fn adapter_mut(&mut self, slot: usize) -> Option<&mut SparseAdapter> {
        self.decoder.get_mut(slot)?.adapter.as_mut()
    }

    fn run(&self, input: &Tensor) -> Result<AdaptedRun> {
        let mut tape = Tape::new();
        let r = self.forward(&mut tape, input, input, None)?;
        let coeffs = r
            .decoder_traces
            .iter()
            .map(|tr| {
                tr.coeffs
                    .map(|c| {
                        let v = tape.value(c);
                        let m = *v.shape().last().expect("coefficients have an atom axis");
                        v.reshape(&[v.numel() / m, m])
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptedRun { output: unpatchify(tape.value(r.recon), self.config.patch)?, coeffs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomInfluence {
    pub layer: usize,
    pub atom: usize,
    /// Batch-mean output change with only this atom active.
    pub contribution: Tensor,
    /// Mean `|S|` over the atom's coefficient column.
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfluence {
    pub layer: usize,
    pub atoms: Vec<AtomInfluence>,
    /// Batch-mean output change with the whole layer adapter active.
    pub combined: Tensor,
    /// Largest entry of `|combined − Σ contributions|`; zero for a linear readout.
    pub additivity_gap: f64,
}

fn zero_all(model: &mut impl AdaptedModel) {
    for slot in 0..model.adapter_slots() {
        if let Some(a) = model.adapter_mut(slot) {
            a.d.data_mut().fill(0.0);
        }
    }
}

fn batch_mean(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    let b = shape[0];
    let per = t.numel() / b.max(1);
    let mut out = vec![0.0f64; per];
    for row in t.data().chunks_exact(per) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    Tensor::new(&shape[1..], out.into_iter().map(|v| (v / b as f64) as f32).collect())
}

fn output_delta(model: &impl AdaptedModel, input: &Tensor, reference: &Tensor) -> Result<Tensor> {
    batch_mean(&model.run(input)?.output.sub(reference)?)
}

/// Decomposes the output change caused by the adapter at `layer` into
/// one map per atom by re-running the model with only that atom's row of `D`
/// kept. Adapters at other layers stay switched off throughout.
pub fn atom_influence<M: AdaptedModel>(model: &M, input: &Tensor, layer: usize) -> Result<LayerInfluence> {
    let slots = model.adapter_slots();
    let adapter = match model.adapter(layer) {
        Some(a) if layer < slots => a,
        _ => return Err(Error::contract(format!("layer {layer} has no adapter ({slots} adapter slots)"))),
    };
    let coeffs = model.run(input)?.coeffs.get(layer).cloned().flatten();
    let coeffs = coeffs.ok_or_else(|| Error::contract(format!("layer {layer} produced no coefficients")))?;
    let importance = atom_importance(&coeffs)?;

    let mut bare = model.clone();
    zero_all(&mut bare);
    let reference = bare.run(input)?.output;

    let mut only_layer = bare.clone();
    let atoms_d = adapter.d.clone();
    only_layer.adapter_mut(layer).expect("slot checked above").d = atoms_d.clone();
    let combined = output_delta(&only_layer, input, &reference)?;

    let (m, c) = (atoms_d.rows(), atoms_d.cols());
    let mut atoms = Vec::with_capacity(m);
    let mut summed = vec![0.0f64; combined.numel()];
    for (atom, &imp) in importance.iter().enumerate() {
        let contribution = if imp == 0.0 {
            Tensor::zeros(combined.shape())
        } else {
            let mut single = bare.clone();
            let d = &mut single.adapter_mut(layer).expect("slot checked above").d;
            d.data_mut()[atom * c..(atom + 1) * c].copy_from_slice(atoms_d.row(atom));
            output_delta(&single, input, &reference)?
        };
        for (s, &v) in summed.iter_mut().zip(contribution.data()) {
            *s += v as f64;
        }
        atoms.push(AtomInfluence { layer, atom, contribution, importance: imp as f64 });
    }
    let additivity_gap =
        combined.data().iter().zip(&summed).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    Ok(LayerInfluence { layer, atoms, combined, additivity_gap })
}

/// Batch-mean output change from the adapter at `layer` when only its `count`
/// most important atoms keep their rows of `D`. Other layers stay switched
/// off. Returns the kept atom indices and the map.
pub fn selected_atom_map<M: AdaptedModel>(
    model: &M,
    input: &Tensor,
    layer: usize,
    count: usize,
) -> Result<(Vec<usize>, Tensor)> {
    let slots = model.adapter_slots();
    let adapter = match model.adapter(layer) {
        Some(a) if layer < slots => a,
        _ => return Err(Error::contract(format!("layer {layer} has no adapter ({slots} adapter slots)"))),
    };
    let coeffs = model.run(input)?.coeffs.get(layer).cloned().flatten();
    let coeffs = coeffs.ok_or_else(|| Error::contract(format!("layer {layer} produced no coefficients")))?;
    let kept = top_atoms(&coeffs, count)?;
    let mut bare = model.clone();
    zero_all(&mut bare);
    let reference = bare.run(input)?.output;
    let c = adapter.d.cols();
    let mut selected = bare;
    let d = &mut selected.adapter_mut(layer).expect("slot checked above").d;
    for &atom in &kept {
        d.data_mut()[atom * c..(atom + 1) * c].copy_from_slice(adapter.d.row(atom));
    }
    Ok((kept, output_delta(&selected, input, &reference)?))
}

/// Per-atom share of `Σ|ΔO|`: atom `m` contributes `Σₙ|Sₙₘ|·Σ_c|D_mc|`.
pub fn atom_mass(coeffs: &Tensor, d: &Tensor) -> Result<Vec<f64>> {
    let (_, m) = coeffs.dims2("atom_mass")?;
    let (md, _) = d.dims2("atom_mass")?;
    if m != md {
        return Err(Error::dim("atom_mass", format!("{m} coefficient columns for {md} atoms")));
    }
    let mut col = vec![0.0f64; m];
    for row in coeffs.data().chunks_exact(m) {
        for (c, &v) in col.iter_mut().zip(row) {
            *c += v.abs() as f64;
        }
    }
    Ok(col.into_iter().enumerate().map(|(j, s)| s * d.row(j).iter().map(|v| v.abs() as f64).sum::<f64>()).collect())
}

/// [`atom_mass`] for every adapter slot of `model` on `input`; empty for
/// slots without an adapter.
pub fn layer_atom_mass<M: AdaptedModel>(model: &M, input: &Tensor) -> Result<Vec<Vec<f64>>> {
    let run = model.run(input)?;
    (0..model.adapter_slots())
        .map(|slot| match (model.adapter(slot), run.coeffs.get(slot).and_then(Option::as_ref)) {
            (Some(a), Some(c)) => atom_mass(c, &a.d),
            _ => Ok(Vec::new()),
        })
        .collect()
}

/// Fewest atoms whose masses add up to at least `fraction` of the total.
pub fn atoms_for_mass(mass: &[f64], fraction: f64) -> usize {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut sorted = mass.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    sorted.len()
}
