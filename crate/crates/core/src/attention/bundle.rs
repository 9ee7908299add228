use std::path::Path;

use super::adapter::{AdapterForm, SparseAdapter};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::sparse::ActivationPolicy;
use crate::tensor::{read_tensor, write_tensor};

pub const BUNDLE_META_FILE: &str = "adapter.meta";
const COEFF_FILE: &str = "w_s.atns";
const ATOM_FILE: &str = "d.atns";

/// Writes `w_s.atns`, `d.atns` and `adapter.meta` into `dir`, creating it if needed.
pub fn save_adapter_bundle(adapter: &SparseAdapter, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tensor(&adapter.w_s, dir.join(COEFF_FILE))?;
    write_tensor(&adapter.d, dir.join(ATOM_FILE))?;
    let mut meta = FlatConfig::new();
    meta.set("atoms", adapter.atoms());
    meta.set("c_in", adapter.c_in());
    meta.set("c_out", adapter.c_out());
    meta.set("form", adapter.form.name());
    meta.set("activation", adapter.activation.kind_name());
    match adapter.activation {
        ActivationPolicy::SoftThreshold { lambda } | ActivationPolicy::ShiftedRelu { lambda } => {
            meta.set("lambda", lambda)
        }
        ActivationPolicy::TopK { k } => meta.set("k", k),
    }
    meta.save(&dir.join(BUNDLE_META_FILE))
}

pub fn load_adapter_bundle(dir: &Path) -> Result<SparseAdapter> {
    let meta = FlatConfig::load(&dir.join(BUNDLE_META_FILE))?;
    meta.reject_unknown(&["atoms", "c_in", "c_out", "form", "activation", "lambda", "k"])?;
    let activation = match meta.require::<String>("activation")?.as_str() {
        "soft_threshold" => ActivationPolicy::SoftThreshold { lambda: meta.require("lambda")? },
        "shifted_relu" => ActivationPolicy::ShiftedRelu { lambda: meta.require("lambda")? },
        "top_k" => ActivationPolicy::TopK { k: meta.require("k")? },
        other => return Err(Error::Format(format!("unknown activation `{other}` in adapter bundle"))),
    };
    let form = AdapterForm::parse(&meta.require::<String>("form")?)?;
    let w_s = read_tensor(&dir.join(COEFF_FILE))?;
    let d = read_tensor(&dir.join(ATOM_FILE))?;
    let adapter = SparseAdapter::from_parts(w_s, d, activation, form)?;
    let expect = [meta.require::<usize>("atoms")?, meta.require("c_in")?, meta.require("c_out")?];
    if expect != [adapter.atoms(), adapter.c_in(), adapter.c_out()] {
        return Err(Error::Format(format!(
            "bundle metadata says (M, C_i, C_o) = {expect:?}, tensors give ({}, {}, {})",
            adapter.atoms(),
            adapter.c_in(),
            adapter.c_out()
        )));
    }
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = SplitMix64::new(4);
        for act in [ActivationPolicy::SoftThreshold { lambda: 0.25 }, ActivationPolicy::TopK { k: 3 }] {
            let mut ad = SparseAdapter::new(5, 7, 9, act, AdapterForm::Formulation, &mut r).unwrap();
            ad.d = Tensor::randn(&[9, 7], 1.0, &mut r);
            save_adapter_bundle(&ad, dir.path()).unwrap();
            let back = load_adapter_bundle(dir.path()).unwrap();
            assert_eq!(back.w_s.data(), ad.w_s.data());
            assert_eq!(back.d.data(), ad.d.data());
            assert_eq!(back.activation, ad.activation);
            assert_eq!(back.form, ad.form);
        }
    }

    #[test]
    fn missing_or_inconsistent_bundle() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_adapter_bundle(dir.path()), Err(Error::MissingPath(_))));
        let ad = SparseAdapter::new(3, 4, 2, ActivationPolicy::default(), AdapterForm::Implementation, &mut SplitMix64::new(0))
            .unwrap();
        save_adapter_bundle(&ad, dir.path()).unwrap();
        let meta = dir.path().join(BUNDLE_META_FILE);
        let text = std::fs::read_to_string(&meta).unwrap().replace("atoms = 2", "atoms = 3");
        std::fs::write(&meta, text).unwrap();
        assert!(matches!(load_adapter_bundle(dir.path()), Err(Error::Format(_))));
    }
}
