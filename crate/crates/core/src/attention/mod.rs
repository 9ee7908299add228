//! Attention layers, their dictionary view, and the two adapter families:
//! sparse dictionary adapters and low-rank weight adapters.

mod adapter;
mod bundle;
mod layer;
mod lowrank;

pub use adapter::{
    adapted_attention_forward, adapter_forward, atom_contributions, atom_importance, head_mean, select_atoms,
    AdapterForm, AdapterOutput, AdapterResult, AdapterWeights, AtomSelection, SparseAdapter,
};
pub(crate) use adapter::top_atoms;
pub use bundle::{load_adapter_bundle, save_adapter_bundle, BUNDLE_META_FILE};
pub use layer::{attention_forward, composite_dictionary_view, AttentionLayer, AttentionOutput, AttentionWeights};
pub use lowrank::{lowrank_adapted_forward, LowRankAdapter, LowRankFactor, Projection};

/// Joins a parameter-name prefix and a local name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
