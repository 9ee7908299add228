//! Cost accounting, atom influence, the rank-1 stability duel, ablation
//! sweeps and the polynomial perturbation-expansion verifier.

mod cost;
mod duel;
mod expansion;
mod influence;
mod sweep;

pub use cost::{cost_report, CostInputs, CostReport, MethodCost};
pub use duel::{stability_duel, DuelConfig, DuelReport, MethodScore};
pub use expansion::{
    expansion_decompose, expansion_two_layer, Expansion, PolyLayer, ScaledAtom, TwoLayerExpansion, EXPANSION_TOL,
    ORTHO_TOL,
};
pub use influence::{atom_influence, atom_mass, atoms_for_mass, layer_atom_mass, selected_atom_map, AdaptedModel, AdaptedRun, AtomInfluence, LayerInfluence};
pub use sweep::{ablation_sweep, SweepAxis, SweepConfig, SweepRow, SweepTable, SWEEP_HEADER};
