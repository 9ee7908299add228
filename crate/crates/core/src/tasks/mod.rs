//! Toy tasks and the models trained on them.

mod digits;
mod fourier;
mod layers;
mod signal;
mod vae;

pub use digits::{corrupt, load_idx, synth_digits, DigitDataset, PIXELS, SIDE};
pub use fourier::{gen_fourier_batch, FourierBatch, FourierGenerator, FourierTaskSpec};
pub use layers::{LayerTrace, Linear, TransformerLayer};
pub use signal::{SignalForward, SignalModel, SignalModelConfig};
pub use vae::{gaussian_kl, patchify, unpatchify, vae_forward, DigitVae, VaeConfig, VaeForward, VaeOutput};
