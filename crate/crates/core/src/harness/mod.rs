//! Data generation, manifests, evaluation, checkpoints and ablation reports.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod report;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use dataset::{load_manifest, PlaceDataset, Record, Split};
pub use eval::{evaluate, EvalReport};
pub use synth::{gen_data, SynthConfig};
