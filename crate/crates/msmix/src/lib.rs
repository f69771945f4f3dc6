//! Manifold swap mixup for text classifiers.
//!
//! The crate trains a small from-scratch classifier while augmenting hidden
//! states at a randomly chosen layer. Two samples are forwarded to layer `k`,
//! a subset of feature dimensions of one sample is replaced by the partner's
//! values (or the two states are linearly interpolated), and the mixed state
//! continues through the rest of the network against a fused label.
//!
//! Modules:
//! - [`tensor`] — dense matrix kernels, deterministic RNG, beta sampling,
//!   top/bottom index selection.
//! - [`augment`] — mix plans, mask construction (random / product-magnitude /
//!   two-stage), swap and linear mixing, label fusion.
//! - [`model`] — the classifier: embedding, per-position tanh blocks, mean
//!   pooling, softmax head, hand-written backprop through the mixing point.
//! - [`data`] — jsonl/csv ingestion, char/whitespace vocabularies, few-shot
//!   subsampling, synthetic corpus generation.
//! - [`harness`] — training loop, multi-seed comparison runner, report
//!   emission, gradient checking.
//!
//! Every run is reproducible: the RNG is a fixed xoshiro256++ with splitmix64
//! seeding, so equal seeds give bitwise-equal results on all platforms.

pub mod augment;
pub mod data;
pub mod harness;
pub mod model;
pub mod tensor;

pub use augment::{LabelMode, MaskMatrix, MixConfig, MixPlan, MixStrategy, RowScope};
pub use data::{DataFormat, Example, LabeledDataset, TokenMode, Vocab};
pub use harness::{ComparisonReport, ExperimentConfig, RunResult};
pub use model::{HiddenState, ModelParams};
pub use tensor::{IndexSet, Matrix, Rng};
