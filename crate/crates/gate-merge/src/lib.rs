//! Gate-and-merge toolkit for compositional weight-space personalization.
//!
//! Concepts are packaged as low-rank adapters plus a token embedding, head
//! row, and visual prototype. A query (text plus optional image patch
//! features) gates which concepts are active; the active adapters' deltas
//! are stochastically sparsified, fused by sign-consistent averaging, and
//! applied to a base model whose vocabulary grows by one token per concept.
//! Everything is deterministic given a seed, down to the bytes of the
//! container files.

pub mod adapter;
pub mod bundles;
pub mod compose;
pub mod container;
pub mod error;
pub mod gating;
pub mod matrix;
pub mod merging;
pub mod oracle;
pub mod pipeline;
pub mod prng;

pub use adapter::{ConceptModule, LoraAdapter};
pub use compose::{apply_deltas, extend_vocab, BaseModelWeights, ComposedModelWeights, Provenance};
pub use container::{read_container, write_container, Tensor, TensorContainer};
pub use error::{Error, Result};
pub use gating::{
    active_set, gate, BracketStyle, GateConfig, GateDecision, PatchFeatures, Query,
};
pub use matrix::WeightMatrix;
pub use merging::{
    dare_sparsify, merge_pipeline, naive_sum, sign_elect, ties_merge, MergedDelta, SignMatrix,
    SparsifyConfig,
};
pub use oracle::{
    interference_report, make_synthetic_concepts, mc_unbiasedness, ref_ties_merge,
    InterferenceReport, McReport, SyntheticSet, SyntheticSpec,
};
