//! Recurrent binary embeddings for embedding-based retrieval.
//!
//! Float embeddings are compressed by a small trained network into a stack of
//! sign planes (a base plane plus residual planes weighted by `2^-i`), and
//! searched with either a bit-plane popcount kernel or a nibble lookup-table
//! kernel that scans transposed blocks of codes.
//!
//! Module map:
//!
//! * [`embstore`] float datasets, pair lists, ground truth, synthetic data
//! * [`model`] the binarization network, its straight-through backward pass
//!   and checkpoints
//! * [`trainer`] contrastive training with a momentum encoder and a queue of
//!   hard negatives, plus the backward-compatible variant
//! * [`codec`] plane matrices, packed nibble blocks and segment files
//! * [`kernels`] reference, bitwise and lookup-table similarity kernels
//! * [`index`] flat and inverted-file indexes with top-k selection
//! * [`eval`] recall, latency benchmarks and the experiment runner

pub mod codec;
pub mod embstore;
pub mod error;
pub mod eval;
pub mod index;
pub(crate) mod io;
pub mod kernels;
pub mod model;
pub mod real;
pub mod trainer;

pub use codec::{
    Geometry, NormMode, PackedCodeBlock, PackedSegment, PlaneMatrix, ScaledIntCode, BLOCK_LEN,
};
pub use embstore::{EmbeddingSet, GroundTruth, PairList, SyntheticData, SyntheticParams};
pub use error::{Error, Result};
pub use index::{FlatIndex, FloatFlatIndex, IvfIndex, Kernel, Neighbor, TopK};
pub use model::{Mode, RbeConfig, RbeModel, RecurrentBinaryCode};
pub use trainer::{TrainConfig, TrainOutcome};
