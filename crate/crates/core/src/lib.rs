//! Watermarking transformer checkpoints through functional invariants.
//!
//! A watermark is a sequence of weight transformations that leave the
//! network's function unchanged: head and neuron permutations, norm/linear
//! rescalings and paired query/key rotations. Each transformation is picked
//! from a keyed candidate list, so the index of the chosen candidate carries
//! a chunk of the identifier. Extraction compares a suspect checkpoint
//! against the original under every candidate and keeps the closest.

pub mod arch;
pub mod attacks;
pub mod codec;
pub mod error;
pub mod invariants;
pub mod matcher;
pub mod matrix;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod transformer;

pub use arch::{Family, ModelArch, Role, Site};
pub use codec::{extract, insert, revert, ExtractionResult, Message, WatermarkKey};
pub use error::{Error, Result};
pub use matcher::{match_registry, pvalue, MatchReport, Registry, RegistryEntry};
pub use matrix::Matrix;
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tensor::{read_checkpoint, write_checkpoint, Checkpoint, Dtype, Tensor};
pub use transformer::Model;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
