//! Adversarial capsule networks for binary text classification.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`params`], [`gradcheck`]: a small dense tensor
//!   engine with reverse-mode differentiation.
//! * [`text`]: tokenization, word2vec embeddings and the document grid.
//! * [`augment`]: character-substitution adversarial copies.
//! * [`encoders`], [`capsule`], [`model`]: the classifier.
//! * [`train`], [`report`], [`synth`]: optimization, experiment harnesses,
//!   CSV output and the synthetic benchmark corpus.

pub mod augment;
pub mod capsule;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod text;

pub use error::{Error, Result};
pub use params::{ParamId, ParamSet, Parameter};
pub use rng::SeededRng;
pub use tape::{Bindings, Gradients, Tape, Var};
pub use tensor::{apply_primitive, Primitive, PrimitiveKind, Tensor, TensorError};
