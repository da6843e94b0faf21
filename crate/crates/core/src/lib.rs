//! Controllable sequence generation by exact reasoning over a hidden Markov
//! model.
//!
//! A base next-token distribution is reweighted by the probability that the
//! finished sequence satisfies an attribute. With a factorized attribute
//! classifier that probability has a closed form under an HMM: one backward
//! pass caches per-state expectations, and each decoding step combines them
//! with the forward posterior in `O(h^2 + hV)`.

pub mod bench;
pub mod classifier;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod logspace;
pub mod oracle;
pub mod sampling;
pub mod source;

pub use classifier::{FactorizedClassifier, LogitTransform, TrainingExample};
pub use decoder::{CompositionMode, GenerationConfig, Generator, NucleusStage, Sample};
pub use error::{Error, Result};
pub use hmm::{BackwardCache, ForwardState, Hmm};
