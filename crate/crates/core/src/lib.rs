//! Word discovery from unsegmented text.
//!
//! This crate trains a small attention-based encoder-decoder translation
//! model on a parallel corpus whose source side carries no word boundaries,
//! extracts the soft-alignment probability matrices produced by the
//! attention mechanism while force-decoding, and post-processes those
//! matrices into word segmentations with bilingual alignment clues.
//!
//! The main pieces:
//!
//! - [`corpus`]: loading, validation, splitting and the semi-supervised
//!   mixed representation of parallel corpora.
//! - [`numerics`]: a minimal reverse-mode differentiation engine over
//!   64-bit floats, the primitive ops the model needs, cross-entropy, the
//!   Adam optimizer, and a finite-difference gradient checker.
//! - [`model`]: the bidirectional-encoder / attention-decoder translation
//!   model, in both the base (symbols to words) and reverse (words to
//!   symbols) directions.
//! - [`training`]: the optimization loop with early stopping and
//!   corpus-wide alignment extraction.
//! - [`alignment`]: smoothing, bidirectional fusion, hard alignment and
//!   boundary inference over alignment matrices.
//! - [`evaluation`]: token and type precision/recall/F-score plus
//!   vocabulary analyses.
//! - [`synth`]: a deterministic synthetic-language generator used for
//!   end-to-end verification.
//! - [`pipeline`]: stage orchestration, manifests and artifact formats
//!   behind the command-line interface.

pub mod alignment;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
