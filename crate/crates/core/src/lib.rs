//! Drug-target affinity model built from scratch.
//!
//! A masked-LM pretrained transformer encodes SMILES molecules, a stack of
//! 1-D convolutions encodes FASTA proteins, and a dense head regresses the
//! binding affinity from the two pooled representations.
//!
//! ```text
//! SMILES ─ codec ─ embed ─ [attention block × N] ─ row 0 ([REP]) ──┐
//!                                                                  ├─ concat ─ dense × k ─ ŷ
//! FASTA  ─ codec ─ embed ─ conv ─ conv ─ conv ─ max over length ───┘
//! ```
//!
//! The crate is `no_std` and only needs `alloc`. File IO, the command line,
//! and dataset handling live in the `mtdti-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
mod error;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod params;
pub mod protein;
pub mod record;
pub mod tensor;
pub mod train;
pub mod transformer;

#[cfg(test)]
mod testutil;

pub use autodiff::{Graph, NodeId};
pub use checkpoint::Checkpoint;
pub use codec::{CodecConfig, EncodedSequence, Vocab, VocabKind};
pub use error::{Error, Result};
pub use interaction::InteractionConfig;
pub use model::{ModelConfig, RepPooling, Session};
pub use params::ParamStore;
pub use protein::ProteinCnnConfig;
pub use tensor::Tensor;
pub use transformer::TransformerConfig;
