//! Speech-to-LLM modality alignment stack, desk scale.
//!
//! The crate wires a complete speech-aware language-model pipeline out of
//! small, individually verified pieces:
//!
//! ```text
//! 16 kHz wav ── logmel 80d @ 100 Hz ── stack x2 ── 160d @ 50 Hz
//!                                  (audio)
//!   └── conformer blocks, block self-attention, self-conditioned CTC
//!                                  (encoder)
//!   └── windowed Q-former: N queries per K-frame window → K/N downsampling
//!                                  (adapter)
//!   └── decoder-only toy LLM, <|audio|> splicing, LoRA on q/v projections,
//!       beam search with repetition penalty
//!                                  (llm)
//! ```
//!
//! Everything runs on a minimal reverse-mode tensor library ([`tensor`])
//! whose gradients are checked against central finite differences, so the
//! training loops in [`train`] need no external ML framework.  The data
//! side ([`data`], [`prompting`], [`filter`]) covers manifest ingestion,
//! corpus-balanced sampling, chat-format prompt construction, and
//! ensemble-agreement filtering of machine-translation pairs.
//!
//! Checkpoints for every component share one container, the
//! [`store::NamedTensorStore`] binary format (magic `GSPC`).

pub mod adapter;
pub mod audio;
pub mod data;
pub mod encoder;
pub mod filter;
pub mod llm;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod train;
pub mod verify;

mod error;

pub use error::Error;
pub use scalar::Scalar;
pub use store::NamedTensorStore;
pub use tensor::{Gradients, Tensor};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Deterministic sub-seed derivation (FNV-1a over tag and index).
///
/// Every stochastic choice in the crate draws from a ChaCha stream seeded
/// through this function, which makes runs replayable from (seed, step)
/// without serializing RNG state into checkpoints.
pub fn subseed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in seed.to_le_bytes().iter() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    for &b in index.to_le_bytes().iter() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}
