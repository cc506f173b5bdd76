//! colorguard: build datasets of natural vs. computer-colorized images, train a
//! two-branch frozen/trainable ensemble classifier on them, and evaluate it with
//! accuracy, HTER, confusion matrices, and cross-dataset generalization reports.
//!
//! The crate is organized around the workflow stages:
//!
//! - [`data`]: dataset manifests, the 1:3 natural-to-colorized pairing protocol,
//!   pseudo-colorizers, and a synthetic corpus generator for desk-scale runs.
//! - [`preprocess`]: resize / normalize / shuffle pipeline that turns manifests
//!   into deterministic batch streams.
//! - [`model`]: the two-branch ensemble (frozen feature extractor + trainable
//!   feature extractor, concatenated into a two-neuron dense head).
//! - [`train`]: the training loop, optimizers, and checkpointing.
//! - [`eval`]: confusion matrices, accuracy, HTER, and report rendering.
//! - [`cli`]: the `colorguard` command-line entry point.

mod blob;
pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod train;

pub(crate) mod seeds {
    /// Derives an independent stream seed from a base seed, splitmix64-style.
    /// Used anywhere one user-facing seed has to fan out into several
    /// deterministic sub-streams (per-epoch shuffles, per-image colorizers, ...).
    pub fn derive(base: u64, stream: u64) -> u64 {
        let mut z = base
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}
