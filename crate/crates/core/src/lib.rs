//! Mixed-resolution ("foveated") diffusion transformer.
//!
//! A binary mask over the latent grid decides which 2×2 blocks keep four
//! high-resolution tokens and which collapse into a single low-resolution
//! token. The resulting variable-length sequence is denoised by a small
//! flow-matching transformer whose rotary positions are expressed in the
//! query's resolution units, then split, decoded and blended back to pixels.

pub mod bench;
pub mod error;
pub mod generate;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod pnm;
pub mod rope;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
