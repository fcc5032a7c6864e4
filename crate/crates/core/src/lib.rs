//! Desk-scale three-stage cascaded latent diffusion.
//!
//! Stage A is a small f4 VQGAN, the semantic compressor maps images to a
//! 16-channel latent, Stage C is a text-conditional diffusion prior over that
//! latent and Stage B reconstructs Stage A latents from it.

pub mod blocks;
pub mod compressor;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod stage_a;
pub mod stage_b;
pub mod stage_c;
pub mod system;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use wurstkit_tensor as tensor;
