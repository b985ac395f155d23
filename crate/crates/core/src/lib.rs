//! Coarse autoregressive tokens guiding a spatial-temporal diffusion
//! transformer, on a synthetic moving-shapes corpus.
//!
//! Pipeline: pixel video → [`video_vae`] latent → [`latent_vqvae`] token grid
//! → [`ar_model`] predicts tokens from text → the VQ decoder turns them back
//! into latent features → [`injection`] feeds those features into the
//! frozen [`dit`] backbone while it denoises.

pub mod ar_model;
pub mod autograd;
pub mod dit;
pub mod error;
pub mod eval;
pub mod injection;
pub mod io;
pub mod latent_vqvae;
pub mod nn;
pub mod pipeline;
pub mod synth_data;
pub mod tensor;
pub mod video_vae;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use error::{Error, Result};
pub use tensor::Tensor;
