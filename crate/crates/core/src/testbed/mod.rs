//! Desk-scale diffusion stand-in.
//!
//! The latent space is a 16x16 grid with 4 channels, stored as a `256 x 4`
//! matrix (rows = pixels, row-major). The denoiser is a three-block
//! attention network (16x16 -> 8x8 -> 16x16 with a skip connection) whose
//! every attention linear is adapter-wrappable; the text encoder is an
//! embedding table with two frozen self-attention layers; the sampler is
//! deterministic DDIM. A synthetic shape dataset with exact masks rounds out
//! everything needed to train, fuse, and generate in seconds.

pub mod dataset;
pub mod denoiser;
pub mod sampler;
pub mod text_encoder;

pub use dataset::{
    image_from_latent, latent_from_image, load_gray_png, load_image_png, make_dataset,
    save_image_png, ConceptImageSpec, DatasetItem, DatasetSpec, ShapeKind, SynthConceptDataset,
};
pub use denoiser::{layer_ids, Denoiser, DenoiserGraph, ForwardPass, LayerDelta};
pub use sampler::{
    evaluate_denoiser, CrossProbs, HookPoint, Interventions, Sampler, Schedule, StepCaptures,
    StepContext, StepTrace, Trajectory,
};
pub use text_encoder::TextEncoder;

/// Side length of the square latent grid.
pub const LATENT_SIDE: usize = 16;
/// Latent channels per grid location.
pub const LATENT_CHANNELS: usize = 4;
/// Rows of a latent matrix (`LATENT_SIDE` squared).
pub const LATENT_PIXELS: usize = LATENT_SIDE * LATENT_SIDE;
/// Hidden width of the denoiser and text encoder.
pub const MODEL_DIM: usize = 32;
/// Attention heads in every attention sublayer.
pub const HEADS: usize = 2;
/// Training timestep count of the noise schedule.
pub const TRAIN_TIMESTEPS: usize = 50;
/// Longest prompt the text encoder accepts.
pub const MAX_PROMPT_LEN: usize = 16;
/// Epsilon for row layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Splitmix-style stream derivation so each consumer of a base seed gets an
/// independent, reproducible stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1))
}
