//! Concept personalization on a desk-scale diffusion testbed.
//!
//! The crate trains single-concept adapters (LoRA, KronA, and KronA-WED —
//! a Kronecker-product update with weight and embedding decomposition),
//! merges independently trained concepts by gradient fusion, and generates
//! multi-concept images without spatial conditions using subject-adaptive
//! matching attention (SAMA) and layout-consistency guidance.
//!
//! Everything runs against the built-in [`testbed`]: a tiny denoiser with
//! real cross- and self-attention blocks, a toy text encoder, a
//! deterministic sampler, and a synthetic shape dataset, so the full
//! train / fuse / generate loop completes in seconds on a CPU.
//!
//! Module map:
//! - [`adapters`]: weight-update parameterizations and their algebra
//! - [`concepts`]: decomposed concept tokens and prompt handling
//! - [`objectives`]: disentangled training losses and attention regularization
//! - [`fusion`]: least-squares merging of per-concept weight updates
//! - [`sama`]: cross-branch semantic matching and value injection
//! - [`layout`]: soft-IoU layout loss and guided latent updates
//! - [`testbed`]: the toy diffusion stack and synthetic dataset
//! - [`pipeline`]: orchestration, configuration, checkpoints, metrics

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub mod adapters;
pub mod concepts;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod layout;
pub mod linalg;
pub mod objectives;
pub mod pipeline;
pub mod sama;
pub mod tensor;
pub mod testbed;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Mat;

/// Scalar type the numeric core is generic over.
///
/// `f64` is the default throughout the pipeline; `f32` is supported for
/// the core math. Literals cross the boundary through [`Scalar::of`].
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal representable in scalar type")
    }

    /// Widens the scalar to `f64`.
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Scalar used by the testbed pipeline and the CLI.
pub type Real = f64;

/// `f32` matrix alias.
pub type Mat32 = Mat<f32>;
/// `f64` matrix alias; what the pipeline operates on.
pub type Mat64 = Mat<f64>;
