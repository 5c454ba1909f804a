//! Scan-based backpropagation for models whose regions communicate only
//! through low-rank interface states.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with deterministic kernels.
//! - [`autodiff`]: a tape-based reverse-mode engine used as the reference
//!   gradient and for VJPs.
//! - [`model`]: the interface-chained architecture and a dense baseline.
//! - [`scan`]: sequential and tree-structured suffix products of Jacobians.
//! - [`backward`]: Jacobian materialisation, adjoint scan and region-local
//!   backward, plus the streaming schedule.
//! - [`costmodel`]: closed-form work, span and roofline arithmetic.
//! - [`diagnostics`]: spectral norms of interface Jacobians.
//! - [`trainer`]: byte-level data, AdamW and the experiment harnesses.

pub mod autodiff;
pub mod backward;
pub mod costmodel;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod scan;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DetRng, Precision, Tensor};
