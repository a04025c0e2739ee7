//! Two-stream high-frequency face-forgery detector.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`adam`], [`gradcheck`]: dense tensors, a
//!   reverse-mode differentiation graph, the optimizer and a
//!   finite-difference checker.
//! * [`srm`]: the fixed SRM high-pass filter bank.
//! * [`entry`]: the entry flow with multi-scale high-frequency extraction
//!   and residual-guided spatial attention.
//! * [`dcma`]: dual cross-modality attention.
//! * [`model`]: the assembled network, feature fusion and the
//!   additive-margin cosine loss.
//! * [`checkpoint`]: the binary parameter file format.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod dcma;
pub mod entry;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod params;
pub mod real;
pub mod srm;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use autodiff::{ConvSpec, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Bound, Initializer, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
