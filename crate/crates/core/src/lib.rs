//! Gated recoding network for RGB-D salient object detection.
//!
//! Two single-modal encoders feed modal-adaptive gate units (MGUs), whose
//! balanced features are re-encoded by two recoding mixers and integrated by
//! a hybrid branch decoder with an optional edge guidance stream. The crate
//! carries its own small reverse-mode autodiff engine ([`autograd`]) so every
//! layer can be checked against finite differences in `f64`.
//!
//! Data-parallel inner loops (per-sample convolution, metric evaluation,
//! synthetic generation) go through [`par`], which uses rayon when the
//! `parallel` feature is on and plain iterators otherwise. Both paths produce
//! bit-identical results.

pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod decoder;
mod error;
pub mod gating;
mod kernels;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod objective;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
