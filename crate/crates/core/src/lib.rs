#![no_std]
#![forbid(unsafe_code)]
//! Core of the saliency-guided self-attention segmentation pipeline.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! dense tensors with reverse-mode differentiation, the toy backbone and its
//! heads, the saliency-masked attention block, training objectives, naive
//! dense-CRF inference, seed mining, evaluation metrics and the synthetic
//! dataset generator. File formats, training orchestration and the CLI live
//! in the `sgan` companion crate.

extern crate alloc;

pub mod attention;
pub mod crf;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod seeds;
pub mod synth;
pub mod tensor;

mod gemm;

pub use error::{Error, Result};
pub use graph::{Graph, Primitive, Var};
pub use real::{DType, Real};
pub use tensor::Tensor;
