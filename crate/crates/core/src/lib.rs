//! Multi-scale deformable detection transformer, built from scratch.
//!
//! The crate bundles a small tape-based autograd over dense tensors and the
//! detector built on it:
//!
//! * [`reparam`]: three-branch re-parameterizable convolutions and their exact
//!   fusion into one 3x3 kernel.
//! * [`deform_attn`]: single- and multi-scale deformable attention.
//! * [`fusion`]: top-down / bottom-up pyramid fusion with channel attention,
//!   GSConv and VoVGSCSP.
//! * [`decoder`]: query decoder layers and prediction heads.
//! * [`matching`]: Hungarian matching and the focal / L1 / GIoU objective.
//! * [`model`]: config-driven assembly, training step, checkpoints.
//! * [`metrics`]: COCO-style average precision.
//! * [`harness`]: synthetic data, training loop, fuse/bench/ablate workflows.

pub mod autograd;
pub mod boxes;
pub mod decoder;
pub mod deform_attn;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
