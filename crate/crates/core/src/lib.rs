//! Sparse masked-image-modeling pre-training for hierarchical convnets.
//!
//! Visible patches of an image are gathered into per-scale sparse tensors,
//! encoded with submanifold sparse convolutions, densified with learnable
//! mask embeddings and decoded by a light UNet-style decoder. The loss is an
//! L2 regression on per-patch normalized pixels of the masked patches only.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autograd::{DiffTensor, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;
