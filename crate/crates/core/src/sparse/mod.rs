//! Sparse feature maps over a 2-d grid and submanifold sparse convolution.
//!
//! A [`SparseTensor2D`] stores features only at active sites. Convolutions
//! are driven by a [`Rulebook`] that lists, per kernel offset, the
//! `(input, output)` site pairs that actually multiply-accumulate.

mod active;
mod flops;
mod ops;
mod rulebook;

pub use active::{ActiveSet, Coord};
pub use flops::{dense_conv_macs, sparse_flops};
pub use ops::{
    add_positional, densify, gather_from_dense, sparse_batchnorm, sparse_conv, sparse_downsample, sparse_strided_conv,
    subm_conv2d,
};
pub use rulebook::{build_rulebook, build_strided_rulebook, Rulebook, RulebookMode};

use std::sync::Arc;

use crate::autograd::DiffTensor;
use crate::error::{shape_err, Result};

/// Features attached to the active sites of one scale.
#[derive(Clone, Debug)]
pub struct SparseTensor2D<'t> {
    active: Arc<ActiveSet>,
    features: DiffTensor<'t>,
}

impl<'t> SparseTensor2D<'t> {
    /// `features` must be `[active.len(), channels]`.
    pub fn new(active: Arc<ActiveSet>, features: DiffTensor<'t>) -> Result<Self> {
        let shape = features.shape();
        match shape.as_slice() {
            [rows, _] if *rows == active.len() => Ok(SparseTensor2D { active, features }),
            _ => Err(shape_err(
                "SparseTensor2D::new",
                format!(
                    "features {:?} do not match {} active sites (expected [sites, channels])",
                    shape,
                    active.len()
                ),
            )),
        }
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        &self.active
    }

    pub fn features(&self) -> DiffTensor<'t> {
        self.features
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Same sites, new features (e.g. after an elementwise op).
    pub fn with_features(&self, features: DiffTensor<'t>) -> Result<Self> {
        Self::new(self.active.clone(), features)
    }

    pub fn relu(&self) -> Self {
        SparseTensor2D {
            active: self.active.clone(),
            features: self.features.relu(),
        }
    }

    pub fn add(&self, other: &SparseTensor2D<'t>) -> Result<Self> {
        if !self.active.same_sites(&other.active) {
            return Err(crate::Error::Sparse(
                "adding sparse tensors with different active sets".into(),
            ));
        }
        self.with_features(self.features.add(other.features)?)
    }
}
