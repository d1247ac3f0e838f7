//! Parameterized building blocks shared by the encoder and decoder.

use std::sync::Arc;

use rand::Rng;

use super::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::autograd::{DiffTensor, NormMode};
use crate::error::Result;
use crate::sparse::{sparse_batchnorm, sparse_conv, sparse_strided_conv, ActiveSet, Rulebook, SparseTensor2D};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Uniform init with bound `1/sqrt(fan_in)` for weights and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::uniform(vec![cout, cin, kernel, kernel], bound, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::uniform(vec![cout], bound, rng),
            )
        });
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward_dense<'t>(&self, b: &mut Binder<'t, '_>, x: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        x.conv2d(w, bias, self.stride, self.padding)
    }

    /// Evaluates with a prebuilt rulebook (submanifold layers).
    pub fn forward_rulebook<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        x: &SparseTensor2D<'t>,
        rb: &Arc<Rulebook>,
    ) -> Result<SparseTensor2D<'t>> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        sparse_conv(x, w, bias, rb)
    }

    /// Strided sparse evaluation onto `target` sites.
    pub fn forward_strided<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        x: &SparseTensor2D<'t>,
        target: &Arc<ActiveSet>,
    ) -> Result<SparseTensor2D<'t>> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        sparse_strided_conv(x, target, w, bias, self.stride, self.padding)
    }
}

/// Transposed convolution, weights `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::uniform(vec![cin, cout, kernel, kernel], bound, rng),
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::uniform(vec![cout], bound, rng),
        ));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, x: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        x.conv_transpose2d(w, bias, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::ones(vec![channels])),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(vec![channels])),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(vec![channels]),
            ),
            momentum,
            eps,
        }
    }

    fn apply<'t, T>(
        &self,
        b: &mut Binder<'t, '_>,
        run: impl FnOnce(
            DiffTensor<'t>,
            DiffTensor<'t>,
            NormMode<'_>,
            f64,
        ) -> Result<(T, Option<crate::autograd::BatchStats>)>,
    ) -> Result<T> {
        let gamma = b.param(self.gamma);
        let beta = b.param(self.beta);
        if b.train() {
            let (y, stats) = run(gamma, beta, NormMode::Train, self.eps)?;
            let stats = stats.expect("train mode returns statistics");
            let m = self.momentum;
            let blend = |old: &Tensor, new: &[f64]| {
                Tensor::from_fn(old.shape().to_vec(), |i| (1.0 - m) * old.data()[i] + m * new[i])
            };
            let mean = blend(b.buffer(self.running_mean), &stats.mean);
            let var = blend(b.buffer(self.running_var), &stats.unbiased_var());
            b.set_buffer(self.running_mean, mean);
            b.set_buffer(self.running_var, var);
            Ok(y)
        } else {
            let mean = b.buffer(self.running_mean).data().to_vec();
            let var = b.buffer(self.running_var).data().to_vec();
            let (y, _) = run(gamma, beta, NormMode::Eval { mean: &mean, var: &var }, self.eps)?;
            Ok(y)
        }
    }

    pub fn forward_dense<'t>(&self, b: &mut Binder<'t, '_>, x: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        self.apply(b, |g, be, mode, eps| x.batch_norm(g, be, mode, eps))
    }

    pub fn forward_sparse<'t>(&self, b: &mut Binder<'t, '_>, x: &SparseTensor2D<'t>) -> Result<SparseTensor2D<'t>> {
        self.apply(b, |g, be, mode, eps| sparse_batchnorm(x, g, be, mode, eps))
    }
}
