//! Batch normalization over `[N,C,H,W]` or `[M,C]` tensors.
//!
//! Both layouts are handled as `[outer, C, inner]`; statistics for channel
//! `c` pool every `(outer, inner)` position.

use std::rc::Rc;

use super::{BackwardOp, DiffTensor};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with fixed statistics (running estimates).
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a train-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, as used for normalization.
    pub var: Vec<f64>,
    /// Number of values pooled per channel.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance for running-estimate updates.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let factor = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * factor).collect()
    }
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        [m, c] => Ok((m, c, 1)),
        _ => Err(shape_err(
            "batch_norm",
            format!("expected [N,C,H,W] or [M,C], got {:?}", shape),
        )),
    }
}

struct BatchNormOp {
    outer: usize,
    channels: usize,
    inner: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BackwardOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, c, inner) = (self.outer, self.channels, self.inner);
        let gamma = inputs[1].data();
        let dy = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    dbeta[ch] += dy[i];
                    dgamma[ch] += dy[i] * self.xhat[i];
                }
            }
        }
        let m = (outer * inner) as f64;
        let mut dx = vec![0.0; dy.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let scale = gamma[ch] * self.inv_std[ch];
                for i in base..base + inner {
                    dx[i] = if self.train {
                        scale * (dy[i] - dbeta[ch] / m - self.xhat[i] * dgamma[ch] / m)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(vec![c], dgamma).unwrap()),
            Some(Tensor::new(vec![c], dbeta).unwrap()),
        ]
    }
}

impl<'t> DiffTensor<'t> {
    /// Per-channel normalization followed by the affine map `gamma * xhat + beta`.
    /// Returns the batch statistics in train mode.
    pub fn batch_norm(
        self,
        gamma: DiffTensor<'t>,
        beta: DiffTensor<'t>,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(DiffTensor<'t>, Option<BatchStats>)> {
        let x = self.value();
        let (outer, c, inner) = layout(x.shape())?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [c] || b.shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "channels: input has {} but gamma {:?} and beta {:?}",
                    c,
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let count = outer * inner;
        let xs = x.data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if count == 0 {
                    return Err(shape_err("batch_norm", "train-mode statistics over an empty batch"));
                }
                let mut mean = vec![0.0; c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *m += xs[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for (ch, v) in var.iter_mut().enumerate() {
                        let base = (o * c + ch) * inner;
                        *v += xs[base..base + inner]
                            .iter()
                            .map(|x| (x - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("running statistics have {} channels, input has {}", mean.len(), c),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = g.data()[ch] * xhat[i] + b.data()[ch];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let op = BatchNormOp {
            outer,
            channels: c,
            inner,
            xhat,
            inv_std,
            train: stats.is_some(),
        };
        Ok((self.tape.record(out, &[self, gamma, beta], op), stats))
    }
}
