use std::rc::Rc;

use super::{BackwardOp, DiffTensor};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("left operand {:?} vs right operand {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

struct AddOp;
impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct SubOp;
impl BackwardOp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.map(|g| -g))]
    }
}

struct MulOp;
impl BackwardOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![
            Some(zip_map(grad, &inputs[1], |g, b| g * b)),
            Some(zip_map(grad, &inputs[0], |g, a| g * a)),
        ]
    }
}

struct ScaleOp(f64);
impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, _: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(grad.map(|g| g * s))]
    }
}

struct SquareOp;
impl BackwardOp for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(grad, &inputs[0], |g, x| 2.0 * g * x))]
    }
}

/// `sum(weights * x)` with fixed weights; plain sum and means are special cases.
struct WeightedSumOp {
    weights: Option<Rc<Vec<f64>>>,
    scale: f64,
}
impl BackwardOp for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0] * self.scale;
        let shape = inputs[0].shape().to_vec();
        let out = match &self.weights {
            None => Tensor::full(shape, g),
            Some(w) => Tensor::new(shape, w.iter().map(|&wi| wi * g).collect()).unwrap(),
        };
        vec![Some(out)]
    }
}

struct ReluOp {
    cap: Option<f64>,
}
impl BackwardOp for ReluOp {
    fn name(&self) -> &'static str {
        if self.cap.is_some() {
            "relu6"
        } else {
            "relu"
        }
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let cap = self.cap.unwrap_or(f64::INFINITY);
        // Subgradient 0 at both kinks.
        let g = zip_map(grad, &inputs[0], |g, x| if x > 0.0 && x < cap { g } else { 0.0 });
        vec![Some(g)]
    }
}

/// Adds a `[C,H,W]` tensor to every item of an `[N,C,H,W]` batch.
struct BroadcastBatchAddOp;
impl BackwardOp for BroadcastBatchAddOp {
    fn name(&self) -> &'static str {
        "add_broadcast_batch"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let per = inputs[1].numel();
        let mut gb = vec![0.0; per];
        for chunk in grad.data().chunks_exact(per) {
            for (acc, g) in gb.iter_mut().zip(chunk) {
                *acc += g;
            }
        }
        vec![
            Some(grad.clone()),
            Some(Tensor::new(inputs[1].shape().to_vec(), gb).unwrap()),
        ]
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> DiffTensor<'t> {
    pub fn add(self, other: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.tape.record(zip_map(&a, &b, |x, y| x + y), &[self, other], AddOp))
    }

    pub fn sub(self, other: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.tape.record(zip_map(&a, &b, |x, y| x - y), &[self, other], SubOp))
    }

    pub fn mul(self, other: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.tape.record(zip_map(&a, &b, |x, y| x * y), &[self, other], MulOp))
    }

    pub fn mul_scalar(self, s: f64) -> DiffTensor<'t> {
        let v = self.value().map(|x| x * s);
        self.tape.record(v, &[self], ScaleOp(s))
    }

    pub fn square(self) -> DiffTensor<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.record(v, &[self], SquareOp)
    }

    pub fn relu(self) -> DiffTensor<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.record(v, &[self], ReluOp { cap: None })
    }

    pub fn relu6(self) -> DiffTensor<'t> {
        let v = self.value().map(|x| x.clamp(0.0, 6.0));
        self.tape.record(v, &[self], ReluOp { cap: Some(6.0) })
    }

    pub fn sum(self) -> DiffTensor<'t> {
        let s = self.value().sum();
        self.tape.record(
            Tensor::scalar(s),
            &[self],
            WeightedSumOp {
                weights: None,
                scale: 1.0,
            },
        )
    }

    pub fn mean(self) -> DiffTensor<'t> {
        let v = self.value();
        let n = v.numel() as f64;
        self.tape.record(
            Tensor::scalar(v.sum() / n),
            &[self],
            WeightedSumOp {
                weights: None,
                scale: 1.0 / n,
            },
        )
    }

    /// Mean over the elements where `mask` is true.
    pub fn masked_mean(self, mask: &[bool]) -> Result<DiffTensor<'t>> {
        let v = self.value();
        if mask.len() != v.numel() {
            return Err(shape_err(
                "masked_mean",
                format!("mask has {} entries for {} values", mask.len(), v.numel()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(shape_err("masked_mean", "mask selects no elements"));
        }
        let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        // Selected values only, in index order, so unselected entries cannot leak in.
        let total: f64 = v.data().iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
        let scale = 1.0 / count as f64;
        Ok(self.tape.record(
            Tensor::scalar(total * scale),
            &[self],
            WeightedSumOp {
                weights: Some(Rc::new(weights)),
                scale,
            },
        ))
    }

    /// Mean over the listed axes, keeping them as size-1 dims.
    pub fn mean_over_axes(self, axes: &[usize]) -> Result<DiffTensor<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(shape_err(
                "mean_over_axes",
                format!("axis {} out of rank {}", bad, shape.len()),
            ));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let out_index = index_projector(&shape, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (i, x) in v.data().iter().enumerate() {
            out[out_index(i)] += x;
        }
        for o in &mut out {
            *o /= count as f64;
        }
        Ok(self.tape.record(
            Tensor::new(out_shape.clone(), out).unwrap(),
            &[self],
            MeanAxesOp {
                in_shape: shape,
                out_shape,
                count,
            },
        ))
    }

    /// `x + p` where `x` is `[N,C,H,W]` and `p` is `[C,H,W]` (or `[1,C,H,W]`).
    pub fn add_broadcast_batch(self, p: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let (x, pv) = (self.value(), p.value());
        let [_, c, h, w] = x.dims4("add_broadcast_batch")?;
        if pv.numel() != c * h * w {
            return Err(shape_err(
                "add_broadcast_batch",
                format!("cannot broadcast {:?} over {:?}", pv.shape(), x.shape()),
            ));
        }
        let per = pv.numel();
        let mut out = x.as_ref().clone();
        for chunk in out.data_mut().chunks_exact_mut(per) {
            for (o, q) in chunk.iter_mut().zip(pv.data()) {
                *o += q;
            }
        }
        Ok(self.tape.record(out, &[self, p], BroadcastBatchAddOp))
    }
}

fn index_projector(shape: &[usize], out_shape: &[usize]) -> impl Fn(usize) -> usize {
    let shape = shape.to_vec();
    let out_shape = out_shape.to_vec();
    move |mut flat| {
        let mut out = 0;
        let mut out_stride = 1;
        let mut coords = vec![0; shape.len()];
        for d in (0..shape.len()).rev() {
            coords[d] = flat % shape[d];
            flat /= shape[d];
        }
        for d in (0..shape.len()).rev() {
            let c = if out_shape[d] == 1 { 0 } else { coords[d] };
            out += c * out_stride;
            out_stride *= out_shape[d];
        }
        out
    }
}

struct MeanAxesOp {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    count: usize,
}
impl BackwardOp for MeanAxesOp {
    fn name(&self) -> &'static str {
        "mean_over_axes"
    }
    fn backward(&self, _: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let proj = index_projector(&self.in_shape, &self.out_shape);
        let scale = 1.0 / self.count as f64;
        let g = Tensor::from_fn(self.in_shape.clone(), |i| grad.data()[proj(i)] * scale);
        vec![Some(g)]
    }
}
