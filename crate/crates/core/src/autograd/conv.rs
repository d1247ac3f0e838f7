//! Dense 2-d cross-correlation and its transpose, NCHW layout.

use std::rc::Rc;

use super::{BackwardOp, DiffTensor};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding)
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + tap - padding`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(tap: usize, padding: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + padding > tap {
        ((len - 1 + padding - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

/// Patch extraction geometry: a `[c,h,w]` image read by a `kh x kw` kernel
/// at `oh x ow` output positions.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `[c*kh*kw, oh*ow]` patch matrix, zero where taps fall in the padding.
    fn im2col(&self, img: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (oh_lo, oh_hi) = valid_range(ki, self.padding, self.stride, self.h, self.oh);
                for kj in 0..self.kw {
                    let (ow_lo, ow_hi) = valid_range(kj, self.padding, self.stride, self.w, self.ow);
                    let row = &mut out[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + ki - self.padding;
                        let src = &plane[ih * self.w..][..self.w];
                        let dst = &mut row[oh * self.ow..][..self.ow];
                        for ow in ow_lo..ow_hi {
                            dst[ow] = src[ow * self.stride + kj - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: scatters-adds a patch matrix into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (oh_lo, oh_hi) = valid_range(ki, self.padding, self.stride, self.h, self.oh);
                for kj in 0..self.kw {
                    let (ow_lo, ow_hi) = valid_range(kj, self.padding, self.stride, self.w, self.ow);
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + ki - self.padding;
                        let src = &row[oh * self.ow..][..self.ow];
                        let dst = &mut plane[ih * self.w..][..self.w];
                        for ow in ow_lo..ow_hi {
                            dst[ow * self.stride + kj - self.padding] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m,n] = beta * c + op(a) * op(b)`, where `op` optionally
/// transposes. `a` is stored as `[m,k]` (or `[k,m]` when `ta`), `b` as
/// `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least m*k, k*n and m*n elements, matching
    // the dimensions and strides passed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Geom {
    fn unfold(&self) -> Unfold {
        Unfold {
            c: self.cin,
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            padding: self.padding,
            oh: self.oh,
            ow: self.ow,
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(
                op,
                format!("bias shape {:?} does not match {} output channels", b.shape(), cout),
            ));
        }
    }
    Ok(())
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Geom> {
    let [n, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(shape_err(
            "conv2d",
            format!("input channels: input has {} but weight expects {}", cin, wcin),
        ));
    }
    if stride == 0 {
        return Err(invalid("conv2d stride must be positive"));
    }
    if stride == 1 && (kh % 2 == 0 || kw % 2 == 0) {
        return Err(invalid(format!(
            "conv2d with stride 1 needs odd kernels, got {}x{}",
            kh, kw
        )));
    }
    let oh = conv2d_output_size(h, kh, stride, padding)
        .ok_or_else(|| shape_err("conv2d", format!("height {} too small for kernel {}", h, kh)))?;
    let ow = conv2d_output_size(wd, kw, stride, padding)
        .ok_or_else(|| shape_err("conv2d", format!("width {} too small for kernel {}", wd, kw)))?;
    Ok(Geom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    })
}

fn conv2d_forward(g: &Geom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let u = g.unfold();
    let (kk, plane) = (u.rows(), u.cols());
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut cols = vec![0.0; kk * plane];
    for n in 0..g.n {
        u.im2col(&x[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w], &mut cols);
        let y = &mut out[n * g.cout * plane..][..g.cout * plane];
        if let Some(b) = b {
            for co in 0..g.cout {
                y[co * plane..][..plane].fill(b[co]);
            }
        }
        gemm(g.cout, kk, plane, w, false, &cols, false, 1.0, y);
    }
    out
}

/// Returns (dx, dw, db).
fn conv2d_backward(g: &Geom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let u = g.unfold();
    let (kk, plane) = (u.rows(), u.cols());
    let img = g.cin * g.h * g.w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    let mut cols = vec![0.0; kk * plane];
    let mut dcols = vec![0.0; kk * plane];
    for n in 0..g.n {
        let dy_n = &dy[n * g.cout * plane..][..g.cout * plane];
        for co in 0..g.cout {
            db[co] += dy_n[co * plane..][..plane].iter().sum::<f64>();
        }
        u.im2col(&x[n * img..][..img], &mut cols);
        gemm(g.cout, plane, kk, dy_n, false, &cols, true, 1.0, &mut dw);
        gemm(kk, g.cout, plane, w, true, dy_n, false, 0.0, &mut dcols);
        u.col2im(&dcols, &mut dx[n * img..][..img]);
    }
    (dx, dw, db)
}

struct Conv2dOp {
    geom: Geom,
    has_bias: bool,
}

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (dx, dw, db) = conv2d_backward(&self.geom, x.data(), w.data(), grad.data());
        let mut grads = vec![
            Some(Tensor::new(x.shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(w.shape().to_vec(), dw).unwrap()),
        ];
        if self.has_bias {
            grads.push(Some(Tensor::new(vec![self.geom.cout], db).unwrap()));
        }
        grads
    }
}

#[derive(Clone, Copy, Debug)]
struct TGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

fn conv_t_forward(g: &TGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let u = g.unfold();
    let (kk, hw) = (u.rows(), u.cols());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut cols = vec![0.0; kk * hw];
    for n in 0..g.n {
        let y = &mut out[n * g.cout * plane..][..g.cout * plane];
        if let Some(b) = b {
            for co in 0..g.cout {
                y[co * plane..][..plane].fill(b[co]);
            }
        }
        gemm(
            kk,
            g.cin,
            hw,
            w,
            true,
            &x[n * g.cin * hw..][..g.cin * hw],
            false,
            0.0,
            &mut cols,
        );
        u.col2im(&cols, y);
    }
    out
}

fn conv_t_backward(g: &TGeom, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let u = g.unfold();
    let (kk, hw) = (u.rows(), u.cols());
    let plane = g.oh * g.ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    let mut dcols = vec![0.0; kk * hw];
    for n in 0..g.n {
        let dy_n = &dy[n * g.cout * plane..][..g.cout * plane];
        for co in 0..g.cout {
            db[co] += dy_n[co * plane..][..plane].iter().sum::<f64>();
        }
        u.im2col(dy_n, &mut dcols);
        let x_n = &x[n * g.cin * hw..][..g.cin * hw];
        gemm(
            g.cin,
            kk,
            hw,
            w,
            false,
            &dcols,
            false,
            0.0,
            &mut dx[n * g.cin * hw..][..g.cin * hw],
        );
        gemm(g.cin, hw, kk, x_n, false, &dcols, true, 1.0, &mut dw);
    }
    (dx, dw, db)
}

impl TGeom {
    /// The transposed convolution is the adjoint of a convolution reading the
    /// `oh x ow` output at the `h x w` input positions.
    fn unfold(&self) -> Unfold {
        Unfold {
            c: self.cout,
            h: self.oh,
            w: self.ow,
            kh: self.k,
            kw: self.k,
            stride: self.stride,
            padding: self.padding,
            oh: self.h,
            ow: self.w,
        }
    }
}

struct ConvTranspose2dOp {
    geom: TGeom,
    has_bias: bool,
}

impl BackwardOp for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (dx, dw, db) = conv_t_backward(&self.geom, x.data(), w.data(), grad.data());
        let mut grads = vec![
            Some(Tensor::new(x.shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(w.shape().to_vec(), dw).unwrap()),
        ];
        if self.has_bias {
            grads.push(Some(Tensor::new(vec![self.geom.cout], db).unwrap()));
        }
        grads
    }
}

impl<'t> DiffTensor<'t> {
    /// Cross-correlation of `[N,Cin,H,W]` input with `[Cout,Cin,kh,kw]` weights.
    pub fn conv2d(
        self,
        weight: DiffTensor<'t>,
        bias: Option<DiffTensor<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor<'t>> {
        let (x, w) = (self.value(), weight.value());
        let geom = conv_geom(&x, &w, stride, padding)?;
        let bv = bias.map(|b| b.value());
        check_bias("conv2d", bv.as_deref(), geom.cout)?;
        let out = conv2d_forward(&geom, x.data(), w.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(
            out,
            &inputs,
            Conv2dOp {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }

    /// Transposed convolution restricted to the exact ×`stride` upsampling
    /// configurations (`kernel = 2*stride`, `padding = stride/2`, the 4/2/1
    /// decoder layout among them).
    pub fn conv_transpose2d(
        self,
        weight: DiffTensor<'t>,
        bias: Option<DiffTensor<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor<'t>> {
        self.conv_transpose2d_impl(weight, bias, stride, padding, false)
    }

    /// Transposed convolution with any output size `(H-1)*stride + k - 2*padding`.
    pub fn conv_transpose2d_any(
        self,
        weight: DiffTensor<'t>,
        bias: Option<DiffTensor<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor<'t>> {
        self.conv_transpose2d_impl(weight, bias, stride, padding, true)
    }

    fn conv_transpose2d_impl(
        self,
        weight: DiffTensor<'t>,
        bias: Option<DiffTensor<'t>>,
        stride: usize,
        padding: usize,
        allow_any: bool,
    ) -> Result<DiffTensor<'t>> {
        let (x, w) = (self.value(), weight.value());
        let [n, cin, h, wd] = x.dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = w.dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input channels: input has {} but weight expects {}", cin, wcin),
            ));
        }
        if kh != kw {
            return Err(shape_err(
                "conv_transpose2d",
                format!("kernel must be square, got {}x{}", kh, kw),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d stride must be positive"));
        }
        let oh = conv_transpose2d_output_size(h, kh, stride, padding)
            .ok_or_else(|| shape_err("conv_transpose2d", "negative output height"))?;
        let ow = conv_transpose2d_output_size(wd, kw, stride, padding)
            .ok_or_else(|| shape_err("conv_transpose2d", "negative output width"))?;
        if !allow_any && (oh != stride * h || ow != stride * wd) {
            return Err(invalid(format!(
                "conv_transpose2d(kernel {}, stride {}, padding {}) maps {}x{} to {}x{}, not an exact x{} upsample",
                kh, stride, padding, h, wd, oh, ow, stride
            )));
        }
        let bv = bias.map(|b| b.value());
        check_bias("conv_transpose2d", bv.as_deref(), cout)?;
        let geom = TGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            padding,
            oh,
            ow,
        };
        let out = conv_t_forward(&geom, x.data(), w.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape.record(
            out,
            &inputs,
            ConvTranspose2dOp {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }
}
