use std::rc::Rc;
use std::sync::Arc;

use super::{build_strided_rulebook, ActiveSet, Rulebook, RulebookMode, SparseTensor2D};
use crate::autograd::{BackwardOp, BatchStats, DiffTensor, NormMode};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Weights of one kernel offset transposed to `[cin][cout]`.
fn offset_weights(w: &[f64], cin: usize, cout: usize, taps: usize, offset: usize) -> Vec<f64> {
    let mut wt = vec![0.0; cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            wt[ci * cout + co] = w[(co * cin + ci) * taps + offset];
        }
    }
    wt
}

struct SparseConvOp {
    rulebook: Arc<Rulebook>,
    cin: usize,
    cout: usize,
    has_bias: bool,
}

impl BackwardOp for SparseConvOp {
    fn name(&self) -> &'static str {
        "sparse_conv"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (cin, cout) = (self.cin, self.cout);
        let taps = self.rulebook.offsets();
        let dy = grad.data();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for offset in 0..taps {
            let pairs = self.rulebook.pairs(offset);
            if pairs.is_empty() {
                continue;
            }
            let wt = offset_weights(w, cin, cout, taps, offset);
            let mut dwt = vec![0.0; cin * cout];
            for &(i, o) in pairs {
                let xi = &x[i as usize * cin..][..cin];
                let dyo = &dy[o as usize * cout..][..cout];
                let dxi = &mut dx[i as usize * cin..][..cin];
                for ci in 0..cin {
                    let row = &wt[ci * cout..][..cout];
                    let drow = &mut dwt[ci * cout..][..cout];
                    let mut acc = 0.0;
                    for co in 0..cout {
                        acc += dyo[co] * row[co];
                        drow[co] += xi[ci] * dyo[co];
                    }
                    dxi[ci] += acc;
                }
            }
            for co in 0..cout {
                for ci in 0..cin {
                    dw[(co * cin + ci) * taps + offset] += dwt[ci * cout + co];
                }
            }
        }
        let mut grads = vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dx).unwrap()),
            Some(Tensor::new(inputs[1].shape().to_vec(), dw).unwrap()),
        ];
        if self.has_bias {
            let mut db = vec![0.0; cout];
            for row in dy.chunks_exact(cout) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            grads.push(Some(Tensor::new(vec![cout], db).unwrap()));
        }
        grads
    }
}

/// Sparse convolution driven by any rulebook built for `sp`'s active set.
pub fn sparse_conv<'t>(
    sp: &SparseTensor2D<'t>,
    weight: DiffTensor<'t>,
    bias: Option<DiffTensor<'t>>,
    rb: &Arc<Rulebook>,
) -> Result<SparseTensor2D<'t>> {
    if !rb.input().same_sites(sp.active()) {
        return Err(Error::Sparse(
            "rulebook was built for a different active set than the input".into(),
        ));
    }
    let w = weight.value();
    let [cout, cin, kh, kw] = w.dims4("sparse_conv")?;
    if (kh, kw) != rb.kernel() {
        return Err(shape_err(
            "sparse_conv",
            format!("weight kernel {}x{} but rulebook kernel {:?}", kh, kw, rb.kernel()),
        ));
    }
    if sp.channels() != cin {
        return Err(shape_err(
            "sparse_conv",
            format!(
                "input channels: features have {} but weight expects {}",
                sp.channels(),
                cin
            ),
        ));
    }
    let x = sp.features().value();
    let xd = x.data();
    let taps = kh * kw;
    let m_out = rb.output().len();
    let mut out = vec![0.0; m_out * cout];
    let bv = bias.map(|b| b.value());
    if let Some(b) = &bv {
        if b.shape() != [cout] {
            return Err(shape_err(
                "sparse_conv",
                format!("bias {:?} for {} outputs", b.shape(), cout),
            ));
        }
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    for offset in 0..taps {
        let pairs = rb.pairs(offset);
        if pairs.is_empty() {
            continue;
        }
        let wt = offset_weights(w.data(), cin, cout, taps, offset);
        for &(i, o) in pairs {
            let xi = &xd[i as usize * cin..][..cin];
            let oo = &mut out[o as usize * cout..][..cout];
            for ci in 0..cin {
                let xv = xi[ci];
                let row = &wt[ci * cout..][..cout];
                for co in 0..cout {
                    oo[co] += xv * row[co];
                }
            }
        }
    }
    let out = Tensor::new(vec![m_out, cout], out)?;
    let mut inputs = vec![sp.features(), weight];
    inputs.extend(bias);
    let op = SparseConvOp {
        rulebook: rb.clone(),
        cin,
        cout,
        has_bias: bias.is_some(),
    };
    let features = sp.features().tape().record(out, &inputs, op);
    SparseTensor2D::new(rb.output().clone(), features)
}

/// Submanifold convolution: output sites are exactly the input sites.
pub fn subm_conv2d<'t>(
    sp: &SparseTensor2D<'t>,
    weight: DiffTensor<'t>,
    bias: Option<DiffTensor<'t>>,
    rb: &Arc<Rulebook>,
) -> Result<SparseTensor2D<'t>> {
    if rb.mode() != RulebookMode::Submanifold {
        return Err(Error::Sparse("subm_conv2d needs a submanifold rulebook".into()));
    }
    sparse_conv(sp, weight, bias, rb)
}

/// Strided sparse convolution onto an externally supplied output active set.
pub fn sparse_strided_conv<'t>(
    sp: &SparseTensor2D<'t>,
    target: &Arc<ActiveSet>,
    weight: DiffTensor<'t>,
    bias: Option<DiffTensor<'t>>,
    stride: usize,
    padding: usize,
) -> Result<SparseTensor2D<'t>> {
    let [_, _, kh, kw] = weight.value().dims4("sparse_strided_conv")?;
    let rb = build_strided_rulebook(sp.active(), target, (kh, kw), stride, padding)?;
    sparse_conv(sp, weight, bias, &Arc::new(rb))
}

/// Stride-2 downsampling: 2x2 kernels use no padding, odd kernels pad by `k/2`.
pub fn sparse_downsample<'t>(
    sp: &SparseTensor2D<'t>,
    target: &Arc<ActiveSet>,
    weight: DiffTensor<'t>,
    bias: Option<DiffTensor<'t>>,
) -> Result<SparseTensor2D<'t>> {
    let [_, _, kh, _] = weight.value().dims4("sparse_downsample")?;
    let padding = if kh % 2 == 1 { kh / 2 } else { 0 };
    sparse_strided_conv(sp, target, weight, bias, 2, padding)
}

/// Batch norm whose statistics pool active sites only.
pub fn sparse_batchnorm<'t>(
    sp: &SparseTensor2D<'t>,
    gamma: DiffTensor<'t>,
    beta: DiffTensor<'t>,
    mode: NormMode<'_>,
    eps: f64,
) -> Result<(SparseTensor2D<'t>, Option<BatchStats>)> {
    let (y, stats) = sp.features().batch_norm(gamma, beta, mode, eps)?;
    Ok((sp.with_features(y)?, stats))
}

struct DensifyOp {
    active: Arc<ActiveSet>,
    channels: usize,
}

impl BackwardOp for DensifyOp {
    fn name(&self) -> &'static str {
        "densify"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let (h, w) = (self.active.height(), self.active.width());
        let plane = h * w;
        let g = grad.data();
        let mut dfeat = vec![0.0; self.active.len() * c];
        for (i, coord) in self.active.coords().iter().enumerate() {
            let (b, pos) = (coord.batch as usize, coord.row as usize * w + coord.col as usize);
            for ch in 0..c {
                dfeat[i * c + ch] = g[(b * c + ch) * plane + pos];
            }
        }
        let occ = self.active.occupancy();
        let mut dm = vec![0.0; c];
        for b in 0..self.active.batch() {
            let occ_b = &occ[b * plane..][..plane];
            for (ch, d) in dm.iter_mut().enumerate() {
                let gp = &g[(b * c + ch) * plane..][..plane];
                *d += gp.iter().zip(occ_b).filter(|(_, &o)| !o).map(|(v, _)| v).sum::<f64>();
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dfeat).unwrap()),
            Some(Tensor::new(vec![c], dm).unwrap()),
        ]
    }
}

/// Dense `[N,C,h,w]` map: active sites carry their features, every other
/// position carries the embedding `m`.
pub fn densify<'t>(sp: &SparseTensor2D<'t>, m: DiffTensor<'t>) -> Result<DiffTensor<'t>> {
    let c = sp.channels();
    let mv = m.value();
    if mv.shape() != [c] {
        return Err(shape_err(
            "densify",
            format!("mask embedding {:?} does not match {} channels", mv.shape(), c),
        ));
    }
    let active = sp.active();
    let (n, h, w) = (active.batch(), active.height(), active.width());
    let plane = h * w;
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * plane..][..plane].fill(mv.data()[ch]);
        }
    }
    let f = sp.features().value();
    for (i, coord) in active.coords().iter().enumerate() {
        let (b, pos) = (coord.batch as usize, coord.row as usize * w + coord.col as usize);
        for ch in 0..c {
            out[(b * c + ch) * plane + pos] = f.data()[i * c + ch];
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    let op = DensifyOp {
        active: active.clone(),
        channels: c,
    };
    Ok(m.tape().record(out, &[sp.features(), m], op))
}

struct GatherOp {
    active: Arc<ActiveSet>,
    channels: usize,
}

impl BackwardOp for GatherOp {
    fn name(&self) -> &'static str {
        "gather_from_dense"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let (h, w) = (self.active.height(), self.active.width());
        let plane = h * w;
        let mut dx = vec![0.0; inputs[0].numel()];
        for (i, coord) in self.active.coords().iter().enumerate() {
            let (b, pos) = (coord.batch as usize, coord.row as usize * w + coord.col as usize);
            for ch in 0..c {
                dx[(b * c + ch) * plane + pos] += grad.data()[i * c + ch];
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), dx).unwrap())]
    }
}

/// Reads `[N,C,H,W]` values at the active sites into `[sites, C]` features.
pub fn gather_from_dense<'t>(x: DiffTensor<'t>, active: &Arc<ActiveSet>) -> Result<SparseTensor2D<'t>> {
    let xv = x.value();
    let [n, c, h, w] = xv.dims4("gather_from_dense")?;
    if (n, h, w) != (active.batch(), active.height(), active.width()) {
        return Err(shape_err(
            "gather_from_dense",
            format!(
                "dense input {:?} vs active grid {}x{}x{}",
                xv.shape(),
                active.batch(),
                active.height(),
                active.width()
            ),
        ));
    }
    let plane = h * w;
    let mut out = vec![0.0; active.len() * c];
    for (i, coord) in active.coords().iter().enumerate() {
        let (b, pos) = (coord.batch as usize, coord.row as usize * w + coord.col as usize);
        for ch in 0..c {
            out[i * c + ch] = xv.data()[(b * c + ch) * plane + pos];
        }
    }
    let out = Tensor::new(vec![active.len(), c], out)?;
    let op = GatherOp {
        active: active.clone(),
        channels: c,
    };
    let features = x.tape().record(out, &[x], op);
    SparseTensor2D::new(active.clone(), features)
}

struct PositionalOp {
    active: Arc<ActiveSet>,
    channels: usize,
}

impl BackwardOp for PositionalOp {
    fn name(&self) -> &'static str {
        "add_positional"
    }
    fn backward(&self, inputs: &[Rc<Tensor>], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let (h, w) = (self.active.height(), self.active.width());
        let mut dpos = vec![0.0; c * h * w];
        for (i, coord) in self.active.coords().iter().enumerate() {
            let pos = coord.row as usize * w + coord.col as usize;
            for ch in 0..c {
                dpos[ch * h * w + pos] += grad.data()[i * c + ch];
            }
        }
        vec![
            Some(grad.clone()),
            Some(Tensor::new(inputs[1].shape().to_vec(), dpos).unwrap()),
        ]
    }
}

/// Adds a `[C,h,w]` per-position embedding to every active site.
pub fn add_positional<'t>(sp: &SparseTensor2D<'t>, pos: DiffTensor<'t>) -> Result<SparseTensor2D<'t>> {
    let c = sp.channels();
    let (h, w) = (sp.active().height(), sp.active().width());
    let pv = pos.value();
    if pv.shape() != [c, h, w] {
        return Err(shape_err(
            "add_positional",
            format!("embedding {:?} for a {}x{} map with {} channels", pv.shape(), h, w, c),
        ));
    }
    let mut out = sp.features().value().as_ref().clone();
    for (i, coord) in sp.active().coords().iter().enumerate() {
        let p = coord.row as usize * w + coord.col as usize;
        for ch in 0..c {
            out.data_mut()[i * c + ch] += pv.data()[ch * h * w + p];
        }
    }
    let op = PositionalOp {
        active: sp.active().clone(),
        channels: c,
    };
    let features = pos.tape().record(out, &[sp.features(), pos], op);
    sp.with_features(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Tape};
    use crate::sparse::{build_rulebook, Coord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, p: f64) -> Arc<ActiveSet> {
        let coords = (0..n)
            .flat_map(|b| (0..h).flat_map(move |r| (0..w).map(move |c| Coord::new(b, r, c))))
            .filter(|_| rng.random_bool(p))
            .collect();
        Arc::new(ActiveSet::new(n, h, w, coords).unwrap())
    }

    /// Zero-fill oracle: scatter features into zeros, run dense conv, read back.
    fn zero_fill_conv(
        set: &ActiveSet,
        feats: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out: &ActiveSet,
    ) -> Tensor {
        let tape = Tape::new();
        let c = feats.shape()[1];
        let sp = SparseTensor2D::new(Arc::new(set.clone()), tape.constant(feats.clone())).unwrap();
        let dense = densify(&sp, tape.constant(Tensor::zeros(vec![c]))).unwrap();
        let y = dense
            .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), stride, pad)
            .unwrap();
        gather_from_dense(y, &Arc::new(out.clone()))
            .unwrap()
            .features()
            .value()
            .as_ref()
            .clone()
    }

    #[test]
    fn isolated_site_sees_center_tap_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = Arc::new(ActiveSet::new(1, 5, 5, vec![Coord::new(0, 2, 3)]).unwrap());
        let rb = Arc::new(build_rulebook(&set, (3, 3)).unwrap());
        let tape = Tape::new();
        let x = Tensor::randn(vec![1, 2], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![3], 1.0, &mut rng);
        let sp = SparseTensor2D::new(set, tape.constant(x.clone())).unwrap();
        let y = subm_conv2d(&sp, tape.constant(w.clone()), Some(tape.constant(b.clone())), &rb).unwrap();
        for co in 0..3 {
            let expect = b.data()[co]
                + (0..2)
                    .map(|ci| w.data()[(co * 2 + ci) * 9 + 4] * x.data()[ci])
                    .sum::<f64>();
            assert!((y.features().value().data()[co] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn subm_matches_zero_fill_dense_and_keeps_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let p = if trial == 0 { 1.0 } else { rng.random_range(0.1..0.9) };
            let set = random_set(&mut rng, 2, 6, 7, p);
            let k = if trial % 3 == 0 { 5 } else { 3 };
            let x = Tensor::randn(vec![set.len(), 3], 1.0, &mut rng);
            let w = Tensor::randn(vec![4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn(vec![4], 1.0, &mut rng);
            let tape = Tape::new();
            let sp = SparseTensor2D::new(set.clone(), tape.constant(x.clone())).unwrap();
            let rb = Arc::new(build_rulebook(&set, (k, k)).unwrap());
            let y = subm_conv2d(&sp, tape.constant(w.clone()), Some(tape.constant(b.clone())), &rb).unwrap();
            assert!(y.active().same_sites(&set));
            let oracle = zero_fill_conv(&set, &x, &w, &b, 1, k / 2, &set);
            assert!(y.features().value().max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn wrong_rulebook_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(&mut rng, 1, 4, 4, 0.5);
        let b = Arc::new(ActiveSet::full(1, 4, 4));
        let tape = Tape::new();
        let sp = SparseTensor2D::new(a.clone(), tape.constant(Tensor::zeros(vec![a.len(), 1]))).unwrap();
        let rb = Arc::new(build_rulebook(&b, (3, 3)).unwrap());
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(subm_conv2d(&sp, w, None, &rb).is_err());
    }

    #[test]
    fn downsample_full_and_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full = Arc::new(ActiveSet::full(1, 4, 4));
        let x = Tensor::randn(vec![16, 2], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn(vec![3], 1.0, &mut rng);
        let tape = Tape::new();
        let sp = SparseTensor2D::new(full.clone(), tape.constant(x.clone())).unwrap();
        let target = Arc::new(ActiveSet::full(1, 2, 2));
        let y = sparse_downsample(&sp, &target, tape.constant(w.clone()), Some(tape.constant(b.clone()))).unwrap();
        let oracle = zero_fill_conv(&full, &x, &w, &b, 2, 0, &target);
        assert!(y.features().value().max_abs_diff(&oracle) < 1e-12);

        // One aligned 2x2 block active at the bottom-right.
        let block = Arc::new(
            ActiveSet::new(
                1,
                4,
                4,
                vec![
                    Coord::new(0, 2, 2),
                    Coord::new(0, 2, 3),
                    Coord::new(0, 3, 2),
                    Coord::new(0, 3, 3),
                ],
            )
            .unwrap(),
        );
        let xb = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let spb = SparseTensor2D::new(block.clone(), tape.constant(xb.clone())).unwrap();
        let tb = Arc::new(ActiveSet::new(1, 2, 2, vec![Coord::new(0, 1, 1)]).unwrap());
        let y = sparse_downsample(&spb, &tb, tape.constant(w.clone()), Some(tape.constant(b.clone()))).unwrap();
        assert_eq!(y.len(), 1);
        let oracle = zero_fill_conv(&block, &xb, &w, &b, 2, 0, &tb);
        assert!(y.features().value().max_abs_diff(&oracle) < 1e-12);

        let misaligned = Arc::new(ActiveSet::new(1, 2, 2, vec![Coord::new(0, 0, 0)]).unwrap());
        assert!(sparse_downsample(&spb, &misaligned, tape.constant(w), None).is_err());
    }

    #[test]
    fn downsample_three_by_three_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 1, 8, 8, 0.6);
        let mut targets = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                if (0..2).any(|i| (0..2).any(|j| set.contains(Coord::new(0, 2 * r + i, 2 * c + j)))) {
                    targets.push(Coord::new(0, r, c));
                }
            }
        }
        let target = Arc::new(ActiveSet::new(1, 4, 4, targets).unwrap());
        let x = Tensor::randn(vec![set.len(), 2], 1.0, &mut rng);
        let w = Tensor::randn(vec![2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::zeros(vec![2]);
        let tape = Tape::new();
        let sp = SparseTensor2D::new(set.clone(), tape.constant(x.clone())).unwrap();
        let y = sparse_downsample(&sp, &target, tape.constant(w.clone()), Some(tape.constant(b.clone()))).unwrap();
        assert!(
            y.features()
                .value()
                .max_abs_diff(&zero_fill_conv(&set, &x, &w, &b, 2, 1, &target))
                < 1e-12
        );
    }

    #[test]
    fn densify_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Tensor::new(vec![2], vec![0.5, -1.25]).unwrap();

        // fully active: dense copy, zero gradient to m
        let full = Arc::new(ActiveSet::full(1, 2, 3));
        let tape = Tape::new();
        let mv = tape.param(m.clone());
        let fx = tape.param(Tensor::randn(vec![6, 2], 1.0, &mut rng));
        let d = densify(&SparseTensor2D::new(full, fx).unwrap(), mv).unwrap();
        d.sum().backward().unwrap();
        assert_eq!(mv.grad().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(fx.grad().unwrap(), Tensor::ones(vec![6, 2]));

        // fully inactive: constant field of m
        let empty = Arc::new(ActiveSet::empty(2, 2, 2));
        let tape = Tape::new();
        let d = densify(
            &SparseTensor2D::new(empty, tape.constant(Tensor::zeros(vec![0, 2]))).unwrap(),
            tape.constant(m.clone()),
        )
        .unwrap();
        let dv = d.value();
        for b in 0..2 {
            for ch in 0..2 {
                assert!(dv.data()[(b * 2 + ch) * 4..][..4].iter().all(|&v| v == m.data()[ch]));
            }
        }

        // width mismatch
        let tape = Tape::new();
        let one = Arc::new(ActiveSet::full(1, 1, 1));
        let sp = SparseTensor2D::new(one, tape.constant(Tensor::zeros(vec![1, 3]))).unwrap();
        assert!(densify(&sp, tape.constant(m)).is_err());
    }

    #[test]
    fn densify_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = random_set(&mut rng, 2, 4, 5, 0.5);
        let x = Tensor::randn(vec![set.len(), 3], 1.0, &mut rng);
        let m = Tensor::randn(vec![3], 1.0, &mut rng);
        let tape = Tape::new();
        let d = densify(
            &SparseTensor2D::new(set.clone(), tape.constant(x.clone())).unwrap(),
            tape.constant(m.clone()),
        )
        .unwrap();
        let d = d.value();
        let mut oracle = Tensor::zeros(vec![2, 3, 4, 5]);
        for b in 0..2 {
            for r in 0..4 {
                for c in 0..5 {
                    for ch in 0..3 {
                        let v = match set.index_of(Coord::new(b, r, c)) {
                            Some(i) => x.data()[i * 3 + ch],
                            None => m.data()[ch],
                        };
                        oracle.data_mut()[((b * 3 + ch) * 4 + r) * 5 + c] = v;
                    }
                }
            }
        }
        assert_eq!(*d, oracle);
    }

    #[test]
    fn gather_round_trip_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let full = Arc::new(ActiveSet::full(2, 4, 4));
        let g = gather_from_dense(tape.constant(x.clone()), &full).unwrap();
        let back = densify(&g, tape.constant(Tensor::full(vec![3], 9.0))).unwrap();
        assert_eq!(*back.value(), x);

        let empty = Arc::new(ActiveSet::empty(2, 4, 4));
        let g = gather_from_dense(tape.constant(x.clone()), &empty).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.features().shape(), vec![0, 3]);

        let set = random_set(&mut rng, 2, 4, 4, 0.4);
        let g = gather_from_dense(tape.constant(x.clone()), &set).unwrap();
        for (i, c) in set.coords().iter().enumerate() {
            for ch in 0..3 {
                let direct = x.data()[((c.batch as usize * 3 + ch) * 4 + c.row as usize) * 4 + c.col as usize];
                assert_eq!(g.features().value().data()[i * 3 + ch], direct);
            }
        }
    }

    #[test]
    fn gradients_to_inactive_positions_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 1, 5, 5, 0.4);
        let tape = Tape::new();
        let x = tape.param(Tensor::randn(vec![1, 2, 5, 5], 1.0, &mut rng));
        let g = gather_from_dense(x, &set).unwrap();
        let d = densify(&g, tape.constant(Tensor::ones(vec![2]))).unwrap();
        d.square().sum().backward().unwrap();
        let grad = x.grad().unwrap();
        let occ = set.occupancy();
        for ch in 0..2 {
            for p in 0..25 {
                if !occ[p] {
                    assert_eq!(grad.data()[ch * 25 + p], 0.0);
                }
            }
        }
    }

    #[test]
    fn sparse_batchnorm_flat_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = random_set(&mut rng, 2, 5, 5, 0.5);
        let x = Tensor::randn(vec![set.len(), 3], 2.0, &mut rng);
        let tape = Tape::new();
        let sp = SparseTensor2D::new(set.clone(), tape.constant(x.clone())).unwrap();
        let (y, stats) = sparse_batchnorm(
            &sp,
            tape.constant(Tensor::ones(vec![3])),
            tape.constant(Tensor::zeros(vec![3])),
            NormMode::Train,
            1e-5,
        )
        .unwrap();
        assert_eq!(stats.unwrap().count, set.len());
        let m = set.len();
        for ch in 0..3 {
            let col: Vec<f64> = (0..m).map(|r| x.data()[r * 3 + ch]).collect();
            let mean = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let out_mean = (0..m).map(|r| y.features().value().data()[r * 3 + ch]).sum::<f64>() / m as f64;
            assert!(out_mean.abs() < 1e-6);
            for r in 0..m {
                let expect = (col[r] - mean) / (var + 1e-5).sqrt();
                assert!((y.features().value().data()[r * 3 + ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_batchnorm_all_active_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.5, &mut rng);
        let tape = Tape::new();
        let (g, b) = (
            tape.constant(Tensor::randn(vec![3], 1.0, &mut rng)),
            tape.constant(Tensor::randn(vec![3], 1.0, &mut rng)),
        );
        let xd = tape.constant(x);
        let (dense, _) = xd.batch_norm(g, b, NormMode::Train, 1e-5).unwrap();
        let full = Arc::new(ActiveSet::full(2, 4, 4));
        let sp = gather_from_dense(xd, &full).unwrap();
        let (sbn, _) = sparse_batchnorm(&sp, g, b, NormMode::Train, 1e-5).unwrap();
        let back = densify(&sbn, tape.constant(Tensor::zeros(vec![3]))).unwrap();
        assert!(back.value().max_abs_diff(&dense.value()) < 1e-12);
    }

    #[test]
    fn sparse_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set = random_set(&mut rng, 2, 4, 4, 0.6);
        let rb = Arc::new(build_rulebook(&set, (3, 3)).unwrap());
        let mut tcoords = Vec::new();
        for b in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    if (0..2).any(|i| (0..2).any(|j| set.contains(Coord::new(b, 2 * r + i, 2 * c + j)))) {
                        tcoords.push(Coord::new(b, r, c));
                    }
                }
            }
        }
        let target = Arc::new(ActiveSet::new(2, 2, 2, tcoords).unwrap());
        let inputs = vec![
            Tensor::randn(vec![2, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng),
            Tensor::randn(vec![3], 0.5, &mut rng),
            Tensor::randn(vec![3], 1.0, &mut rng),
            Tensor::randn(vec![3], 1.0, &mut rng),
            Tensor::randn(vec![2, 3, 2, 2], 0.5, &mut rng),
            Tensor::randn(vec![2], 1.0, &mut rng),
            Tensor::randn(vec![3, 4, 4], 1.0, &mut rng),
        ];
        let report = grad_check(
            |_, xs| {
                let sp = gather_from_dense(xs[0], &set)?;
                let y = subm_conv2d(&sp, xs[1], Some(xs[2]), &rb)?;
                let y = add_positional(&y, xs[7])?;
                let (y, _) = sparse_batchnorm(&y, xs[3], xs[4], NormMode::Train, 1e-5)?;
                let z = sparse_downsample(&y, &target, xs[5], None)?;
                let d = densify(&z, xs[6])?;
                d.square().sum().add(y.features().square().mean())
            },
            &inputs,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
