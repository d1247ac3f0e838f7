//! Patch masks, per-scale active sets, reconstruction targets and the dense
//! zero-out baseline.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{invalid, shape_err, Result};
use crate::sparse::{build_rulebook, densify, gather_from_dense, subm_conv2d, ActiveSet, Coord};
use crate::tensor::Tensor;

/// Floor on the per-patch standard deviation used as the normalization divisor.
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSampling {
    /// Exactly `round(ratio * patches)` patches, uniformly without replacement.
    #[default]
    FixedCount,
    /// Each patch masked independently with probability `ratio`.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub patch_size: usize,
    pub ratio: f64,
    #[serde(default)]
    pub sampling: MaskSampling,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            patch_size: 32,
            ratio: 0.6,
            sampling: MaskSampling::FixedCount,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, total_stride: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(invalid(format!("mask ratio must be in [0, 1), got {}", self.ratio)));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(total_stride) {
            return Err(invalid(format!(
                "patch size {} must be a positive multiple of the encoder stride {}",
                self.patch_size, total_stride
            )));
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(&self, grid_h: usize, grid_w: usize, rng: &mut R) -> Result<PatchMask> {
        match self.sampling {
            MaskSampling::FixedCount => generate_mask(grid_h, grid_w, self.patch_size, self.ratio, rng),
            MaskSampling::Bernoulli => generate_bernoulli_mask(grid_h, grid_w, self.patch_size, self.ratio, rng),
        }
    }
}

/// Which square patches of an image are visible to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    visible: Vec<bool>,
    ratio: f64,
}

/// Number of masked patches for `patches` patches at `ratio`: rounded, and at
/// least one whenever `ratio > 0`.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    let n = (ratio * patches as f64).round() as usize;
    if ratio > 0.0 {
        n.max(1)
    } else {
        n
    }
}

pub fn generate_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio must be in [0, 1), got {}", ratio)));
    }
    let total = grid_h * grid_w;
    if total == 0 {
        return Err(invalid("mask grid is empty"));
    }
    let masked = masked_count(total, ratio);
    if masked >= total {
        return Err(invalid(format!(
            "ratio {} masks all {} patches; at least one must stay visible",
            ratio, total
        )));
    }
    let mut visible = vec![true; total];
    for i in sample(rng, total, masked) {
        visible[i] = false;
    }
    PatchMask::new(grid_h, grid_w, patch_size, visible, ratio)
}

/// Independent per-patch masking; redrawn until at least one patch is visible.
pub fn generate_bernoulli_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio must be in [0, 1), got {}", ratio)));
    }
    let total = grid_h * grid_w;
    if total == 0 {
        return Err(invalid("mask grid is empty"));
    }
    loop {
        let visible: Vec<bool> = (0..total).map(|_| !rng.random_bool(ratio)).collect();
        if visible.iter().any(|&v| v) {
            return PatchMask::new(grid_h, grid_w, patch_size, visible, ratio);
        }
    }
}

impl PatchMask {
    pub fn new(grid_h: usize, grid_w: usize, patch_size: usize, visible: Vec<bool>, ratio: f64) -> Result<Self> {
        if visible.len() != grid_h * grid_w {
            return Err(shape_err(
                "PatchMask::new",
                format!("{} flags for a {}x{} grid", visible.len(), grid_h, grid_w),
            ));
        }
        if patch_size == 0 {
            return Err(invalid("patch size must be positive"));
        }
        Ok(PatchMask {
            grid_h,
            grid_w,
            patch_size,
            visible,
            ratio,
        })
    }

    pub fn all_visible(grid_h: usize, grid_w: usize, patch_size: usize) -> Self {
        PatchMask::new(grid_h, grid_w, patch_size, vec![true; grid_h * grid_w], 0.0).unwrap()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch_size, self.grid_w * self.patch_size)
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.grid_w + col]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn masked_count(&self) -> usize {
        self.visible.len() - self.visible_count()
    }

    pub fn visible_fraction(&self) -> f64 {
        self.visible_count() as f64 / self.visible.len() as f64
    }

    /// Cells of the `stride`-downsampled grid whose covering patch is visible.
    pub fn active_cells(&self, stride: usize) -> Result<Vec<(usize, usize)>> {
        if stride == 0 || !self.patch_size.is_multiple_of(stride) {
            return Err(invalid(format!(
                "stride {} does not divide the mask patch size {}",
                stride, self.patch_size
            )));
        }
        let cells = self.patch_size / stride;
        let mut out = Vec::with_capacity(self.visible_count() * cells * cells);
        for r in 0..self.grid_h * cells {
            for c in 0..self.grid_w * cells {
                if self.is_visible(r / cells, c / cells) {
                    out.push((r, c));
                }
            }
        }
        Ok(out)
    }

    /// Full-resolution `[H, W]` map, `true` at masked pixels.
    pub fn masked_pixel_map(&self) -> Vec<bool> {
        let (h, w) = self.image_size();
        let p = self.patch_size;
        (0..h * w).map(|i| !self.is_visible(i / w / p, i % w / p)).collect()
    }
}

pub fn masked_pixel_map(mask: &PatchMask) -> Vec<bool> {
    mask.masked_pixel_map()
}

/// Active set of a batch at one scale, image `b` taking its cells from `masks[b]`.
pub fn active_set_at_scale(masks: &[PatchMask], stride: usize) -> Result<ActiveSet> {
    let first = masks.first().ok_or_else(|| invalid("no masks given"))?;
    let (h, w) = first.image_size();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(invalid(format!(
            "stride {} does not divide the {}x{} image",
            stride, h, w
        )));
    }
    let mut coords = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        if m.image_size() != (h, w) || m.patch_size != first.patch_size {
            return Err(invalid("all masks in a batch must share geometry"));
        }
        coords.extend(m.active_cells(stride)?.into_iter().map(|(r, c)| Coord::new(b, r, c)));
    }
    ActiveSet::new(masks.len(), h / stride, w / stride, coords)
}

/// Per-patch mean and divisor used to standardize a target patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct NormalizedTargets {
    pub targets: Tensor,
    /// Indexed `[batch][patch_row][patch_col]`, flattened.
    pub stats: Vec<PatchStats>,
    pub patch_size: usize,
}

impl NormalizedTargets {
    /// Maps normalized values back to pixel space with each patch's own stats.
    pub fn denormalize(&self, normalized: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = normalized.dims4("denormalize")?;
        if normalized.shape() != self.targets.shape() {
            return Err(shape_err(
                "denormalize",
                format!("{:?} vs targets {:?}", normalized.shape(), self.targets.shape()),
            ));
        }
        let p = self.patch_size;
        let (gh, gw) = (h / p, w / p);
        let mut out = normalized.clone();
        for b in 0..n {
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let s = self.stats[(b * gh + r / p) * gw + col / p];
                        let i = ((b * c + ch) * h + r) * w + col;
                        out.data_mut()[i] = normalized.data()[i] * s.std + s.mean;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Standardizes every `patch x patch` block of `[N,C,H,W]` pixels, pooling
/// all channels. Constant patches map to zero.
pub fn per_patch_normalize(img: &Tensor, patch: usize) -> Result<NormalizedTargets> {
    let [n, c, h, w] = img.dims4("per_patch_normalize")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err(
            "per_patch_normalize",
            format!("image {}x{} is not divisible into {}-pixel patches", h, w, patch),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros(img.shape().to_vec());
    let mut stats = Vec::with_capacity(n * gh * gw);
    let count = (c * patch * patch) as f64;
    let x = img.data();
    let idx = |b: usize, ch: usize, r: usize, col: usize| ((b * c + ch) * h + r) * w + col;
    for b in 0..n {
        for pr in 0..gh {
            for pc in 0..gw {
                let positions = || {
                    (0..c).flat_map(move |ch| {
                        (0..patch)
                            .flat_map(move |i| (0..patch).map(move |j| idx(b, ch, pr * patch + i, pc * patch + j)))
                    })
                };
                let first = x[idx(b, 0, pr * patch, pc * patch)];
                let constant = positions().all(|i| x[i] == first);
                let mean = positions().map(|i| x[i]).sum::<f64>() / count;
                let var = positions().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / count;
                let std = var.sqrt().max(TARGET_EPS);
                if !constant {
                    for i in positions() {
                        out.data_mut()[i] = (x[i] - mean) / std;
                    }
                }
                stats.push(PatchStats {
                    mean: if constant { first } else { mean },
                    std,
                });
            }
        }
    }
    Ok(NormalizedTargets {
        targets: out,
        stats,
        patch_size: patch,
    })
}

/// Sets every pixel of a masked patch to zero (image `b` uses `masks[b]`).
pub fn zero_out_image(img: &Tensor, masks: &[PatchMask]) -> Result<Tensor> {
    let [n, c, h, w] = img.dims4("zero_out_image")?;
    if masks.len() != n {
        return Err(shape_err(
            "zero_out_image",
            format!("{} masks for {} images", masks.len(), n),
        ));
    }
    let mut out = img.clone();
    for (b, m) in masks.iter().enumerate() {
        if m.image_size() != (h, w) {
            return Err(shape_err(
                "zero_out_image",
                format!("mask covers {:?}, image is {}x{}", m.image_size(), h, w),
            ));
        }
        let hidden = m.masked_pixel_map();
        for ch in 0..c {
            let plane = &mut out.data_mut()[(b * c + ch) * h * w..][..h * w];
            for (v, &masked) in plane.iter_mut().zip(&hidden) {
                if masked {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// All-zero pixel counts of a zero-out image under `n_convs` stacked dense
/// 3x3 all-ones convolutions. Entry `k` is the count after `k` layers.
pub fn erosion_profile(mask: &PatchMask, n_convs: usize) -> Vec<usize> {
    let (h, w) = mask.image_size();
    let mut support: Vec<bool> = mask.masked_pixel_map().into_iter().map(|m| !m).collect();
    let mut profile = Vec::with_capacity(n_convs + 1);
    profile.push(support.iter().filter(|&&s| !s).count());
    for _ in 0..n_convs {
        let prev = support.clone();
        for r in 0..h {
            for c in 0..w {
                if prev[r * w + c] {
                    continue;
                }
                let lit = (r.saturating_sub(1)..(r + 2).min(h))
                    .any(|rr| (c.saturating_sub(1)..(c + 2).min(w)).any(|cc| prev[rr * w + cc]));
                support[r * w + c] = lit;
            }
        }
        profile.push(support.iter().filter(|&&s| !s).count());
    }
    profile
}

/// Same measurement with submanifold convolutions over the visible pixels,
/// computed by actually running the convolutions.
pub fn submanifold_erosion_profile(mask: &PatchMask, n_convs: usize) -> Result<Vec<usize>> {
    let (h, w) = mask.image_size();
    let tape = Tape::new();
    let active = Arc::new(active_set_at_scale(std::slice::from_ref(mask), 1)?);
    let rb = Arc::new(build_rulebook(&active, (3, 3))?);
    let ones = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let mut sp = gather_from_dense(tape.constant(Tensor::ones(vec![1, 1, h, w])), &active)?;
    let count_zeros = |sp: &crate::sparse::SparseTensor2D<'_>| -> Result<usize> {
        Ok(densify(sp, zero)?.value().data().iter().filter(|&&v| v == 0.0).count())
    };
    let mut profile = vec![count_zeros(&sp)?];
    for _ in 0..n_convs {
        sp = subm_conv2d(&sp, ones, None, &rb)?;
        profile.push(count_zeros(&sp)?);
    }
    Ok(profile)
}
