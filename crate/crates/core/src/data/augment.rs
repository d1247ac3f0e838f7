use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn dims3(img: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(op, format!("expected [C,H,W], got {:?}", s))),
    }
}

/// `size x size` window with its top-left corner at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "crop")?;
    if top + size > h || left + size > w {
        return Err(shape_err(
            "crop",
            format!("{size}x{size} window at ({top},{left}) exceeds {h}x{w}"),
        ));
    }
    Ok(Tensor::from_fn(vec![c, size, size], |i| {
        let (ch, r, col) = (i / (size * size), i / size % size, i % size);
        img.data()[(ch * h + top + r) * w + left + col]
    }))
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(img, "hflip")?;
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let col = i % w;
        img.data()[i - col + (w - 1 - col)]
    }))
}

/// Crop parameters drawn by [`augment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl CropFlip {
    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> Self {
        CropFlip {
            top: rng.random_range(0..=h - size),
            left: rng.random_range(0..=w - size),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, img: &Tensor, size: usize) -> Result<Tensor> {
        let out = crop(img, self.top, self.left, size)?;
        if self.flip {
            hflip(&out)
        } else {
            Ok(out)
        }
    }
}

/// Uniform random `out_size` crop followed by a horizontal flip with
/// probability one half.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, out_size: usize, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = dims3(img, "augment")?;
    if out_size == 0 || out_size > h || out_size > w {
        return Err(shape_err(
            "augment",
            format!("cannot crop {out_size}x{out_size} from {h}x{w}"),
        ));
    }
    CropFlip::sample(h, w, out_size, rng).apply(img, out_size)
}
