//! Procedural images: smooth colour ramps with ramp-filled rectangles and discs.

use std::f64::consts::PI;

use rand::Rng;

use crate::tensor::Tensor;

struct Ramp {
    from: [f64; 3],
    to: [f64; 3],
    dir: (f64, f64),
    offset: f64,
    span: f64,
}

impl Ramp {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: f64, min_contrast: f64) -> Self {
        let from: [f64; 3] = std::array::from_fn(|_| rng.random());
        let mut to: [f64; 3] = std::array::from_fn(|_| rng.random());
        let contrast = (0..3).map(|c| (to[c] - from[c]).abs()).fold(0.0, f64::max);
        if contrast < min_contrast {
            let c = rng.random_range(0..3);
            to[c] = if from[c] < 0.5 {
                from[c] + min_contrast
            } else {
                from[c] - min_contrast
            };
        }
        let angle = rng.random_range(0.0..2.0 * PI);
        let dir = (angle.cos(), angle.sin());
        // Project the image corners so the ramp spans the whole canvas.
        let proj = [0.0, dir.0 * size, dir.1 * size, (dir.0 + dir.1) * size];
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ramp {
            from,
            to,
            dir,
            offset: lo,
            span: (hi - lo).max(1.0),
        }
    }

    fn at(&self, c: usize, y: f64, x: f64) -> f64 {
        let t = ((x * self.dir.0 + y * self.dir.1 - self.offset) / self.span).clamp(0.0, 1.0);
        self.from[c] + (self.to[c] - self.from[c]) * t
    }
}

enum Shape {
    Rect {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
    },
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => y >= top && y < bottom && x >= left && x < right,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

/// A `[3,size,size]` image in `[0,1]`: a background ramp plus one to three
/// shapes, each filled with its own ramp.
pub fn synth_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let background = Ramp::random(rng, s, 0.5);
    let shapes: Vec<(Shape, Ramp)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let h = rng.random_range(0.2..0.6) * s;
                let w = rng.random_range(0.2..0.6) * s;
                let top = rng.random_range(0.0..s - h);
                let left = rng.random_range(0.0..s - w);
                Shape::Rect {
                    top,
                    left,
                    bottom: top + h,
                    right: left + w,
                }
            } else {
                let r = rng.random_range(0.1..0.3) * s;
                Shape::Disc {
                    cy: rng.random_range(r..s - r),
                    cx: rng.random_range(r..s - r),
                    r,
                }
            };
            (shape, Ramp::random(rng, s, 0.3))
        })
        .collect();
    let plane = size * size;
    Tensor::from_fn(vec![3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
        let ramp = shapes
            .iter()
            .rev()
            .find(|(shape, _)| shape.contains(y, x))
            .map_or(&background, |(_, r)| r);
        ramp.at(c, y, x)
    })
}
