use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spark_core::masking::{active_set_at_scale, generate_mask, masked_count, per_patch_normalize, zero_out_image};
use spark_core::sparse::{build_rulebook, densify, gather_from_dense, sparse_flops, subm_conv2d, ActiveSet, Coord};
use spark_core::{Tape, Tensor};

fn active_set(n: usize, h: usize, w: usize, on: &[bool]) -> ActiveSet {
    let mut coords = Vec::new();
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                if on[(b * h + r) * w + c] {
                    coords.push(Coord::new(b, r, c));
                }
            }
        }
    }
    ActiveSet::new(n, h, w, coords).unwrap()
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, Vec<bool>)> {
    (1usize..3, 1usize..7, 1usize..7).prop_flat_map(|(n, h, w)| {
        (
            Just(n),
            Just(h),
            Just(w),
            proptest::collection::vec(any::<bool>(), n * h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn submanifold_conv_keeps_sites_and_ignores_inactive_values(
        (n, h, w, on) in instance(),
        k in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>(),
    ) {
        let active = Arc::new(active_set(n, h, w, &on));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let img = Tensor::randn(vec![n, 2, h, w], 1.0, &mut rng);
        // Same active values, different garbage at inactive pixels.
        let mut other = Tensor::randn(vec![n, 2, h, w], 5.0, &mut rng);
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            let pix = (i / (2 * h * w)) * h * w + i % (h * w);
            if on[pix] {
                *v = img.data()[i];
            }
        }
        let wt = tape.constant(Tensor::randn(vec![3, 2, k, k], 1.0, &mut rng));
        let rb = Arc::new(build_rulebook(&active, (k, k)).unwrap());
        let a = subm_conv2d(&gather_from_dense(tape.constant(img), &active).unwrap(), wt, None, &rb).unwrap();
        let b = subm_conv2d(&gather_from_dense(tape.constant(other), &active).unwrap(), wt, None, &rb).unwrap();
        prop_assert!(a.active().same_sites(&active));
        let (fa, fb) = (a.features().value(), b.features().value());
        prop_assert_eq!(fa.data(), fb.data());
        // Every pair joins two active sites, at most k*k per output site.
        prop_assert!(sparse_flops(&rb, 1, 1) <= (active.len() * k * k) as u64);
    }

    #[test]
    fn densify_round_trips_active_values((n, h, w, on) in instance(), seed in any::<u64>()) {
        let active = Arc::new(active_set(n, h, w, &on));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let feats = Tensor::randn(vec![active.len(), 4], 1.0, &mut rng);
        let sp = spark_core::sparse::SparseTensor2D::new(active.clone(), tape.constant(feats.clone())).unwrap();
        let fill = Tensor::from_fn(vec![4], |i| 10.0 + i as f64);
        let dense = densify(&sp, tape.constant(fill)).unwrap();
        let back = gather_from_dense(dense, &active).unwrap();
        let got = back.features().value();
        prop_assert_eq!(got.data(), feats.data());
        let d = dense.value();
        for b in 0..n {
            for r in 0..h {
                for c in 0..w {
                    if !on[(b * h + r) * w + c] {
                        for ch in 0..4 {
                            prop_assert_eq!(d.data()[((b * 4 + ch) * h + r) * w + c], 10.0 + ch as f64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn masks_hide_the_exact_count_at_every_scale(grid in 1usize..9, ratio in 0.0f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = grid * grid;
        let expect = masked_count(total, ratio);
        prop_assume!(expect < total);
        let mask = generate_mask(grid, grid, 32, ratio, &mut rng).unwrap();
        prop_assert_eq!(mask.masked_count(), expect);
        for s in [1usize, 2, 4, 8, 16, 32] {
            let set = active_set_at_scale(std::slice::from_ref(&mask), s).unwrap();
            let per = (32 / s) * (32 / s);
            prop_assert_eq!(set.len(), (total - expect) * per);
        }
    }

    #[test]
    fn zero_out_touches_only_masked_pixels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = generate_mask(3, 3, 4, 0.5, &mut rng).unwrap();
        let img = Tensor::from_fn(vec![1, 3, 12, 12], |i| 1.0 + i as f64);
        let z = zero_out_image(&img, std::slice::from_ref(&mask)).unwrap();
        let masked = mask.masked_pixel_map();
        for (i, (&a, &b)) in img.data().iter().zip(z.data()).enumerate() {
            if masked[i % 144] {
                prop_assert_eq!(b, 0.0);
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn per_patch_targets_are_standardized(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::randn(vec![2, 3, 8, 8], scale, &mut rng);
        let t = per_patch_normalize(&img, 4).unwrap();
        let back = t.denormalize(&t.targets).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-9 * scale.max(1.0));
        for s in &t.stats {
            prop_assert!(s.std > 0.0);
        }
    }
}
