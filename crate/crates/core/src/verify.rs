//! Self-checks runnable from the command line: gradient, oracle, erosion and
//! leakage suites.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_with, GradCheckReport, NormMode, Tape};
use crate::error::{invalid, Error, Result};
use crate::masking::{
    active_set_at_scale, erosion_profile, generate_mask, submanifold_erosion_profile, zero_out_image, PatchMask,
};
use crate::model::{encoder_macs, ModelConfig, ScaleFeatures, SparkModel, Variant};
use crate::sparse::{
    build_rulebook, densify, gather_from_dense, sparse_batchnorm, sparse_downsample, subm_conv2d, ActiveSet, Coord,
};
use crate::tensor::Tensor;

/// Relative-error bound for finite-difference checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Absolute bound for sparse-versus-dense oracle comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Erosion,
    Leakage,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Oracle, Suite::Erosion, Suite::Leakage];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracle => "oracle",
            Suite::Erosion => "erosion",
            Suite::Leakage => "leakage",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            passed: value < limit,
            detail: format!("{value:.3e} < {limit:.0e}"),
        }
    }

    fn holds(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    /// Extra tabular output, e.g. the erosion profile.
    pub table: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite.name())?;
        if let Some(t) = &self.table {
            f.write_str(t)?;
        }
        for c in &self.checks {
            writeln!(
                f,
                "  {} {:<40} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        write!(
            f,
            "suite {}: {}",
            self.suite.name(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Gradcheck => gradcheck_suite(&mut rng),
        Suite::Oracle => oracle_suite(&mut rng),
        Suite::Erosion => erosion_suite(&mut rng),
        Suite::Leakage => leakage_suite(&mut rng),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Random values kept at least `gap` away from every kink in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(-scale..scale);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// A random active set of the given geometry with roughly `density` of the cells.
pub fn random_active_set(batch: usize, h: usize, w: usize, density: f64, rng: &mut impl Rng) -> ActiveSet {
    let mut coords = Vec::new();
    for b in 0..batch {
        for r in 0..h {
            for c in 0..w {
                if rng.random_bool(density) {
                    coords.push(Coord::new(b, r, c));
                }
            }
        }
    }
    ActiveSet::new(batch, h, w, coords).expect("coordinates are unique and in bounds")
}

fn tiny_model_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::desk(16, 8, vec![4, 8]);
    cfg.decoder.fea_dim = 16;
    cfg.mask.ratio = 0.5;
    cfg.ablation = variant.ablation();
    cfg
}

fn grad_entry(name: &str, r: Result<GradCheckReport>) -> Check {
    match r {
        Ok(r) => Check::bound(format!("grad {name}"), r.max_rel_error, GRAD_TOLERANCE),
        Err(e) => Check::holds(format!("grad {name}"), false, e.to_string()),
    }
}

fn gradcheck_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let eps = 1e-5;
    let mut checks = Vec::new();
    let x = randn(&[1, 2, 5, 5], rng);
    let w = randn(&[3, 2, 3, 3], rng);
    let b = randn(&[3], rng);
    checks.push(grad_entry(
        "conv2d",
        grad_check_with(
            |_, v| Ok(v[0].conv2d(v[1], Some(v[2]), 1, 1)?.square().sum()),
            &[x.clone(), w.clone(), b.clone()],
            eps,
            None,
        ),
    ));
    checks.push(grad_entry(
        "conv2d stride 2",
        grad_check_with(
            |_, v| Ok(v[0].conv2d(v[1], None, 2, 0)?.square().sum()),
            &[randn(&[2, 2, 6, 6], rng), randn(&[3, 2, 2, 2], rng)],
            eps,
            None,
        ),
    ));
    checks.push(grad_entry(
        "conv_transpose2d",
        grad_check_with(
            |_, v| Ok(v[0].conv_transpose2d(v[1], Some(v[2]), 2, 1)?.square().sum()),
            &[randn(&[1, 2, 3, 3], rng), randn(&[2, 3, 4, 4], rng), randn(&[3], rng)],
            eps,
            None,
        ),
    ));
    let coef = randn(&[2, 3, 4, 4], rng);
    checks.push(grad_entry(
        "batchnorm2d",
        grad_check_with(
            move |t, v| {
                let (y, _) = v[0].batch_norm(v[1], v[2], NormMode::Train, 1e-5)?;
                Ok(y.mul(t.constant(coef.clone()))?.sum())
            },
            &[randn(&[2, 3, 4, 4], rng), randn(&[3], rng), randn(&[3], rng)],
            eps,
            None,
        ),
    ));
    checks.push(grad_entry(
        "relu",
        grad_check_with(
            |_, v| Ok(v[0].relu().square().sum()),
            &[away_from(&[20], &[0.0], 0.05, 3.0, rng)],
            eps,
            None,
        ),
    ));
    checks.push(grad_entry(
        "relu6",
        grad_check_with(
            |_, v| Ok(v[0].relu6().square().sum()),
            &[away_from(&[30], &[0.0, 6.0], 0.05, 8.0, rng)],
            eps,
            None,
        ),
    ));
    let sel: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    checks.push(grad_entry(
        "add/sub/mul/square/means",
        grad_check_with(
            move |_, v| {
                let a = v[0].add(v[1])?.mul_scalar(0.7);
                let d = a.sub(v[1].square())?.mul(v[0])?;
                d.square().masked_mean(&sel)?.add(d.mean())
            },
            &[randn(&[3, 4], rng), randn(&[3, 4], rng)],
            eps,
            None,
        ),
    ));
    let active = Arc::new(random_active_set(2, 6, 6, 0.5, rng));
    let rb = Arc::new(build_rulebook(&active, (3, 3))?);
    let feats = randn(&[active.len(), 3], rng);
    checks.push(grad_entry("subm_conv2d", {
        let (active, rb) = (active.clone(), rb.clone());
        grad_check_with(
            move |_, v| {
                let sp = crate::sparse::SparseTensor2D::new(active.clone(), v[0])?;
                Ok(subm_conv2d(&sp, v[1], Some(v[2]), &rb)?.features().square().sum())
            },
            &[feats.clone(), randn(&[4, 3, 3, 3], rng), randn(&[4], rng)],
            eps,
            None,
        )
    }));
    let fine_mask = generate_mask(3, 3, 2, 0.5, rng)?;
    let fine = Arc::new(active_set_at_scale(std::slice::from_ref(&fine_mask), 1)?);
    let coarse = Arc::new(active_set_at_scale(std::slice::from_ref(&fine_mask), 2)?);
    let fine_len = fine.len();
    checks.push(grad_entry("sparse_downsample", {
        grad_check_with(
            move |_, v| {
                let sp = crate::sparse::SparseTensor2D::new(fine.clone(), v[0])?;
                Ok(sparse_downsample(&sp, &coarse, v[1], None)?.features().square().sum())
            },
            &[randn(&[fine_len, 2], rng), randn(&[3, 2, 2, 2], rng)],
            eps,
            None,
        )
    }));
    let coef = randn(&[active.len(), 3], rng);
    checks.push(grad_entry("sparse_batchnorm", {
        let active = active.clone();
        grad_check_with(
            move |t, v| {
                let sp = crate::sparse::SparseTensor2D::new(active.clone(), v[0])?;
                let (y, _) = sparse_batchnorm(&sp, v[1], v[2], NormMode::Train, 1e-5)?;
                Ok(y.features().mul(t.constant(coef.clone()))?.sum())
            },
            &[feats.clone(), randn(&[3], rng), randn(&[3], rng)],
            eps,
            None,
        )
    }));
    checks.push(grad_entry("densify", {
        let active = active.clone();
        let coef = randn(&[2, 3, 6, 6], rng);
        grad_check_with(
            move |t, v| {
                let sp = crate::sparse::SparseTensor2D::new(active.clone(), v[0])?;
                Ok(densify(&sp, v[1])?.mul(t.constant(coef.clone()))?.sum())
            },
            &[feats, randn(&[3], rng)],
            eps,
            None,
        )
    }));
    checks.push(grad_entry("gather_from_dense", {
        let active = active.clone();
        grad_check_with(
            move |_, v| Ok(gather_from_dense(v[0], &active)?.features().square().sum()),
            &[randn(&[2, 3, 6, 6], rng)],
            eps,
            None,
        )
    }));
    let target = randn(&[2, 3, 5, 5], rng);
    checks.push(grad_entry(
        "conv -> bn -> relu6 -> mse",
        grad_check_with(
            move |t, v| {
                let y = v[0].conv2d(v[1], None, 1, 1)?;
                let (y, _) = y.batch_norm(v[2], v[3], NormMode::Train, 1e-5)?;
                Ok(y.relu6().sub(t.constant(target.clone()))?.square().mean())
            },
            &[
                randn(&[2, 2, 5, 5], rng),
                randn(&[3, 2, 3, 3], rng),
                randn(&[3], rng),
                randn(&[3], rng),
            ],
            eps,
            None,
        ),
    ));
    // Smaller step for whole models.
    let model_eps = 1e-6;
    for variant in [Variant::Baseline, Variant::ZeroOut, Variant::Ape] {
        let model = SparkModel::new(tiny_model_config(variant), rng)?;
        let img = Tensor::from_fn(vec![2, 3, 16, 16], |_| rng.random());
        let masks = model.sample_masks(2, rng)?;
        checks.push(grad_entry(
            &format!("end-to-end model ({})", variant.name()),
            model.grad_check(&img, &masks, model_eps, Some(8)),
        ));
    }
    Ok(SuiteReport {
        suite: Suite::Gradcheck,
        checks,
        table: None,
    })
}

/// Submanifold convolution computed by zero-filling inactive sites, running
/// the dense convolution, and reading the active sites back.
pub fn zero_fill_subm_oracle(active: &ActiveSet, feats: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let c = feats.shape()[1];
    let (h, wd) = (active.height(), active.width());
    let mut dense = Tensor::zeros(vec![active.batch(), c, h, wd]);
    for (i, co) in active.coords().iter().enumerate() {
        for ch in 0..c {
            dense.data_mut()[((co.batch as usize * c + ch) * h + co.row as usize) * wd + co.col as usize] =
                feats.data()[i * c + ch];
        }
    }
    let k = w.shape()[2];
    let y = tape
        .constant(dense)
        .conv2d(tape.constant(w.clone()), b.map(|b| tape.constant(b.clone())), 1, k / 2)?
        .value();
    let cout = w.shape()[0];
    Ok(Tensor::from_fn(vec![active.len(), cout], |i| {
        let (site, ch) = (i / cout, i % cout);
        let co = active.coords()[site];
        y.data()[((co.batch as usize * cout + ch) * h + co.row as usize) * wd + co.col as usize]
    }))
}

fn oracle_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let mut worst: f64 = 0.0;
    let mut preserved = true;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let batch = rng.random_range(1..3);
        let active = Arc::new(random_active_set(batch, h, w, rng.random_range(0.1..0.9), rng));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let feats = randn(&[active.len(), cin], rng);
        let wt = randn(&[cout, cin, k, k], rng);
        let bias = randn(&[cout], rng);
        let tape = Tape::new();
        let rb = Arc::new(build_rulebook(&active, (k, k))?);
        let sp = crate::sparse::SparseTensor2D::new(active.clone(), tape.constant(feats.clone()))?;
        let y = subm_conv2d(&sp, tape.constant(wt.clone()), Some(tape.constant(bias.clone())), &rb)?;
        preserved &= y.active().same_sites(&active);
        let oracle = zero_fill_subm_oracle(&active, &feats, &wt, Some(&bias))?;
        worst = worst.max(y.features().value().max_abs_diff(&oracle));
    }
    checks.push(Check::bound(
        "subm_conv2d vs zero-fill dense (200)",
        worst,
        ORACLE_TOLERANCE,
    ));
    checks.push(Check::holds(
        "subm_conv2d keeps the active set",
        preserved,
        "200 instances",
    ));

    // Strided downsampling on patch-aligned masks equals the dense strided conv at target sites.
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mask = generate_mask(3, 3, 4, 0.5, rng)?;
        let fine = Arc::new(active_set_at_scale(std::slice::from_ref(&mask), 2)?);
        let coarse = Arc::new(active_set_at_scale(std::slice::from_ref(&mask), 4)?);
        let feats = randn(&[fine.len(), 2], rng);
        let wt = randn(&[3, 2, 2, 2], rng);
        let tape = Tape::new();
        let sp = crate::sparse::SparseTensor2D::new(fine.clone(), tape.constant(feats.clone()))?;
        let y = sparse_downsample(&sp, &coarse, tape.constant(wt.clone()), None)?;
        let zero = tape.constant(Tensor::zeros(vec![2]));
        let dense = densify(&sp, zero)?.conv2d(tape.constant(wt), None, 2, 0)?;
        let expect = gather_from_dense(dense, &coarse)?.features().value();
        worst = worst.max(y.features().value().max_abs_diff(&expect));
    }
    checks.push(Check::bound(
        "sparse_downsample vs dense strided conv",
        worst,
        ORACLE_TOLERANCE,
    ));

    // Sparse batch norm: standardize the columns of the active feature matrix.
    let active = Arc::new(random_active_set(2, 5, 5, 0.5, rng));
    let feats = randn(&[active.len(), 3], rng);
    let tape = Tape::new();
    let sp = crate::sparse::SparseTensor2D::new(active.clone(), tape.constant(feats.clone()))?;
    let ones = tape.constant(Tensor::ones(vec![3]));
    let zeros = tape.constant(Tensor::zeros(vec![3]));
    let (y, _) = sparse_batchnorm(&sp, ones, zeros, NormMode::Train, 1e-5)?;
    let rows = active.len();
    let mut expect = feats.clone();
    for c in 0..3 {
        let col: Vec<f64> = (0..rows).map(|r| feats.data()[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            expect.data_mut()[r * 3 + c] = (col[r] - mean) / (var + 1e-5).sqrt();
        }
    }
    checks.push(Check::bound(
        "sparse_batchnorm vs column standardization",
        y.features().value().max_abs_diff(&expect),
        ORACLE_TOLERANCE,
    ));

    // MAC accounting at 224 px, 32-px patches, 60% masked: count the 3x3
    // taps whose both ends are visible directly on the cell grid.
    let mask = generate_mask(7, 7, 32, 0.6, rng)?;
    let encoder = crate::model::EncoderConfig::default();
    let layers = encoder_macs(&encoder, std::slice::from_ref(&mask))?;
    let visible = mask.visible_fraction();
    let subm = layers
        .iter()
        .find(|l| l.scale == 4 && l.layer.contains("conv"))
        .expect("stage 1 has blocks");
    let cells = mask.active_cells(4)?;
    let on: std::collections::HashSet<(usize, usize)> = cells.iter().copied().collect();
    let mut pairs = 0u64;
    for &(r, c) in &cells {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && on.contains(&(rr as usize, cc as usize)) {
                    pairs += 1;
                }
            }
        }
    }
    let w0 = encoder.widths[0] as u64;
    checks.push(Check::holds(
        "MAC count matches the tap-counting oracle",
        subm.sparse == pairs * w0 * w0,
        format!("{} vs {}", subm.sparse, pairs * w0 * w0),
    ));
    let ratio = subm.ratio();
    checks.push(Check::holds(
        "MAC ratio at scale /4 in (0.30, 0.40]",
        ratio > 0.30 && ratio <= 0.40,
        format!("{ratio:.4}"),
    ));
    let bounded = layers.iter().all(|l| l.ratio() <= visible + 1e-12);
    checks.push(Check::holds(
        "MAC ratio <= visible fraction",
        bounded,
        format!("visible {visible:.4}"),
    ));
    Ok(SuiteReport {
        suite: Suite::Oracle,
        checks,
        table: None,
    })
}

/// A 3x3 grid of 32-pixel patches with only the centre patch masked.
pub fn centre_hole_mask() -> PatchMask {
    let mut visible = vec![true; 9];
    visible[4] = false;
    PatchMask::new(3, 3, 32, visible, 1.0 / 9.0).expect("valid mask")
}

fn erosion_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mask = centre_hole_mask();
    let layers = 20;
    let dense = erosion_profile(&mask, layers);
    let sparse = submanifold_erosion_profile(&mask, layers)?;
    let mut table = String::from("  layers  zero-out  submanifold\n");
    for (k, (d, s)) in dense.iter().zip(&sparse).enumerate() {
        let _ = writeln!(table, "  {k:>6}  {d:>8}  {s:>11}");
    }
    let vanish = dense.iter().position(|&z| z == 0);
    let mut checks = vec![
        Check::holds(
            "zero-out hole vanishes after exactly 16 layers",
            vanish == Some(16),
            format!("{vanish:?}"),
        ),
        Check::holds(
            "submanifold zero region is constant",
            sparse.iter().all(|&z| z == 1024),
            format!("{:?}", &sparse[..3]),
        ),
    ];
    let mut preserved = true;
    for depth in 1..=20 {
        let active = Arc::new(random_active_set(1, 8, 8, 0.4, rng));
        let rb = Arc::new(build_rulebook(&active, (3, 3))?);
        let tape = Tape::new();
        let mut sp = crate::sparse::SparseTensor2D::new(active.clone(), tape.constant(randn(&[active.len(), 2], rng)))?;
        for _ in 0..depth {
            sp = subm_conv2d(&sp, tape.constant(randn(&[2, 2, 3, 3], rng)), None, &rb)?;
        }
        preserved &= sp.active().as_ref() == active.as_ref();
    }
    checks.push(Check::holds(
        "stacks of 1-20 submanifold convs keep the active set",
        preserved,
        "bit-identical",
    ));
    Ok(SuiteReport {
        suite: Suite::Erosion,
        checks,
        table: Some(table),
    })
}

/// Replaces every masked pixel of `img` with a fresh random value.
pub fn randomize_masked(img: &Tensor, masks: &[PatchMask], rng: &mut impl Rng) -> Result<Tensor> {
    let [n, c, h, w] = img.dims4("randomize_masked")?;
    let mut out = img.clone();
    for (b, m) in masks.iter().enumerate().take(n) {
        for (p, hidden) in m.masked_pixel_map().into_iter().enumerate() {
            if hidden {
                for ch in 0..c {
                    out.data_mut()[(b * c + ch) * h * w + p] = rng.random();
                }
            }
        }
    }
    Ok(out)
}

/// Encoder features and masked loss (against targets from `target`) for `input`.
fn encode_and_score(
    model: &SparkModel,
    input: &Tensor,
    target: &Tensor,
    masks: &[PatchMask],
) -> Result<(Vec<Tensor>, f64)> {
    let mut m = model.clone();
    let tape = Tape::new();
    let mut s = m.session(&tape, true);
    let feats = s.encode_input(input, masks)?;
    let recon = s.decode(&feats)?;
    let loss = s.loss(recon, target, masks)?.loss.item();
    let values = feats
        .iter()
        .map(ScaleFeatures::values)
        .map(|v| v.value().as_ref().clone())
        .collect();
    Ok((values, loss))
}

fn leakage_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let sparse = SparkModel::new(tiny_model_config(Variant::Baseline), rng)?;
    let img = Tensor::from_fn(vec![2, 3, 16, 16], |_| rng.random());
    let masks = sparse.sample_masks(2, rng)?;
    let noisy = randomize_masked(&img, &masks, rng)?;
    let (fa, la) = encode_and_score(&sparse, &img, &img, &masks)?;
    let (fb, lb) = encode_and_score(&sparse, &noisy, &img, &masks)?;
    checks.push(Check::holds(
        "sparse: encoder features unchanged",
        fa == fb,
        "masked pixels randomized",
    ));
    checks.push(Check::holds(
        "sparse: masked loss bit-identical",
        la.to_bits() == lb.to_bits(),
        format!("{la:e} vs {lb:e}"),
    ));

    // Zero-out feeds a dense image to the encoder, so whatever sits at the
    // masked pixels of that image propagates.
    let zero = SparkModel::new(tiny_model_config(Variant::ZeroOut), rng)?;
    let zeroed = zero_out_image(&img, &masks)?;
    let filled = randomize_masked(&zeroed, &masks, rng)?;
    let (za, zla) = encode_and_score(&zero, &zeroed, &img, &masks)?;
    let (zb, zlb) = encode_and_score(&zero, &filled, &img, &masks)?;
    checks.push(Check::holds(
        "zero-out: encoder features change",
        za != zb,
        "masked pixels randomized",
    ));
    checks.push(Check::holds(
        "zero-out: masked loss changes",
        zla != zlb,
        format!("{zla:e} vs {zlb:e}"),
    ));

    // Sanity complement: visible pixels do reach the loss.
    let mut visible_changed = img.clone();
    for (b, m) in masks.iter().enumerate() {
        let map = m.masked_pixel_map();
        let p = map.iter().position(|&hidden| !hidden).expect("some pixel is visible");
        visible_changed.data_mut()[b * 3 * 256 + p] += 0.5;
    }
    let (_, lv) = encode_and_score(&sparse, &visible_changed, &img, &masks)?;
    checks.push(Check::holds(
        "sparse: visible pixels change the loss",
        lv != la,
        format!("{la:e} vs {lv:e}"),
    ));
    Ok(SuiteReport {
        suite: Suite::Leakage,
        checks,
        table: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for suite in [Suite::Oracle, Suite::Erosion, Suite::Leakage] {
            let report = run_suite(suite, 0).unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
