use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LossOn, MaskingStrategy, ModelConfig};
use super::decoder::LightDecoder;
use super::encoder::Encoder;
use super::layers::Conv2d;
use super::params::{Binder, Bindings, ParamId, ParamKind, ParamStore};
use crate::autograd::{relative_error, DiffTensor, GradCheckReport, Tape};
use crate::error::{invalid, shape_err, Result};
use crate::masking::{per_patch_normalize, zero_out_image, NormalizedTargets, PatchMask};
use crate::sparse::{densify, SparseTensor2D};
use crate::tensor::Tensor;

/// Encoder output at one scale.
#[derive(Clone, Debug)]
pub enum ScaleFeatures<'t> {
    Sparse(SparseTensor2D<'t>),
    Dense(DiffTensor<'t>),
}

impl<'t> ScaleFeatures<'t> {
    pub fn as_sparse(&self) -> Option<&SparseTensor2D<'t>> {
        match self {
            ScaleFeatures::Sparse(s) => Some(s),
            ScaleFeatures::Dense(_) => None,
        }
    }

    /// Feature values: `[sites, C]` for sparse scales, `[N,C,h,w]` for dense ones.
    pub fn values(&self) -> DiffTensor<'t> {
        match self {
            ScaleFeatures::Sparse(s) => s.features(),
            ScaleFeatures::Dense(d) => *d,
        }
    }

    /// Values as `[N,C,h,w]`, zero at inactive sites.
    pub fn to_dense(&self) -> Result<Tensor> {
        match self {
            ScaleFeatures::Dense(d) => Ok(d.value().as_ref().clone()),
            ScaleFeatures::Sparse(s) => {
                let a = s.active();
                let c = s.channels();
                let (h, w) = (a.height(), a.width());
                let feats = s.features().value();
                let mut out = Tensor::zeros(vec![a.batch(), c, h, w]);
                for (i, co) in a.coords().iter().enumerate() {
                    let (b, r, col) = (co.batch as usize, co.row as usize, co.col as usize);
                    for ch in 0..c {
                        out.data_mut()[((b * c + ch) * h + r) * w + col] = feats.data()[i * c + ch];
                    }
                }
                Ok(out)
            }
        }
    }

    /// Same geometry with the values replaced.
    pub fn with_values(&self, values: DiffTensor<'t>) -> Result<Self> {
        match self {
            ScaleFeatures::Sparse(s) => Ok(ScaleFeatures::Sparse(s.with_features(values)?)),
            ScaleFeatures::Dense(d) => {
                if d.shape() != values.shape() {
                    return Err(shape_err(
                        "ScaleFeatures::with_values",
                        format!("{:?} vs {:?}", values.shape(), d.shape()),
                    ));
                }
                Ok(ScaleFeatures::Dense(values))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct SparkNet {
    encoder: Encoder,
    mask_embeddings: Vec<ParamId>,
    projections: Vec<Conv2d>,
    decoder: LightDecoder,
}

/// Encoder, per-scale mask embeddings and projections, and the light decoder,
/// with all parameters held in one store.
#[derive(Clone, Debug)]
pub struct SparkModel {
    cfg: ModelConfig,
    store: ParamStore,
    net: SparkNet,
}

impl SparkModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (m, eps) = (cfg.bn_momentum, cfg.bn_eps);
        let ape_grid = cfg.ablation.ape.then(|| cfg.image_size / cfg.encoder.stem_stride);
        let encoder = Encoder::new(&cfg.encoder, ape_grid, m, eps, &mut store, rng)?;
        let normal =
            Normal::new(0.0, cfg.mask_embedding_std).map_err(|e| invalid(format!("mask embedding std: {e}")))?;
        let dec_ch = cfg.decoder.channels();
        let stages = cfg.encoder.stages;
        let mut mask_embeddings = Vec::with_capacity(stages);
        let mut projections = Vec::with_capacity(stages);
        for (i, &width) in cfg.encoder.widths.iter().enumerate() {
            let value = Tensor::from_fn(vec![width], |_| normal.sample(rng));
            mask_embeddings.push(store.add(format!("mask_embedding.{i}"), ParamKind::Embedding, value));
            let target = dec_ch[stages - 1 - i];
            projections.push(Conv2d::new(
                &mut store,
                &format!("proj.{i}"),
                width,
                target,
                1,
                1,
                0,
                true,
                rng,
            ));
        }
        let decoder = LightDecoder::new(&cfg.decoder, m, eps, &mut store, rng)?;
        Ok(SparkModel {
            cfg,
            store,
            net: SparkNet {
                encoder,
                mask_embeddings,
                projections,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.net.encoder
    }

    pub fn decoder(&self) -> &LightDecoder {
        &self.net.decoder
    }

    pub fn mask_embeddings(&self) -> &[ParamId] {
        &self.net.mask_embeddings
    }

    /// Starts a forward pass; `train` selects batch statistics and updates
    /// running statistics.
    pub fn session<'t, 's>(&'s mut self, tape: &'t Tape, train: bool) -> Session<'t, 's> {
        Session {
            binder: Binder::new(tape, &mut self.store, train),
            net: &self.net,
            cfg: &self.cfg,
        }
    }

    /// Samples one mask per image from the configured mask generator.
    pub fn sample_masks<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<PatchMask>> {
        let g = self.cfg.grid();
        (0..n).map(|_| self.cfg.mask.generate(g, g, rng)).collect()
    }

    /// Training-mode loss value; running statistics are left untouched.
    pub fn loss_value(&self, image: &Tensor, masks: &[PatchMask]) -> Result<f64> {
        let mut scratch = self.clone();
        let tape = Tape::new();
        let mut s = scratch.session(&tape, true);
        Ok(s.forward(image, masks)?.loss.item())
    }

    /// Checks backward-pass parameter gradients of the training loss against
    /// central differences. `max_per_param` limits each tensor to an evenly
    /// strided subset of its elements.
    pub fn grad_check(
        &self,
        image: &Tensor,
        masks: &[PatchMask],
        eps: f64,
        max_per_param: Option<usize>,
    ) -> Result<GradCheckReport> {
        let analytic = {
            let mut scratch = self.clone();
            let tape = Tape::new();
            let mut s = scratch.session(&tape, true);
            let loss = s.forward(image, masks)?.loss;
            let bindings = s.finish();
            loss.backward()?;
            bindings.grads()
        };
        let mut probe = self.clone();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            checked: 0,
        };
        let ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.get(id).kind.trainable())
            .collect();
        for id in ids {
            let n = self.store.value(id).numel();
            let step = match max_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for i in (0..n).step_by(step) {
                let orig = self.store.value(id).data()[i];
                probe.store.value_mut(id).data_mut()[i] = orig + eps;
                let plus = probe.loss_value(image, masks)?;
                probe.store.value_mut(id).data_mut()[i] = orig - eps;
                let minus = probe.loss_value(image, masks)?;
                probe.store.value_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
                let rel = relative_error(a, numeric);
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst = Some((id.index(), i));
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }

    /// Encoder weights and statistics as a standalone dense network.
    pub fn to_dense_encoder(&self) -> Result<DenseEncoder> {
        DenseEncoder::from_store(&self.cfg, &self.store)
    }
}

/// Reconstruction loss with the targets it was computed against.
#[derive(Debug)]
pub struct LossOutput<'t> {
    pub loss: DiffTensor<'t>,
    pub targets: NormalizedTargets,
}

#[derive(Debug)]
pub struct SparkOutput<'t> {
    pub features: Vec<ScaleFeatures<'t>>,
    pub recon: DiffTensor<'t>,
    pub loss: DiffTensor<'t>,
    pub targets: NormalizedTargets,
}

/// One forward pass over a model, split into stages so callers can inspect
/// or replace intermediate features.
pub struct Session<'t, 's> {
    binder: Binder<'t, 's>,
    net: &'s SparkNet,
    cfg: &'s ModelConfig,
}

impl<'t> Session<'t, '_> {
    pub fn tape(&self) -> &'t Tape {
        self.binder.tape()
    }

    /// Runs the encoder on `image` under the configured masking strategy.
    pub fn encode(&mut self, image: &Tensor, masks: &[PatchMask]) -> Result<Vec<ScaleFeatures<'t>>> {
        match self.cfg.ablation.masking {
            MaskingStrategy::Sparse => self.encode_input(image, masks),
            MaskingStrategy::ZeroOut => self.encode_input(&zero_out_image(image, masks)?, masks),
        }
    }

    /// Runs the encoder on `input` exactly as given: gathered at visible
    /// sites under sparse masking, densely otherwise.
    pub fn encode_input(&mut self, input: &Tensor, masks: &[PatchMask]) -> Result<Vec<ScaleFeatures<'t>>> {
        let x = self.tape().constant(input.clone());
        match self.cfg.ablation.masking {
            MaskingStrategy::Sparse => Ok(self
                .net
                .encoder
                .forward_sparse(&mut self.binder, x, masks)?
                .into_iter()
                .map(ScaleFeatures::Sparse)
                .collect()),
            MaskingStrategy::ZeroOut => Ok(self
                .net
                .encoder
                .forward_dense(&mut self.binder, x)?
                .into_iter()
                .map(ScaleFeatures::Dense)
                .collect()),
        }
    }

    /// Densifies, projects and decodes; deepest scale first. Without
    /// hierarchy only the deepest scale reaches the decoder.
    pub fn decode(&mut self, features: &[ScaleFeatures<'t>]) -> Result<DiffTensor<'t>> {
        let stages = self.net.projections.len();
        if features.len() != stages {
            return Err(invalid(format!(
                "{} feature scales for {} encoder stages",
                features.len(),
                stages
            )));
        }
        let mut to_dec = Vec::with_capacity(stages);
        for i in (0..stages).rev() {
            if !self.cfg.ablation.hierarchy && i + 1 != stages {
                to_dec.push(None);
                continue;
            }
            let dense = match &features[i] {
                ScaleFeatures::Sparse(s) => {
                    let m = self.binder.param(self.net.mask_embeddings[i]);
                    densify(s, m)?
                }
                ScaleFeatures::Dense(d) => *d,
            };
            to_dec.push(Some(self.net.projections[i].forward_dense(&mut self.binder, dense)?));
        }
        self.net.decoder.forward(&mut self.binder, &to_dec)
    }

    /// Loss of `recon` against per-patch-normalized `target_image`.
    pub fn loss(&self, recon: DiffTensor<'t>, target_image: &Tensor, masks: &[PatchMask]) -> Result<LossOutput<'t>> {
        let targets = per_patch_normalize(target_image, self.cfg.mask.patch_size)?;
        let map = pixel_selection(masks, self.cfg.ablation.loss_on)?;
        let loss = spark_loss(recon, &targets.targets, &map)?;
        Ok(LossOutput { loss, targets })
    }

    pub fn forward(&mut self, image: &Tensor, masks: &[PatchMask]) -> Result<SparkOutput<'t>> {
        let features = self.encode(image, masks)?;
        let recon = self.decode(&features)?;
        let LossOutput { loss, targets } = self.loss(recon, image, masks)?;
        Ok(SparkOutput {
            features,
            recon,
            loss,
            targets,
        })
    }

    pub fn finish(self) -> Bindings<'t> {
        self.binder.finish()
    }
}

/// Pixels entering the loss, `[N,H,W]` flattened: masked pixels, or all of them.
pub fn pixel_selection(masks: &[PatchMask], loss_on: LossOn) -> Result<Vec<bool>> {
    if masks.is_empty() {
        return Err(invalid("no masks given"));
    }
    Ok(masks
        .iter()
        .flat_map(|m| match loss_on {
            LossOn::Masked => m.masked_pixel_map(),
            LossOn::All => vec![true; m.image_size().0 * m.image_size().1],
        })
        .collect())
}

/// Mean squared error over the selected pixels (all channels) of `[N,C,H,W]`.
pub fn spark_loss<'t>(recon: DiffTensor<'t>, targets: &Tensor, pixels: &[bool]) -> Result<DiffTensor<'t>> {
    let rv = recon.value();
    let [n, c, h, w] = rv.dims4("spark_loss")?;
    if targets.shape() != rv.shape() {
        return Err(shape_err(
            "spark_loss",
            format!("reconstruction {:?} vs targets {:?}", rv.shape(), targets.shape()),
        ));
    }
    if pixels.len() != n * h * w {
        return Err(shape_err(
            "spark_loss",
            format!("pixel selection has {} entries for {}x{}x{}", pixels.len(), n, h, w),
        ));
    }
    if !pixels.iter().any(|&p| p) {
        return Err(invalid("loss selects no pixels (is every patch visible?)"));
    }
    let plane = h * w;
    let select: Vec<bool> = (0..n * c * plane)
        .map(|i| pixels[(i / (c * plane)) * plane + i % plane])
        .collect();
    let diff = recon.sub(recon.tape().constant(targets.clone()))?;
    diff.square().masked_mean(&select)
}

/// The encoder of a [`SparkModel`] evaluated as ordinary dense convolutions.
#[derive(Clone, Debug)]
pub struct DenseEncoder {
    encoder: Encoder,
    store: ParamStore,
}

impl DenseEncoder {
    /// Rebuilds an encoder from stored parameters (names as in [`SparkModel`]).
    pub fn from_store(cfg: &ModelConfig, source: &ParamStore) -> Result<Self> {
        let mut store = ParamStore::new();
        let ape_grid = source.find("encoder.ape").map(|id| source.value(id).shape()[1]);
        // Values are overwritten below; the generator only fills placeholders.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::new(
            &cfg.encoder,
            ape_grid,
            cfg.bn_momentum,
            cfg.bn_eps,
            &mut store,
            &mut rng,
        )?;
        store.copy_matching_from(source)?;
        Ok(DenseEncoder { encoder, store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Per-stage dense feature maps.
    pub fn forward(&mut self, image: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, &mut self.store, train);
        let x = tape.constant(image.clone());
        let out = self.encoder.forward_dense(&mut b, x)?;
        Ok(out.iter().map(|t| t.value().as_ref().clone()).collect())
    }
}

/// Largest absolute difference between the exported dense encoder and the
/// sparse encoder run with nothing masked, over every scale (eval mode).
pub fn conversion_gap(model: &SparkModel, dense: &mut DenseEncoder, image: &Tensor) -> Result<f64> {
    let [n, _, h, w] = image.dims4("conversion_gap")?;
    let p = model.config().mask.patch_size;
    let masks = vec![PatchMask::all_visible(h / p, w / p, p); n];
    let mut m = model.clone();
    let tape = Tape::new();
    let mut s = m.session(&tape, false);
    let sparse = s.encode_input(image, &masks)?;
    let reference = dense.forward(image, false)?;
    let mut gap = 0.0f64;
    for (sf, d) in sparse.iter().zip(&reference) {
        gap = gap.max(sf.to_dense()?.max_abs_diff(d));
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::active_set_at_scale;
    use crate::model::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(vec![n, 3, size, size], |_| rng.random::<f64>())
    }

    fn tiny(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::desk(16, 8, vec![4, 8]);
        cfg.decoder.fea_dim = 16;
        cfg.ablation = variant.ablation();
        cfg.mask.ratio = 0.5;
        cfg
    }

    fn model(cfg: ModelConfig, seed: u64) -> SparkModel {
        SparkModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn four_stage_resolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = ModelConfig::desk(128, 32, vec![2, 3, 4, 5]);
        cfg.decoder.fea_dim = 32;
        let mut m = model(cfg, 2);
        let img = image(2, 128, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        let out = s.forward(&img, &masks).unwrap();
        let cells: Vec<usize> = out
            .features
            .iter()
            .map(|f| f.as_sparse().unwrap().active().height())
            .collect();
        assert_eq!(cells, vec![32, 16, 8, 4]);
        for (i, f) in out.features.iter().enumerate() {
            let expect = active_set_at_scale(&masks, 4 << i).unwrap();
            assert!(f.as_sparse().unwrap().active().same_sites(&expect));
        }
        assert_eq!(out.recon.shape(), vec![2, 3, 128, 128]);
    }

    #[test]
    fn visible_counts_at_224() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = ModelConfig::desk(224, 32, vec![2, 2, 2, 2]);
        cfg.decoder.fea_dim = 32;
        let mut m = model(cfg, 4);
        let masks = m.sample_masks(1, &mut rng).unwrap();
        assert_eq!(masks[0].visible_count(), 20);
        let img = image(1, 224, &mut rng);
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        let feats = s.encode(&img, &masks).unwrap();
        for (i, f) in feats.iter().enumerate() {
            let per_patch = (8 >> i) * (8 >> i);
            assert_eq!(f.as_sparse().unwrap().len(), 20 * per_patch);
        }
    }

    #[test]
    fn ratio_zero_matches_dense_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for train in [true, false] {
            let mut m = model(tiny(Variant::Baseline), 6);
            let mut dense = m.to_dense_encoder().unwrap();
            let img = image(2, 16, &mut rng);
            let masks = vec![PatchMask::all_visible(2, 2, 8); 2];
            let tape = Tape::new();
            let mut s = m.session(&tape, train);
            let feats = s.encode(&img, &masks).unwrap();
            let d = dense.forward(&img, train).unwrap();
            for (f, dv) in feats.iter().zip(&d) {
                let sp = f.as_sparse().unwrap();
                let zero = tape.constant(Tensor::zeros(vec![sp.channels()]));
                let densified = densify(sp, zero).unwrap().value();
                assert!(densified.max_abs_diff(dv) < 1e-6);
            }
        }
    }

    #[test]
    fn dense_encoder_carries_running_stats_and_accepts_any_stride_multiple() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = model(tiny(Variant::Baseline), 8);
        let img = image(2, 16, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        {
            let tape = Tape::new();
            m.session(&tape, true).forward(&img, &masks).unwrap();
        }
        let mut dense = m.to_dense_encoder().unwrap();
        for (_, p) in dense.store().iter() {
            let src = m.store().find(&p.name).unwrap();
            assert_eq!(&p.value, m.store().value(src));
        }
        assert!(dense.store().find("encoder.stem_bn.running_mean").is_some());
        assert!(dense.store().iter().all(|(_, p)| p.name.starts_with("encoder.")));
        // 24 is a multiple of the stride 8 but not of the patch size 16.
        let out = dense.forward(&image(1, 24, &mut rng), false).unwrap();
        assert_eq!(out[1].shape(), &[1, 8, 3, 3]);
    }

    #[test]
    fn masked_pixels_never_reach_the_sparse_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = model(tiny(Variant::Baseline), 10);
        let img = image(2, 16, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        let mut other = img.clone();
        for (b, mask) in masks.iter().enumerate() {
            let map = mask.masked_pixel_map();
            for c in 0..3 {
                for (p, &hidden) in map.iter().enumerate() {
                    if hidden {
                        other.data_mut()[(b * 3 + c) * 256 + p] = rng.random();
                    }
                }
            }
        }
        let run = |m: &mut SparkModel, input: &Tensor| {
            let tape = Tape::new();
            let mut s = m.session(&tape, true);
            let feats = s.encode(input, &masks).unwrap();
            let recon = s.decode(&feats).unwrap();
            let loss = s.loss(recon, &img, &masks).unwrap().loss.item();
            let values: Vec<Tensor> = feats.iter().map(|f| f.values().value().as_ref().clone()).collect();
            (values, loss)
        };
        let (fa, la) = run(&mut m.clone(), &img);
        let (fb, lb) = run(&mut m, &other);
        assert_eq!(fa, fb);
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn spark_loss_hand_summed() {
        let tape = Tape::new();
        // One image, one channel-pooled 2x2 map with 3 channels.
        let recon = tape.param(Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64 * 0.5));
        let targets = Tensor::from_fn(vec![1, 3, 2, 2], |i| (i % 3) as f64);
        let pixels = [true, false, false, true];
        let loss = spark_loss(recon, &targets, &pixels).unwrap();
        let mut sum = 0.0;
        for c in 0..3 {
            for p in [0, 3] {
                let i = c * 4 + p;
                sum += (i as f64 * 0.5 - (i % 3) as f64).powi(2);
            }
        }
        assert!((loss.item() - sum / 6.0).abs() < 1e-12);
        assert!(spark_loss(recon, &targets, &[false; 4]).is_err());
    }

    #[test]
    fn masked_loss_ignores_visible_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = model(tiny(Variant::Baseline), 12);
        let masks = m.sample_masks(1, &mut rng).unwrap();
        let targets = image(1, 16, &mut rng);
        let recon = image(1, 16, &mut rng);
        let map = pixel_selection(&masks, LossOn::Masked).unwrap();
        let mut perturbed = recon.clone();
        let mut matched = recon.clone();
        for c in 0..3 {
            for (p, &sel) in map.iter().enumerate() {
                let i = c * 256 + p;
                if sel {
                    matched.data_mut()[i] = targets.data()[i];
                } else {
                    perturbed.data_mut()[i] += rng.random::<f64>();
                    matched.data_mut()[i] = 5.0;
                }
            }
        }
        let tape = Tape::new();
        let a = spark_loss(tape.constant(recon), &targets, &map).unwrap().item();
        let b = spark_loss(tape.constant(perturbed), &targets, &map).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(spark_loss(tape.constant(matched), &targets, &map).unwrap().item(), 0.0);
    }

    #[test]
    fn no_hierarchy_ignores_shallow_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = model(tiny(Variant::NoHierarchy), 14);
        let img = image(2, 16, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        let feats = s.encode(&img, &masks).unwrap();
        let base = s.decode(&feats).unwrap().value();
        let mut changed = feats.clone();
        let v = changed[0].values().value().map(|x| x + 1.0);
        changed[0] = changed[0].with_values(tape.constant(v)).unwrap();
        let other = s.decode(&changed).unwrap().value();
        assert_eq!(base.as_ref(), other.as_ref());
    }

    #[test]
    fn hierarchy_uses_shallow_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut m = model(tiny(Variant::Baseline), 16);
        let img = image(2, 16, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        let feats = s.encode(&img, &masks).unwrap();
        let base = s.decode(&feats).unwrap().value();
        let mut changed = feats.clone();
        let v = changed[0].values().value().map(|x| x + 1.0);
        changed[0] = changed[0].with_values(tape.constant(v)).unwrap();
        let other = s.decode(&changed).unwrap().value();
        assert!(base.max_abs_diff(&other) > 1e-6);
    }

    #[test]
    fn zero_initialized_ape_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut base = model(tiny(Variant::Baseline), 18);
        let mut ape = model(tiny(Variant::Ape), 18);
        assert!(ape.store().find("encoder.ape").is_some());
        assert!(base.store().find("encoder.ape").is_none());
        let img = image(2, 16, &mut rng);
        let masks = base.sample_masks(2, &mut rng).unwrap();
        let tape = Tape::new();
        let a = base.session(&tape, true).forward(&img, &masks).unwrap().loss.item();
        let mut s = ape.session(&tape, true);
        let out = s.forward(&img, &masks).unwrap();
        let b = s.finish();
        assert_eq!(a.to_bits(), out.loss.item().to_bits());
        out.loss.backward().unwrap();
        let id = ape.store().find("encoder.ape").unwrap();
        let g = b.leaf(id).unwrap().grad().unwrap();
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn fully_visible_scale_gives_embedding_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut m = model(tiny(Variant::LossAll), 20);
        let img = image(2, 16, &mut rng);
        let masks = vec![PatchMask::all_visible(2, 2, 8); 2];
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        let out = s.forward(&img, &masks).unwrap();
        let b = s.finish();
        out.loss.backward().unwrap();
        for &id in m.mask_embeddings() {
            let g = b.leaf(id).unwrap().grad().unwrap();
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        // Gradient of sum(phi(densify(S, M))) w.r.t. M: each inactive site
        // contributes the projection's column sums.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = model(tiny(Variant::Baseline), 22);
        let img = image(2, 16, &mut rng);
        let masks = m.sample_masks(2, &mut rng).unwrap();
        let sp = {
            let tape = Tape::new();
            let mut s = m.session(&tape, true);
            let f = s.encode(&img, &masks).unwrap();
            let sp = f[1].as_sparse().unwrap().clone();
            (sp.active().clone(), sp.features().value().as_ref().clone())
        };
        let w = Tensor::randn(vec![5, 8, 1, 1], 1.0, &mut rng);
        let inactive = sp.0.total_cells() - sp.0.len();
        let emb = Tensor::randn(vec![8], 0.02, &mut rng);
        let report = crate::autograd::grad_check(
            |tape, x| {
                let feats = SparseTensor2D::new(sp.0.clone(), tape.constant(sp.1.clone()))?;
                Ok(densify(&feats, x[0])?.conv2d(x[1], None, 1, 0)?.sum())
            },
            &[emb.clone(), w.clone()],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        let tape = Tape::new();
        let e = tape.param(emb);
        let feats = SparseTensor2D::new(sp.0.clone(), tape.constant(sp.1.clone())).unwrap();
        let y = densify(&feats, e)
            .unwrap()
            .conv2d(tape.constant(w.clone()), None, 1, 0)
            .unwrap();
        y.sum().backward().unwrap();
        let g = e.grad().unwrap();
        for c in 0..8 {
            let col: f64 = (0..5).map(|o| w.data()[o * 8 + c]).sum();
            assert!((g.data()[c] - inactive as f64 * col).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_scale_projects_the_embedding_field() {
        let tape = Tape::new();
        let active = std::sync::Arc::new(crate::sparse::ActiveSet::empty(1, 2, 2));
        let feats = SparseTensor2D::new(active, tape.constant(Tensor::zeros(vec![0, 8]))).unwrap();
        let emb = Tensor::from_fn(vec![8], |i| i as f64 * 0.1);
        let dense = densify(&feats, tape.constant(emb.clone())).unwrap().value();
        for c in 0..8 {
            for p in 0..4 {
                assert_eq!(dense.data()[c * 4 + p], emb.data()[c]);
            }
        }
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for variant in [Variant::Baseline, Variant::ZeroOut] {
            let m = model(tiny(variant), 26);
            let img = image(2, 16, &mut rng);
            let masks = m.sample_masks(2, &mut rng).unwrap();
            let report = m.grad_check(&img, &masks, 1e-5, Some(6)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn output_shape_equals_input_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for v in Variant::ALL {
            let mut m = model(tiny(v), 28);
            let img = image(1, 16, &mut rng);
            let masks = m.sample_masks(1, &mut rng).unwrap();
            let tape = Tape::new();
            let out = m.session(&tape, true).forward(&img, &masks).unwrap();
            assert_eq!(out.recon.shape(), vec![1, 3, 16, 16]);
            assert!(out.loss.item().is_finite());
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut m = model(tiny(Variant::Baseline), 30);
        let masks = m.sample_masks(1, &mut rng).unwrap();
        let tape = Tape::new();
        let mut s = m.session(&tape, true);
        assert!(s.encode(&image(1, 12, &mut rng), &masks).is_err());
        assert!(s.encode(&image(2, 16, &mut rng), &masks).is_err());
        assert!(s.decode(&[]).is_err());
    }
}
