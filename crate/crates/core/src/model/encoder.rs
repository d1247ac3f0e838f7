//! Hierarchical convolutional encoder usable on sparse (masked) or dense input.

use std::sync::Arc;

use rand::{Rng, SeedableRng};

use super::config::EncoderConfig;
use super::layers::{BatchNorm, Conv2d};
use super::params::{Binder, ParamId, ParamKind, ParamStore};
use crate::autograd::DiffTensor;
use crate::error::{invalid, shape_err, Result};
use crate::masking::{active_set_at_scale, PatchMask};
use crate::sparse::{
    add_positional, build_rulebook, build_strided_rulebook, dense_conv_macs, gather_from_dense, sparse_flops, Rulebook,
    SparseTensor2D,
};
use crate::tensor::Tensor;

/// Multiply-accumulate counts of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub layer: String,
    /// Output stride relative to the input image.
    pub scale: usize,
    pub sparse: u64,
    pub dense: u64,
}

impl LayerMacs {
    pub fn ratio(&self) -> f64 {
        self.sparse as f64 / self.dense as f64
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<(Conv2d, BatchNorm)>,
    blocks: Vec<Block>,
}

/// Stem (stride-`stem_stride` patchify conv), then stages separated by
/// stride-2 downsampling; each block is `[3x3 conv, BN, ReLU] x 2` plus an
/// identity shortcut.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    ape: Option<ParamId>,
    stages: Vec<Stage>,
}

impl Encoder {
    /// `ape_grid` adds a zero-initialized per-position embedding at the stem scale.
    pub fn new<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        ape_grid: Option<usize>,
        momentum: f64,
        eps: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stem_stride;
        let stem = Conv2d::new(store, "encoder.stem", 3, cfg.widths[0], s, s, 0, false, rng);
        let stem_bn = BatchNorm::new(store, "encoder.stem_bn", cfg.widths[0], momentum, eps);
        let ape = ape_grid.map(|g| {
            store.add(
                "encoder.ape",
                ParamKind::Embedding,
                Tensor::zeros(vec![cfg.widths[0], g, g]),
            )
        });
        let mut stages = Vec::with_capacity(cfg.stages);
        for (i, &width) in cfg.widths.iter().enumerate() {
            let down = (i > 0).then(|| {
                let k = cfg.downsample_kernel;
                let name = format!("encoder.stages.{i}.down");
                let conv = Conv2d::new(
                    store,
                    &name,
                    cfg.widths[i - 1],
                    width,
                    k,
                    2,
                    k / 2 * (k % 2),
                    false,
                    rng,
                );
                let bn = BatchNorm::new(store, &format!("{name}_bn"), width, momentum, eps);
                (conv, bn)
            });
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| {
                    let name = format!("encoder.stages.{i}.blocks.{j}");
                    Block {
                        conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, 3, 1, 1, false, rng),
                        bn1: BatchNorm::new(store, &format!("{name}.bn1"), width, momentum, eps),
                        conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, 1, 1, false, rng),
                        bn2: BatchNorm::new(store, &format!("{name}.bn2"), width, momentum, eps),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            ape,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn ape(&self) -> Option<ParamId> {
        self.ape
    }

    /// Sparse and dense multiply-accumulate counts of every encoder
    /// convolution for a batch masked by `masks`.
    pub fn macs(&self, masks: &[PatchMask]) -> Result<Vec<LayerMacs>> {
        let cfg = &self.cfg;
        let mut out = Vec::new();
        let mut record = |layer: String, scale: usize, conv: &Conv2d, rb: &Rulebook| {
            let k = (conv.kernel, conv.kernel);
            out.push(LayerMacs {
                layer,
                scale,
                sparse: sparse_flops(rb, conv.cin, conv.cout),
                dense: dense_conv_macs(
                    rb.input(),
                    rb.output(),
                    k,
                    conv.stride,
                    conv.padding,
                    conv.cin,
                    conv.cout,
                ),
            });
        };
        let pixels = Arc::new(active_set_at_scale(masks, 1)?);
        let mut current = Arc::new(active_set_at_scale(masks, cfg.stem_stride)?);
        let s = &self.stem;
        let rb = build_strided_rulebook(&pixels, &current, (s.kernel, s.kernel), s.stride, s.padding)?;
        record("stem".into(), cfg.stem_stride, s, &rb);
        for (i, stage) in self.stages.iter().enumerate() {
            let scale = cfg.stage_stride(i);
            if let Some((d, _)) = &stage.down {
                let target = Arc::new(active_set_at_scale(masks, scale)?);
                let rb = build_strided_rulebook(&current, &target, (d.kernel, d.kernel), d.stride, d.padding)?;
                record(format!("stage{}.down", i + 1), scale, d, &rb);
                current = target;
            }
            let rb = build_rulebook(&current, (3, 3))?;
            for (j, block) in stage.blocks.iter().enumerate() {
                for (k, conv) in [&block.conv1, &block.conv2].into_iter().enumerate() {
                    record(format!("stage{}.block{}.conv{}", i + 1, j + 1, k + 1), scale, conv, &rb);
                }
            }
        }
        Ok(out)
    }

    fn check_image(&self, image: &Tensor) -> Result<[usize; 4]> {
        let dims = image.dims4("encoder")?;
        let [_, c, h, w] = dims;
        let stride = self.cfg.total_stride();
        if c != 3 {
            return Err(shape_err("encoder", format!("expected 3 input channels, got {}", c)));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(shape_err(
                "encoder",
                format!("image {}x{} is not divisible by the total stride {}", h, w, stride),
            ));
        }
        Ok(dims)
    }

    /// Sparse features `S_1 .. S_stages`; the active set of stage `i` is the
    /// mask's active set at that stage's stride.
    pub fn forward_sparse<'t>(
        &self,
        b: &mut Binder<'t, '_>,
        image: DiffTensor<'t>,
        masks: &[PatchMask],
    ) -> Result<Vec<SparseTensor2D<'t>>> {
        let [n, _, h, w] = self.check_image(&image.value())?;
        if masks.len() != n {
            return Err(shape_err("encoder", format!("{} masks for {} images", masks.len(), n)));
        }
        if let Some(m) = masks.iter().find(|m| m.image_size() != (h, w)) {
            return Err(shape_err(
                "encoder",
                format!("mask covers {:?} but images are {}x{}", m.image_size(), h, w),
            ));
        }
        if masks.iter().any(|m| m.visible_count() == 0) {
            return Err(invalid("an image has no visible patch; the encoder needs input"));
        }
        let pixels = Arc::new(active_set_at_scale(masks, 1)?);
        let x = gather_from_dense(image, &pixels)?;
        let stem_sites = Arc::new(active_set_at_scale(masks, self.cfg.stem_stride)?);
        let mut x = self.stem.forward_strided(b, &x, &stem_sites)?;
        x = self.stem_bn.forward_sparse(b, &x)?.relu();
        if let Some(ape) = self.ape {
            let pos = b.param(ape);
            x = add_positional(&x, pos)?;
        }
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some((down, bn)) = &stage.down {
                let target = Arc::new(active_set_at_scale(masks, self.cfg.stage_stride(i))?);
                x = down.forward_strided(b, &x, &target)?;
                x = bn.forward_sparse(b, &x)?;
            }
            if !stage.blocks.is_empty() {
                let rb = Arc::new(build_rulebook(x.active(), (3, 3))?);
                for block in &stage.blocks {
                    let h1 = block.conv1.forward_rulebook(b, &x, &rb)?;
                    let h1 = block.bn1.forward_sparse(b, &h1)?.relu();
                    let h2 = block.conv2.forward_rulebook(b, &h1, &rb)?;
                    let h2 = block.bn2.forward_sparse(b, &h2)?.relu();
                    x = x.add(&h2)?;
                }
            }
            outputs.push(x.clone());
        }
        Ok(outputs)
    }

    /// Ordinary dense evaluation of the same network.
    pub fn forward_dense<'t>(&self, b: &mut Binder<'t, '_>, image: DiffTensor<'t>) -> Result<Vec<DiffTensor<'t>>> {
        self.check_image(&image.value())?;
        let mut x = self.stem.forward_dense(b, image)?;
        x = self.stem_bn.forward_dense(b, x)?.relu();
        if let Some(ape) = self.ape {
            let pos = b.param(ape);
            x = x.add_broadcast_batch(pos)?;
        }
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some((down, bn)) = &stage.down {
                x = down.forward_dense(b, x)?;
                x = bn.forward_dense(b, x)?;
            }
            for block in &stage.blocks {
                let h1 = block.conv1.forward_dense(b, x)?;
                let h1 = block.bn1.forward_dense(b, h1)?.relu();
                let h2 = block.conv2.forward_dense(b, h1)?;
                let h2 = block.bn2.forward_dense(b, h2)?.relu();
                x = x.add(h2)?;
            }
            outputs.push(x);
        }
        Ok(outputs)
    }
}

/// [`Encoder::macs`] for an encoder of the given shape; weights play no role.
pub fn encoder_macs(cfg: &EncoderConfig, masks: &[PatchMask]) -> Result<Vec<LayerMacs>> {
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Encoder::new(cfg, None, 0.1, 1e-5, &mut store, &mut rng)?.macs(masks)
}
