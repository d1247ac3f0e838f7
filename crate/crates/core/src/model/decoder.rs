//! The light UNet decoder: upsample by 2 per stage, then a two-conv block.

use rand::Rng;

use super::config::LightDecoderConfig;
use super::layers::{BatchNorm, Conv2d, ConvTranspose2d};
use super::params::{Binder, ParamStore};
use crate::autograd::DiffTensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct LightDecoder {
    cfg: LightDecoderConfig,
    stages: Vec<DecoderStage>,
    proj: Conv2d,
}

impl LightDecoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: &LightDecoderConfig,
        momentum: f64,
        eps: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let stages = ch
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (cin, cout) = (pair[0], pair[1]);
                let name = format!("decoder.dec.{i}");
                DecoderStage {
                    up: ConvTranspose2d::new(store, &format!("{name}.up"), cin, cin, 4, 2, 1, rng),
                    conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cin, 3, 1, 1, false, rng),
                    bn1: BatchNorm::new(store, &format!("{name}.bn1"), cin, momentum, eps),
                    conv2: Conv2d::new(store, &format!("{name}.conv2"), cin, cout, 3, 1, 1, false, rng),
                    bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout, momentum, eps),
                }
            })
            .collect();
        let last = *ch.last().expect("channel list is never empty");
        let proj = Conv2d::new(store, "decoder.proj", last, 3, 1, 1, 0, true, rng);
        Ok(LightDecoder {
            cfg: cfg.clone(),
            stages,
            proj,
        })
    }

    pub fn config(&self) -> &LightDecoderConfig {
        &self.cfg
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// `to_dec[i]`, when present, is added to the input of stage `i`;
    /// `to_dec[0]` seeds the decoder and is required.
    pub fn forward<'t>(&self, b: &mut Binder<'t, '_>, to_dec: &[Option<DiffTensor<'t>>]) -> Result<DiffTensor<'t>> {
        if to_dec.len() > self.stages.len() {
            return Err(invalid(format!(
                "{} decoder inputs for {} stages",
                to_dec.len(),
                self.stages.len()
            )));
        }
        let mut x = to_dec
            .first()
            .copied()
            .flatten()
            .ok_or_else(|| invalid("the deepest decoder input is required"))?;
        let ch = self.cfg.channels();
        if x.shape().len() != 4 || x.shape()[1] != ch[0] {
            return Err(shape_err(
                "decoder",
                format!("input 0 has shape {:?}, expected {} channels", x.shape(), ch[0]),
            ));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                if let Some(skip) = to_dec.get(i).copied().flatten() {
                    if skip.shape() != x.shape() {
                        return Err(shape_err(
                            "decoder",
                            format!(
                                "input {} has shape {:?}, stage expects {:?}",
                                i,
                                skip.shape(),
                                x.shape()
                            ),
                        ));
                    }
                    x = x.add(skip)?;
                }
            }
            x = stage.up.forward(b, x)?;
            x = stage.conv1.forward_dense(b, x)?;
            x = stage.bn1.forward_dense(b, x)?.relu6();
            x = stage.conv2.forward_dense(b, x)?;
            x = stage.bn2.forward_dense(b, x)?;
        }
        self.proj.forward_dense(b, x)
    }
}
