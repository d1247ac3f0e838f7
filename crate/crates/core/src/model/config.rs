use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::masking::MaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_stride: usize,
    /// 2 (no padding) or 3 (padding 1); both stride 2.
    pub downsample_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stages: 4,
            widths: vec![32, 64, 128, 256],
            blocks_per_stage: 1,
            stem_stride: 4,
            downsample_kernel: 2,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.stem_stride << (self.stages - 1)
    }

    /// Stride of stage `i` relative to the input image.
    pub fn stage_stride(&self, i: usize) -> usize {
        self.stem_stride << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(invalid("encoder needs at least one stage"));
        }
        if self.widths.len() != self.stages {
            return Err(invalid(format!(
                "{} stage widths given for {} stages",
                self.widths.len(),
                self.stages
            )));
        }
        if self.widths.contains(&0) {
            return Err(invalid("stage widths must be positive"));
        }
        if self.stem_stride == 0 {
            return Err(invalid("stem stride must be positive"));
        }
        if !matches!(self.downsample_kernel, 2 | 3) {
            return Err(invalid(format!(
                "downsample kernel must be 2 or 3, got {}",
                self.downsample_kernel
            )));
        }
        Ok(())
    }
}

/// The light UNet decoder: `log2(upsample_ratio)` stages halving the width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightDecoderConfig {
    pub fea_dim: usize,
    pub upsample_ratio: usize,
}

impl Default for LightDecoderConfig {
    fn default() -> Self {
        LightDecoderConfig {
            fea_dim: 768,
            upsample_ratio: 32,
        }
    }
}

impl LightDecoderConfig {
    pub fn stages(&self) -> usize {
        self.upsample_ratio.trailing_zeros() as usize
    }

    /// Width entering each stage plus the final width: `fea_dim / 2^i`.
    pub fn channels(&self) -> Vec<usize> {
        (0..=self.stages()).map(|i| self.fea_dim >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.upsample_ratio.is_power_of_two() || self.upsample_ratio < 2 {
            return Err(invalid(format!(
                "decoder upsample ratio must be a power of two >= 2, got {}",
                self.upsample_ratio
            )));
        }
        if self.fea_dim >> self.stages() == 0 {
            return Err(invalid(format!(
                "decoder width {} cannot be halved {} times",
                self.fea_dim,
                self.stages()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingStrategy {
    #[default]
    Sparse,
    ZeroOut,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossOn {
    #[default]
    Masked,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub masking: MaskingStrategy,
    pub hierarchy: bool,
    pub ape: bool,
    pub loss_on: LossOn,
}

impl Default for Ablation {
    fn default() -> Self {
        Variant::Baseline.ablation()
    }
}

/// Named ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    ZeroOut,
    NoHierarchy,
    Ape,
    LossAll,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::ZeroOut,
        Variant::NoHierarchy,
        Variant::Ape,
        Variant::LossAll,
    ];

    pub fn ablation(self) -> Ablation {
        let base = Ablation {
            masking: MaskingStrategy::Sparse,
            hierarchy: true,
            ape: false,
            loss_on: LossOn::Masked,
        };
        match self {
            Variant::Baseline => base,
            Variant::ZeroOut => Ablation {
                masking: MaskingStrategy::ZeroOut,
                ..base
            },
            Variant::NoHierarchy => Ablation {
                hierarchy: false,
                ..base
            },
            Variant::Ape => Ablation { ape: true, ..base },
            Variant::LossAll => Ablation {
                loss_on: LossOn::All,
                ..base
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ZeroOut => "zero-out",
            Variant::NoHierarchy => "no-hierarchy",
            Variant::Ape => "ape",
            Variant::LossAll => "loss-all",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub mask: MaskConfig,
    pub encoder: EncoderConfig,
    pub decoder: LightDecoderConfig,
    pub ablation: Ablation,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub mask_embedding_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            mask: MaskConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: LightDecoderConfig::default(),
            ablation: Ablation::default(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            mask_embedding_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// A model whose decoder matches the encoder stride, with `fea_dim`
    /// twice the deepest encoder width.
    pub fn desk(image_size: usize, patch_size: usize, widths: Vec<usize>) -> Self {
        let encoder = EncoderConfig {
            stages: widths.len(),
            widths,
            ..EncoderConfig::default()
        };
        let decoder = LightDecoderConfig {
            fea_dim: encoder.widths.last().copied().unwrap_or(1) * 2,
            upsample_ratio: encoder.total_stride(),
        };
        ModelConfig {
            image_size,
            mask: MaskConfig {
                patch_size,
                ..MaskConfig::default()
            },
            encoder,
            decoder,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let stride = self.encoder.total_stride();
        self.mask.validate(stride)?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.mask.patch_size) {
            return Err(invalid(format!(
                "image size {} must be a multiple of the patch size {}",
                self.image_size, self.mask.patch_size
            )));
        }
        if self.decoder.upsample_ratio != stride {
            return Err(invalid(format!(
                "decoder upsample ratio {} must equal the encoder stride {}",
                self.decoder.upsample_ratio, stride
            )));
        }
        if self.decoder.stages() < self.encoder.stages {
            return Err(invalid("decoder has fewer stages than the encoder has scales"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.mask.patch_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_channel_formula() {
        let cfg = LightDecoderConfig {
            fea_dim: 768,
            upsample_ratio: 32,
        };
        assert_eq!(cfg.channels(), vec![768, 384, 192, 96, 48, 24]);
        assert_eq!(cfg.stages(), 5);
        let cfg = LightDecoderConfig {
            fea_dim: 64,
            upsample_ratio: 4,
        };
        assert_eq!(cfg.channels(), vec![64, 32, 16]);
        assert!(LightDecoderConfig {
            fea_dim: 64,
            upsample_ratio: 12
        }
        .validate()
        .is_err());
    }

    #[test]
    fn strides() {
        let e = EncoderConfig::default();
        assert_eq!(e.total_stride(), 32);
        assert_eq!(
            (0..4).map(|i| e.stage_stride(i)).collect::<Vec<_>>(),
            vec![4, 8, 16, 32]
        );
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk(64, 16, vec![16, 32, 64]).validate().is_ok());
        let mut bad = ModelConfig::desk(64, 16, vec![16, 32, 64]);
        bad.mask.patch_size = 8;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk(64, 16, vec![16, 32, 64]);
        bad.mask.ratio = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
