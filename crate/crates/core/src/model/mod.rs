//! The SparK network: sparse hierarchical encoder, per-scale densification
//! and projection, light decoder and reconstruction loss.

mod config;
mod decoder;
mod encoder;
mod layers;
mod params;
mod spark;

pub use config::{Ablation, EncoderConfig, LightDecoderConfig, LossOn, MaskingStrategy, ModelConfig, Variant};
pub use decoder::LightDecoder;
pub use encoder::{encoder_macs, Encoder, LayerMacs};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d};
pub use params::{Binder, Bindings, Param, ParamId, ParamKind, ParamStore};
pub use spark::{
    conversion_gap, pixel_selection, spark_loss, DenseEncoder, LossOutput, ScaleFeatures, Session, SparkModel,
    SparkOutput,
};
