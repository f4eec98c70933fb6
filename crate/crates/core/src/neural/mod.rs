//! Transformer backbone, LoRA adapters, 4-bit quantization, segmentation
//! heads, convolutional baselines and the fine-tuning loop (candle, CPU).

pub mod checkpoint;
pub mod cnn;
pub mod heads;
pub mod lora;
pub mod model;
pub mod ops;
pub mod params;
pub mod probe;
pub mod quant;
pub mod train;
pub mod vit;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};
pub use cnn::{BatchNorm, ResNet, Unet, UnetSize};
pub use heads::{ConvHead, Head, HeadKind, HeadSpec, LinearHead};
pub use lora::{AdaptedConv, AdaptedLinear, ConvGeom, LayerOpts, LoraConfig};
pub use model::{ModelSpec, SegModel};
pub use params::{Builder, Ctx, Init, ParamSet};
pub use probe::{LinearProbe, LinearProbeConfig};
pub use quant::{round_trip_error, QuantConfig, QuantError, QuantizedTensor};
pub use train::{
    class_weights, evaluate_model, train_segmenter, EpochRecord, LrSchedule, OptimizerSpec, TrainConfig,
    TrainHistory,
};
pub use vit::{
    extract_features, image_embedding, BackboneSize, BackboneSpec, CheckpointRef, Vit, VitConfig, PATCH,
};
