//! Segmentation pipeline from image to per-layer predictions.

pub mod backbone;
pub mod decoder;
pub mod model;
pub mod pixel_decoder;

pub use backbone::Backbone;
pub use decoder::{
    attention_mask, sine_position_encoding, AttentionBlock, DecoderLayer, HeadOutput, Heads,
};
pub use model::{
    level_for_layer, postprocess, upsample_mask_logits, LayerPrediction, Model, ModelOutput,
    Prediction,
};
pub use pixel_decoder::{upsample_to, PixelDecoder, PixelDecoderOutput, Upsample};
