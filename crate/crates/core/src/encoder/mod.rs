//! Feature extraction: a uniform `images -> embeddings` interface over three
//! encoder families.
//!
//! * [`PixelEncoder`]: resized pixels flattened to a vector. Deterministic
//!   and parameter-free; used as a ground-truth oracle.
//! * [`ConvEncoder`]: a small trainable convolutional network for desk-scale
//!   contrastive fine-tuning.
//! * [`ExternalEncoder`]: adapter that delegates to an external process
//!   hosting a pretrained backbone.
//!
//! Embeddings are stored unnormalized; cosine similarity normalizes both
//! sides.

mod checkpoint;
pub mod conv;
mod external;

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, probe_batch, CHECKPOINT_VERSION};
pub use conv::{ConvEncoder, ConvEncoderConfig};
pub use external::ExternalEncoder;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image has {channels} channels, expected 3 (RGB) or 4 (RGBA)")]
    Shape { channels: u8 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("zero-length embedding vector")]
    ZeroVector,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("external encoder failed: {0}")]
    External(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("encoder {0} is not trainable")]
    NotTrainable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature vector produced by one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub encoder_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, encoder_id: impl Into<String>) -> Self {
        EmbeddingVector {
            values,
            encoder_id: encoder_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine similarity of raw slices, `None` when either side has zero norm.
pub(crate) fn cosine(u: &[f32], v: &[f32]) -> Option<f64> {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let d: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Some((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EncoderError> {
    if u.dim() != v.dim() {
        return Err(EncoderError::DimensionMismatch(u.dim(), v.dim()));
    }
    let s = cosine(&u.values, &v.values).ok_or(EncoderError::ZeroVector)?;
    if !s.is_finite() {
        return Err(EncoderError::NonFinite);
    }
    Ok(s)
}

/// Resize to a square input and scale bytes to `[0, 1]`, interleaved HWC.
pub fn preprocess(image: &RgbImage, input_size_px: u32) -> Vec<f32> {
    let resized;
    let img = if image.dimensions() == (input_size_px, input_size_px) {
        image
    } else {
        resized = image::imageops::resize(image, input_size_px, input_size_px, FilterType::Triangle);
        &resized
    };
    img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect()
}

/// Converts a decoded image to RGB. RGBA drops alpha and gray replicates
/// the channel; two-channel gray+alpha is rejected.
pub fn prepare_image(image: DynamicImage) -> Result<RgbImage, EncoderError> {
    match image.color().channel_count() {
        1 | 3 | 4 => Ok(image.into_rgb8()),
        channels => Err(EncoderError::Shape { channels }),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage, EncoderError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => EncoderError::Io(io),
        other => EncoderError::Decode(format!("{}: {other}", path.display())),
    })?;
    prepare_image(img)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, EncoderError> {
    let img = image::load_from_memory(bytes).map_err(|e| EncoderError::Decode(e.to_string()))?;
    prepare_image(img)
}

/// Flattened, downsampled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEncoder {
    pub input_size_px: u32,
}

impl PixelEncoder {
    pub fn new(input_size_px: u32) -> Self {
        PixelEncoder { input_size_px }
    }

    pub fn encoder_id(&self) -> String {
        format!("pixel-{}", self.input_size_px)
    }

    pub fn dim(&self) -> usize {
        3 * (self.input_size_px as usize).pow(2)
    }

    pub fn embed(&self, image: &RgbImage) -> Vec<f32> {
        preprocess(image, self.input_size_px)
    }
}

#[derive(Debug, Clone)]
pub enum EncoderModel {
    Pixel(PixelEncoder),
    Conv(ConvEncoder),
    External(ExternalEncoder),
}

/// A ready-to-use encoder plus where its weights came from.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    pub model: EncoderModel,
    pub weights_ref: Option<String>,
}

impl From<PixelEncoder> for EncoderHandle {
    fn from(p: PixelEncoder) -> Self {
        EncoderHandle {
            model: EncoderModel::Pixel(p),
            weights_ref: None,
        }
    }
}

impl From<ConvEncoder> for EncoderHandle {
    fn from(c: ConvEncoder) -> Self {
        EncoderHandle {
            model: EncoderModel::Conv(c),
            weights_ref: None,
        }
    }
}

impl From<ExternalEncoder> for EncoderHandle {
    fn from(e: ExternalEncoder) -> Self {
        EncoderHandle {
            model: EncoderModel::External(e),
            weights_ref: None,
        }
    }
}

impl EncoderHandle {
    pub fn pixel(input_size_px: u32) -> Self {
        PixelEncoder::new(input_size_px).into()
    }

    pub fn encoder_id(&self) -> String {
        match &self.model {
            EncoderModel::Pixel(p) => p.encoder_id(),
            EncoderModel::Conv(c) => c.encoder_id().to_string(),
            EncoderModel::External(e) => e.encoder_id.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            EncoderModel::Pixel(p) => p.dim(),
            EncoderModel::Conv(c) => c.config().embedding_dim,
            EncoderModel::External(e) => e.dim,
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self.model, EncoderModel::Conv(_))
    }

    pub fn input_size_px(&self) -> u32 {
        match &self.model {
            EncoderModel::Pixel(p) => p.input_size_px,
            EncoderModel::Conv(c) => c.config().input_size_px,
            EncoderModel::External(e) => e.input_size_px,
        }
    }

    /// One embedding per image, in order. Evaluation mode only: identical
    /// inputs always give identical outputs.
    pub fn encode(&self, images: &[RgbImage]) -> Result<Vec<EmbeddingVector>, EncoderError> {
        let id = self.encoder_id();
        let raw: Vec<Vec<f32>> = match &self.model {
            EncoderModel::Pixel(p) => images.par_iter().map(|im| p.embed(im)).collect(),
            EncoderModel::Conv(c) => images.par_iter().map(|im| c.embed(im)).collect(),
            EncoderModel::External(e) => e.embed_batch(images)?,
        };
        raw.into_iter()
            .map(|values| {
                if values.iter().all(|x| x.is_finite()) {
                    Ok(EmbeddingVector::new(values, id.clone()))
                } else {
                    Err(EncoderError::NonFinite)
                }
            })
            .collect()
    }

    pub fn encode_one(&self, image: &RgbImage) -> Result<EmbeddingVector, EncoderError> {
        Ok(self
            .encode(std::slice::from_ref(image))?
            .pop()
            .expect("one image in, one embedding out"))
    }

    /// Resolves `pixel:N`, `external:DIM:SIZE:COMMAND` (command split on
    /// whitespace) or a checkpoint path.
    pub fn from_spec(spec: &str) -> Result<Self, EncoderError> {
        let bad = || EncoderError::InvalidSpec(spec.to_string());
        if let Some(n) = spec.strip_prefix("pixel:") {
            let n: u32 = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            return Ok(EncoderHandle::pixel(n));
        }
        if let Some(rest) = spec.strip_prefix("external:") {
            let mut parts = rest.splitn(3, ':');
            let dim = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let input_size_px = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let command: Vec<String> = parts.next().ok_or_else(bad)?.split_whitespace().map(String::from).collect();
            if command.is_empty() || dim == 0 || input_size_px == 0 {
                return Err(bad());
            }
            return Ok(ExternalEncoder {
                encoder_id: format!("external-{}", command.join(" ")),
                dim,
                input_size_px,
                command,
            }
            .into());
        }
        load_checkpoint(spec)
    }

    pub fn as_conv_mut(&mut self) -> Result<&mut ConvEncoder, EncoderError> {
        let id = self.encoder_id();
        match &mut self.model {
            EncoderModel::Conv(c) => Ok(c),
            _ => Err(EncoderError::NotTrainable(id)),
        }
    }
}
