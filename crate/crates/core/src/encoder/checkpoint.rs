//! Versioned encoder checkpoints.
//!
//! A checkpoint is a JSON document holding the encoder identity, its
//! preprocessing, its weights and the embeddings of a fixed probe batch.
//! Loading re-encodes the probe batch and rejects the file if any coordinate
//! moved by more than `1e-6`.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ConvEncoder, ConvEncoderConfig, EncoderError, EncoderHandle, EncoderModel, ExternalEncoder, PixelEncoder};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "protoid-encoder";
const PROBE_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelState {
    Pixel {
        input_size_px: u32,
    },
    Conv {
        name: String,
        config: ConvEncoderConfig,
        params: Vec<f32>,
    },
    External(ExternalEncoder),
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeRecord {
    embeddings: Vec<Vec<f32>>,
    digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    encoder_id: String,
    dim: usize,
    trainable: bool,
    input_size_px: u32,
    preprocessing: String,
    model: ModelState,
    /// Absent for external encoders, whose output cannot be reproduced
    /// without the external process.
    probe: Option<ProbeRecord>,
}

/// Four deterministic synthetic images: gradients, a checkerboard and a
/// centered square.
pub fn probe_batch(size: u32) -> Vec<RgbImage> {
    let s = size.max(1);
    let scale = |v: u32| (v * 255 / s) as u8;
    vec![
        RgbImage::from_fn(s, s, |x, y| Rgb([scale(x), scale(y), 128])),
        RgbImage::from_fn(s, s, |x, y| {
            if (x / 4 + y / 4) % 2 == 0 {
                Rgb([230, 230, 230])
            } else {
                Rgb([20, 20, 20])
            }
        }),
        RgbImage::from_fn(s, s, |x, y| {
            let inside = x > s / 4 && x < 3 * s / 4 && y > s / 4 && y < 3 * s / 4;
            if inside {
                Rgb([220, 220, 220])
            } else {
                Rgb([128, 128, 128])
            }
        }),
        RgbImage::from_fn(s, s, |x, y| Rgb([scale(y), 255 - scale(x), scale((x + y) / 2)])),
    ]
}

fn digest_embeddings(embeddings: &[Vec<f32>]) -> String {
    let mut h = Sha256::new();
    for e in embeddings {
        h.update((e.len() as u64).to_le_bytes());
        for v in e {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn probe_embeddings(h: &EncoderHandle) -> Result<Vec<Vec<f32>>, EncoderError> {
    Ok(h.encode(&probe_batch(h.input_size_px()))?
        .into_iter()
        .map(|e| e.values)
        .collect())
}

pub fn save_checkpoint(h: &EncoderHandle, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let (model, probe) = match &h.model {
        EncoderModel::Pixel(p) => (
            ModelState::Pixel {
                input_size_px: p.input_size_px,
            },
            true,
        ),
        EncoderModel::Conv(c) => (
            ModelState::Conv {
                name: c.name().to_string(),
                config: c.config().clone(),
                params: c.params().to_vec(),
            },
            true,
        ),
        EncoderModel::External(e) => (ModelState::External(e.clone()), false),
    };
    let probe = if probe {
        let embeddings = probe_embeddings(h)?;
        let digest = digest_embeddings(&embeddings);
        Some(ProbeRecord { embeddings, digest })
    } else {
        None
    };
    let file = CheckpointFile {
        format: FORMAT_TAG.into(),
        version: CHECKPOINT_VERSION,
        encoder_id: h.encoder_id(),
        dim: h.dim(),
        trainable: h.trainable(),
        input_size_px: h.input_size_px(),
        preprocessing: format!(
            "resize to {0}x{0} (triangle filter); RGB bytes scaled to [0, 1]",
            h.input_size_px()
        ),
        model,
        probe,
    };
    let json = serde_json::to_vec(&file).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderHandle, EncoderError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let bad = |m: String| EncoderError::Checkpoint(format!("{}: {m}", path.display()));
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
        return Err(bad("not an encoder checkpoint".into()));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing version".into()))? as u32;
    if version > CHECKPOINT_VERSION {
        return Err(EncoderError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;
    let model = match file.model {
        ModelState::Pixel { input_size_px } => EncoderModel::Pixel(PixelEncoder::new(input_size_px)),
        ModelState::Conv { name, config, params } => {
            EncoderModel::Conv(ConvEncoder::from_parts(&name, config, params).map_err(bad)?)
        }
        ModelState::External(e) => EncoderModel::External(e),
    };
    let handle = EncoderHandle {
        model,
        weights_ref: Some(path.display().to_string()),
    };
    if handle.encoder_id() != file.encoder_id || handle.dim() != file.dim {
        return Err(bad(format!(
            "header says {} (D={}) but weights give {} (D={})",
            file.encoder_id,
            file.dim,
            handle.encoder_id(),
            handle.dim()
        )));
    }
    if let Some(probe) = file.probe {
        if digest_embeddings(&probe.embeddings) != probe.digest {
            return Err(bad("probe digest mismatch".into()));
        }
        let now = probe_embeddings(&handle)?;
        let max_diff = now
            .iter()
            .zip(&probe.embeddings)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max);
        if now.len() != probe.embeddings.len() || max_diff > PROBE_TOLERANCE {
            return Err(bad(format!("probe batch drifted by {max_diff}")));
        }
    }
    Ok(handle)
}
