//! Rotation-aware contrastive fine-tuning.
//!
//! Each training step draws `B` distinct objects. Every object contributes
//! one anchor rendered from the training grid and one positive rendered from
//! a neighboring viewpoint (30° in azimuth or elevation plus a random
//! in-plane roll). The positives of the other objects act as negatives.
//! Photometric augmentation and background compositing are applied to
//! anchor and positive independently.

pub mod augment;
mod loss;
mod optim;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use augment::ColorJitter;
pub use loss::{info_nce, info_nce_loss, info_nce_symmetric, LossOutput};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::encoder::{EncoderError, EncoderHandle};
use crate::geometry::{expand_grid, neighbor_view_with, GeometryError, Mesh, ViewGrid, ViewpointSpec};
use crate::renderer::{composite_background, render, RenderConfig, RenderError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteAtStep { step: usize, detail: String },
    #[error("need {needed} distinct objects, only {available} available")]
    InsufficientObjects { needed: usize, available: usize },
    #[error("training and evaluation sets share object ids: {0:?}")]
    Overlap(Vec<String>),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentations {
    pub color_jitter: bool,
    pub random_crop: bool,
    pub background_composite: bool,
    /// Positives come from a neighboring viewpoint; when off they are an
    /// augmented copy of the anchor view.
    pub rotation_positive: bool,
}

impl Default for Augmentations {
    fn default() -> Self {
        Augmentations {
            color_jitter: true,
            random_crop: true,
            background_composite: true,
            rotation_positive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Defaults to `ceil(n_objects / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub augmentations: Augmentations,
    pub color_jitter: ColorJitter,
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    /// Probability that a neighbor shift moves azimuth rather than elevation.
    pub azimuth_shift_probability: f64,
    pub symmetric_loss: bool,
    /// Anchor viewpoints are drawn from this grid.
    pub grid: ViewGrid,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.07,
            batch_size: 350,
            learning_rate: 1e-7,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            epochs: 1,
            steps_per_epoch: None,
            augmentations: Augmentations::default(),
            color_jitter: ColorJitter::default(),
            crop_scale: (0.5, 1.0),
            azimuth_shift_probability: 0.5,
            symmetric_loss: false,
            grid: ViewGrid::standard(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let bad = |m: String| Err(ContrastiveError::InvalidConfig(m));
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {:?}", self.crop_scale));
        }
        if !(0.0..=1.0).contains(&self.azimuth_shift_probability) {
            return bad("azimuth_shift_probability must be in [0, 1]".into());
        }
        expand_grid(&self.grid)?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which objects and viewpoints one step uses, before any rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub object_indices: Vec<usize>,
    pub anchor_views: Vec<ViewpointSpec>,
    pub positive_views: Vec<ViewpointSpec>,
}

/// Draws `B` distinct objects and their anchor/positive viewpoints.
pub fn plan_pairs(n_objects: usize, config: &TrainConfig, step_seed: u64) -> Result<PairPlan, ContrastiveError> {
    let b = config.batch_size;
    if n_objects < b {
        return Err(ContrastiveError::InsufficientObjects {
            needed: b,
            available: n_objects,
        });
    }
    let grid = expand_grid(&config.grid)?;
    let mut rng = seed::rng(seed::derive(step_seed, &[0]));
    let object_indices = index::sample(&mut rng, n_objects, b).into_vec();
    let mut anchor_views = Vec::with_capacity(b);
    let mut positive_views = Vec::with_capacity(b);
    for i in 0..b {
        let anchor = grid[rng.gen_range(0..grid.len())];
        let positive = if config.augmentations.rotation_positive {
            neighbor_view_with(
                &anchor,
                seed::derive(step_seed, &[1, i as u64]),
                config.azimuth_shift_probability,
            )
        } else {
            anchor
        };
        anchor_views.push(anchor);
        positive_views.push(positive);
    }
    Ok(PairPlan {
        object_indices,
        anchor_views,
        positive_views,
    })
}

#[derive(Debug, Clone)]
pub struct PairBatch {
    pub anchors: Vec<RgbImage>,
    pub positives: Vec<RgbImage>,
    pub object_ids: Vec<String>,
    pub plan: PairPlan,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn augmented_view(
    mesh: &Mesh,
    view: &ViewpointSpec,
    config: &TrainConfig,
    render_cfg: &RenderConfig,
    pool: &[RgbImage],
    view_seed: u64,
) -> Result<RgbImage, ContrastiveError> {
    let mut r = render(mesh, view, render_cfg, view_seed)?;
    let aug = &config.augmentations;
    if aug.background_composite {
        r = composite_background(&r, pool, seed::derive(view_seed, &[0]))?;
    }
    let mut img = r.pixels;
    let mut rng = seed::rng(seed::derive(view_seed, &[1]));
    if aug.random_crop {
        img = augment::random_resized_crop(&img, config.crop_scale, &mut rng);
    }
    if aug.color_jitter {
        img = augment::color_jitter(&img, &config.color_jitter, &mut rng);
    }
    Ok(img)
}

/// Renders and augments one step's pairs. Deterministic in `step_seed`
/// regardless of how many threads do the work.
pub fn sample_pair_batch(
    meshes: &[Mesh],
    config: &TrainConfig,
    render_cfg: &RenderConfig,
    step_seed: u64,
    background_pool: &[RgbImage],
) -> Result<PairBatch, ContrastiveError> {
    config.validate()?;
    if config.augmentations.background_composite && background_pool.is_empty() {
        return Err(RenderError::EmptyPool.into());
    }
    let plan = plan_pairs(meshes.len(), config, step_seed)?;
    let rendered: Vec<(RgbImage, RgbImage)> = (0..plan.object_indices.len())
        .into_par_iter()
        .map(|i| {
            let mesh = &meshes[plan.object_indices[i]];
            let a = augmented_view(
                mesh,
                &plan.anchor_views[i],
                config,
                render_cfg,
                background_pool,
                seed::derive(step_seed, &[2, i as u64]),
            )?;
            let p = augmented_view(
                mesh,
                &plan.positive_views[i],
                config,
                render_cfg,
                background_pool,
                seed::derive(step_seed, &[3, i as u64]),
            )?;
            Ok((a, p))
        })
        .collect::<Result<_, ContrastiveError>>()?;
    let (anchors, positives) = rendered.into_iter().unzip();
    let object_ids = plan
        .object_indices
        .iter()
        .map(|&i| meshes[i].object_id.clone())
        .collect();
    Ok(PairBatch {
        anchors,
        positives,
        object_ids,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
    pub temperature: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Exponential moving average of the loss, seeded with the first value.
    pub fn smoothed(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = None;
        for r in &self.records {
            let v = match acc {
                None => r.loss,
                Some(prev) => alpha * r.loss + (1.0 - alpha) * prev,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), std::io::Error> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

/// Fine-tunes a trainable encoder on rendered pairs. `eval_ids` are the
/// objects reserved for evaluation; sharing any with `meshes` is an error.
pub fn train(
    encoder: &EncoderHandle,
    meshes: &[Mesh],
    config: &TrainConfig,
    render_cfg: &RenderConfig,
    background_pool: &[RgbImage],
    eval_ids: &[String],
) -> Result<(EncoderHandle, TrainingLog), ContrastiveError> {
    config.validate()?;
    let mut handle = encoder.clone();
    handle.weights_ref = None;
    let conv = handle.as_conv_mut()?;

    let eval: BTreeSet<&str> = eval_ids.iter().map(String::as_str).collect();
    let overlap: Vec<String> = meshes
        .iter()
        .filter(|m| eval.contains(m.object_id.as_str()))
        .map(|m| m.object_id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(ContrastiveError::Overlap(overlap));
    }
    if meshes.len() < config.batch_size {
        return Err(ContrastiveError::InsufficientObjects {
            needed: config.batch_size,
            available: meshes.len(),
        });
    }

    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| meshes.len().div_ceil(config.batch_size));
    let total_steps = config.epochs * steps_per_epoch;
    let digest = config.digest();
    let mut optimizer = Optimizer::new(config.optimizer_config(), conv.n_params());
    let mut log = TrainingLog::default();

    for step in 0..total_steps {
        let step_seed = seed::derive(config.seed, &[step as u64]);
        let batch = sample_pair_batch(meshes, config, render_cfg, step_seed, background_pool)?;
        let images: Vec<&RgbImage> = batch.anchors.iter().chain(&batch.positives).collect();
        let traces: Vec<_> = images.par_iter().map(|im| conv.forward(im)).collect();
        let outputs: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| t.output().iter().map(|&x| f64::from(x)).collect())
            .collect();
        let b = batch.len();
        let (anchors, positives) = outputs.split_at(b);
        let loss = if config.symmetric_loss {
            info_nce_symmetric(anchors, positives, config.temperature)
        } else {
            info_nce(anchors, positives, config.temperature)
        }
        .map_err(|e| ContrastiveError::NonFiniteAtStep {
            step,
            detail: e.to_string(),
        })?;
        let grad_outputs: Vec<Vec<f32>> = loss
            .grad_anchors
            .iter()
            .chain(&loss.grad_positives)
            .map(|g| g.iter().map(|&x| x as f32).collect())
            .collect();
        let grads = conv.backward_batch(&traces, &grad_outputs);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(ContrastiveError::NonFiniteAtStep {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        optimizer.step(conv.params_mut(), &grads);
        log.records.push(StepRecord {
            step,
            loss: loss.loss,
            lr: config.learning_rate,
            seed: step_seed,
            temperature: config.temperature,
            config_digest: digest.clone(),
        });
        if step % 50 == 0 || step + 1 == total_steps {
            log::info!("step {step}/{total_steps} loss {:.4}", loss.loss);
        }
    }
    conv.refresh_id();
    Ok((handle, log))
}
