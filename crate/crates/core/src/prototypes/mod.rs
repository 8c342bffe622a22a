//! Per-object prototypes: the mean embedding of an object's rendered views.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use store::{decode_set, encode_set, load_set, save_set, SET_FORMAT_VERSION};

use crate::encoder::{EncoderError, EncoderHandle};
use crate::geometry::{Mesh, ViewpointSpec};
use crate::renderer::{render_batch, RenderConfig, RenderError};
use crate::seed;

/// Edge length of the reference thumbnails stored with each prototype.
pub const THUMBNAIL_PX: u32 = 64;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("invalid sampling strategy: {0}")]
    InvalidStrategy(String),
    #[error("duplicate object id {0:?}")]
    DuplicateObjectId(String),
    #[error("a prototype needs at least one view")]
    NoViews,
    #[error("inconsistent set: {0}")]
    Inconsistent(String),
    #[error("object {object_id}: {source}")]
    Render {
        object_id: String,
        #[source]
        source: RenderError,
    },
    #[error("object {object_id}: {source}")]
    Encoder {
        object_id: String,
        #[source]
        source: EncoderError,
    },
    #[error("set file digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("malformed set file: {0}")]
    Format(String),
    #[error("set file version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Uniform,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub mode: SamplingMode,
    pub n_views: usize,
    pub elevations_deg: Vec<f64>,
    /// Only used by random mode.
    #[serde(default)]
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn uniform(n_views: usize, elevations_deg: &[f64]) -> Self {
        SamplingStrategy {
            mode: SamplingMode::Uniform,
            n_views,
            elevations_deg: elevations_deg.to_vec(),
            seed: 0,
        }
    }

    pub fn random(n_views: usize, elevations_deg: &[f64], seed: u64) -> Self {
        SamplingStrategy {
            mode: SamplingMode::Random,
            n_views,
            elevations_deg: elevations_deg.to_vec(),
            seed,
        }
    }

    /// The 24-view grid: 12 azimuths at each of 30° and 60° elevation.
    pub fn standard() -> Self {
        Self::uniform(24, &[30.0, 60.0])
    }

    /// Parses `MODE:N[:ELEV,ELEV...][:SEED]`, e.g. `uniform:24`,
    /// `uniform:4:30` or `random:8:30,60:7`. Elevations default to 30,60.
    pub fn parse(spec: &str) -> Result<Self, PrototypeError> {
        let bad = || PrototypeError::InvalidStrategy(format!("cannot parse {spec:?}"));
        let parts: Vec<&str> = spec.trim().split(':').collect();
        if parts.len() < 2 || parts.len() > 4 {
            return Err(bad());
        }
        let mode = match parts[0] {
            "uniform" => SamplingMode::Uniform,
            "random" => SamplingMode::Random,
            _ => return Err(bad()),
        };
        let n_views = parts[1].parse().map_err(|_| bad())?;
        let elevations_deg = match parts.get(2) {
            Some(s) => s
                .split(',')
                .map(|e| e.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_, _>>()?,
            None => vec![30.0, 60.0],
        };
        let seed = match parts.get(3) {
            Some(s) => s.parse().map_err(|_| bad())?,
            None => 0,
        };
        let s = SamplingStrategy {
            mode,
            n_views,
            elevations_deg,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PrototypeError> {
        let bad = |m: String| Err(PrototypeError::InvalidStrategy(m));
        if self.n_views == 0 {
            return bad("n_views must be >= 1".into());
        }
        if self.elevations_deg.is_empty() {
            return bad("at least one elevation is required".into());
        }
        if let Some(e) = self.elevations_deg.iter().find(|e| !(0.0..=90.0).contains(*e)) {
            return bad(format!("elevation {e} outside [0, 90]"));
        }
        let n_el = self.elevations_deg.len();
        if self.mode == SamplingMode::Uniform && !self.n_views.is_multiple_of(n_el) {
            return bad(format!(
                "uniform mode splits views evenly over {n_el} elevations; {} is not divisible",
                self.n_views
            ));
        }
        Ok(())
    }

    /// A copy with a different view count, used by sweeps.
    pub fn with_n_views(&self, n_views: usize) -> Self {
        SamplingStrategy {
            n_views,
            ..self.clone()
        }
    }
}

/// Viewpoints for one object. Uniform mode spaces azimuths evenly from 0°
/// at each elevation; random mode draws azimuths uniformly and elevations
/// uniformly from the allowed set.
pub fn sample_viewpoints(strategy: &SamplingStrategy) -> Result<Vec<ViewpointSpec>, PrototypeError> {
    strategy.validate()?;
    let n = strategy.n_views;
    let els = &strategy.elevations_deg;
    Ok(match strategy.mode {
        SamplingMode::Uniform => {
            let per = n / els.len();
            let step = 360.0 / per as f64;
            els.iter()
                .flat_map(|&el| (0..per).map(move |i| ViewpointSpec::new(i as f64 * step, el, 0.0)))
                .collect()
        }
        SamplingMode::Random => {
            let mut rng = seed::rng(strategy.seed);
            (0..n)
                .map(|_| {
                    let az = rng.gen_range(0.0..360.0);
                    let el = els[rng.gen_range(0..els.len())];
                    ViewpointSpec::new(az, el, 0.0)
                })
                .collect()
        }
    })
}

/// Viewpoints for a named object. Random mode mixes the object id into the
/// seed so that every object gets its own draw.
pub fn sample_viewpoints_for(strategy: &SamplingStrategy, object_id: &str) -> Result<Vec<ViewpointSpec>, PrototypeError> {
    match strategy.mode {
        SamplingMode::Uniform => sample_viewpoints(strategy),
        SamplingMode::Random => sample_viewpoints(&SamplingStrategy {
            seed: seed::derive_str(strategy.seed, object_id),
            ..strategy.clone()
        }),
    }
}

/// How view embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMean {
    /// Arithmetic mean of the raw embeddings.
    #[default]
    Raw,
    /// Mean of L2-normalized embeddings.
    NormalizedViews,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub object_id: String,
    pub vector: Vec<f32>,
    pub k: usize,
    pub viewpoints: Vec<ViewpointSpec>,
    pub encoder_id: String,
    /// PNG of the first view, for display next to candidates.
    #[serde(skip)]
    pub thumbnail_png: Option<Vec<u8>>,
}

impl Prototype {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Mean of equal-length vectors, accumulated in f64.
pub fn mean_vector(views: &[Vec<f32>]) -> Vec<f32> {
    let d = views.first().map_or(0, Vec::len);
    let mut acc = vec![0f64; d];
    for v in views {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let k = views.len() as f64;
    acc.into_iter().map(|a| (a / k) as f32).collect()
}

fn thumbnail(img: &RgbImage) -> Vec<u8> {
    let small = image::imageops::resize(img, THUMBNAIL_PX, THUMBNAIL_PX, FilterType::Triangle);
    let mut buf = Cursor::new(Vec::new());
    small
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

pub fn build_prototype(
    mesh: &Mesh,
    viewpoints: &[ViewpointSpec],
    encoder: &EncoderHandle,
    render_cfg: &RenderConfig,
) -> Result<Prototype, PrototypeError> {
    build_prototype_with(mesh, viewpoints, encoder, render_cfg, PrototypeMean::Raw)
}

pub fn build_prototype_with(
    mesh: &Mesh,
    viewpoints: &[ViewpointSpec],
    encoder: &EncoderHandle,
    render_cfg: &RenderConfig,
    mean: PrototypeMean,
) -> Result<Prototype, PrototypeError> {
    if viewpoints.is_empty() {
        return Err(PrototypeError::NoViews);
    }
    let object_id = &mesh.object_id;
    let renders = render_batch(mesh, viewpoints, render_cfg).map_err(|source| PrototypeError::Render {
        object_id: object_id.clone(),
        source,
    })?;
    let images: Vec<RgbImage> = renders.into_iter().map(|r| r.pixels).collect();
    let embeddings = encoder.encode(&images).map_err(|source| PrototypeError::Encoder {
        object_id: object_id.clone(),
        source,
    })?;
    let views: Vec<Vec<f32>> = embeddings
        .into_iter()
        .map(|e| match mean {
            PrototypeMean::Raw => Ok(e.values),
            PrototypeMean::NormalizedViews => {
                let n = e.norm();
                if n == 0.0 {
                    Err(PrototypeError::Encoder {
                        object_id: object_id.clone(),
                        source: EncoderError::ZeroVector,
                    })
                } else {
                    Ok(e.values.iter().map(|&x| (f64::from(x) / n) as f32).collect())
                }
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(Prototype {
        object_id: object_id.clone(),
        vector: mean_vector(&views),
        k: viewpoints.len(),
        viewpoints: viewpoints.to_vec(),
        encoder_id: encoder.encoder_id(),
        thumbnail_png: Some(thumbnail(&images[0])),
    })
}

/// A named, immutable collection of prototypes sharing one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub set_id: String,
    pub prototypes: BTreeMap<String, Prototype>,
    /// RFC 3339 UTC timestamp.
    pub created_at: String,
    pub encoder_id: String,
    pub render_config_digest: String,
    pub dim: usize,
}

impl ClassificationSet {
    /// Assembles a set, checking id uniqueness and that every prototype
    /// shares `encoder_id` and dimension. The set id is derived from the
    /// contents unless one is given.
    pub fn from_prototypes(
        set_id: Option<String>,
        prototypes: Vec<Prototype>,
        encoder_id: &str,
        render_config_digest: &str,
    ) -> Result<Self, PrototypeError> {
        let dim = prototypes.first().map_or(0, Prototype::dim);
        let mut map = BTreeMap::new();
        for p in prototypes {
            if p.encoder_id != encoder_id {
                return Err(PrototypeError::Inconsistent(format!(
                    "prototype {} has encoder {}, set has {encoder_id}",
                    p.object_id, p.encoder_id
                )));
            }
            if p.dim() != dim {
                return Err(PrototypeError::Inconsistent(format!(
                    "prototype {} has dimension {}, expected {dim}",
                    p.object_id,
                    p.dim()
                )));
            }
            if p.k == 0 {
                return Err(PrototypeError::NoViews);
            }
            if map.contains_key(&p.object_id) {
                return Err(PrototypeError::DuplicateObjectId(p.object_id));
            }
            map.insert(p.object_id.clone(), p);
        }
        let mut set = ClassificationSet {
            set_id: String::new(),
            prototypes: map,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            encoder_id: encoder_id.to_string(),
            render_config_digest: render_config_digest.to_string(),
            dim,
        };
        set.set_id = set_id.unwrap_or_else(|| set.content_id());
        Ok(set)
    }

    fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_id.as_bytes());
        h.update(self.render_config_digest.as_bytes());
        for p in self.prototypes.values() {
            h.update(p.object_id.as_bytes());
            h.update([0]);
            for x in &p.vector {
                h.update(x.to_le_bytes());
            }
        }
        format!("set-{}", &hex::encode(h.finalize())[..12])
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn object_ids(&self) -> Vec<String> {
        self.prototypes.keys().cloned().collect()
    }

    pub fn get(&self, object_id: &str) -> Option<&Prototype> {
        self.prototypes.get(object_id)
    }

    /// The subset of prototypes whose ids are listed. Unknown ids are
    /// reported as an error.
    pub fn subset(&self, ids: &[String]) -> Result<Self, PrototypeError> {
        let mut prototypes = Vec::with_capacity(ids.len());
        for id in ids.iter().collect::<BTreeSet<_>>() {
            let p = self
                .get(id)
                .ok_or_else(|| PrototypeError::Inconsistent(format!("unknown object id {id:?}")))?;
            prototypes.push(p.clone());
        }
        let mut s = Self::from_prototypes(None, prototypes, &self.encoder_id, &self.render_config_digest)?;
        s.created_at = self.created_at.clone();
        Ok(s)
    }
}

/// Builds one prototype per mesh in parallel. Random-mode viewpoints are
/// drawn per object (see [`sample_viewpoints_for`]).
pub fn build_set(
    meshes: &[Mesh],
    strategy: &SamplingStrategy,
    encoder: &EncoderHandle,
    render_cfg: &RenderConfig,
) -> Result<ClassificationSet, PrototypeError> {
    build_set_with(meshes, strategy, encoder, render_cfg, PrototypeMean::Raw)
}

pub fn build_set_with(
    meshes: &[Mesh],
    strategy: &SamplingStrategy,
    encoder: &EncoderHandle,
    render_cfg: &RenderConfig,
    mean: PrototypeMean,
) -> Result<ClassificationSet, PrototypeError> {
    strategy.validate()?;
    let mut seen = BTreeSet::new();
    for m in meshes {
        if !seen.insert(m.object_id.as_str()) {
            return Err(PrototypeError::DuplicateObjectId(m.object_id.clone()));
        }
    }
    let prototypes = meshes
        .par_iter()
        .map(|m| {
            let views = sample_viewpoints_for(strategy, &m.object_id)?;
            build_prototype_with(m, &views, encoder, render_cfg, mean)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ClassificationSet::from_prototypes(None, prototypes, &encoder.encoder_id(), &render_cfg.digest())
}
