//! Dataset manifests: one record per (object, capture condition) listing
//! the mesh and query photographs.
//!
//! `ingest_dataset` expects `<dataset>/<object_id>/` folders, each holding
//! one `.stl`/`.obj` mesh plus photos either directly (condition
//! `default`) or in per-condition subfolders such as `industrial/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, LabeledQuery};
use crate::geometry::{load_mesh, Mesh};

pub const DEFAULT_CONDITION: &str = "default";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mesh: PathBuf,
    pub photos: Vec<PathBuf>,
    pub condition: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    records: Vec<ManifestRecord>,
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn is_photo(p: &Path) -> bool {
    has_ext(p, &["png", "jpg", "jpeg"])
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

/// Scans a dataset folder into manifest records with paths as found.
pub fn ingest_dataset(dataset: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, EvalError> {
    let dataset = dataset.as_ref();
    if !dataset.is_dir() {
        return Err(EvalError::Manifest(format!("{} is not a directory", dataset.display())));
    }
    let mut records = Vec::new();
    for obj_dir in sorted_entries(dataset)?.into_iter().filter(|p| p.is_dir()) {
        let id = obj_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| EvalError::Manifest(format!("non-UTF-8 folder {}", obj_dir.display())))?
            .to_string();
        let entries = sorted_entries(&obj_dir)?;
        let meshes: Vec<&PathBuf> = entries.iter().filter(|p| p.is_file() && has_ext(p, &["stl", "obj"])).collect();
        let mesh = match meshes.as_slice() {
            [m] => (*m).clone(),
            [] => return Err(EvalError::Manifest(format!("object {id}: no .stl/.obj mesh"))),
            _ => return Err(EvalError::Manifest(format!("object {id}: {} meshes, expected one", meshes.len()))),
        };
        let mut by_condition: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let direct: Vec<PathBuf> = entries.iter().filter(|p| p.is_file() && is_photo(p)).cloned().collect();
        if !direct.is_empty() {
            by_condition.insert(DEFAULT_CONDITION.into(), direct);
        }
        for sub in entries.iter().filter(|p| p.is_dir()) {
            let cond = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let photos: Vec<PathBuf> = sorted_entries(sub)?.into_iter().filter(|p| p.is_file() && is_photo(p)).collect();
            if !photos.is_empty() {
                by_condition.entry(cond).or_default().extend(photos);
            }
        }
        if by_condition.is_empty() {
            by_condition.insert(DEFAULT_CONDITION.into(), Vec::new());
        }
        for (condition, photos) in by_condition {
            records.push(ManifestRecord {
                id: id.clone(),
                mesh: mesh.clone(),
                photos,
                condition,
            });
        }
    }
    Ok(records)
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes records as JSON, storing paths relative to the manifest's folder
/// when they lie beneath it.
pub fn save_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = base.canonicalize().unwrap_or(base);
    let rel = |p: &Path| relative_to(&p.canonicalize().unwrap_or_else(|_| p.to_path_buf()), &base);
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        records: records
            .iter()
            .map(|r| ManifestRecord {
                id: r.id.clone(),
                mesh: rel(&r.mesh),
                photos: r.photos.iter().map(|p| rel(p)).collect(),
                condition: r.condition.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("manifest serializes");
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Reads a manifest, resolving relative paths against its folder.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
    if file.version > MANIFEST_VERSION {
        return Err(EvalError::Manifest(format!("unsupported manifest version {}", file.version)));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(file
        .records
        .into_iter()
        .map(|r| ManifestRecord {
            mesh: abs(&r.mesh),
            photos: r.photos.iter().map(|p| abs(p)).collect(),
            ..r
        })
        .collect())
}

/// One mesh per distinct object id, with the object id taken from the
/// manifest rather than the file name.
pub fn meshes_from_manifest(records: &[ManifestRecord]) -> Result<Vec<Mesh>, EvalError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        if seen.insert(r.id.clone()) {
            let mut m = load_mesh(&r.mesh).map_err(|e| EvalError::Manifest(format!("object {}: {e}", r.id)))?;
            m.object_id = r.id.clone();
            out.push(m);
        }
    }
    Ok(out)
}

/// Query photos, optionally restricted to one condition tag.
pub fn queries_from_manifest(records: &[ManifestRecord], condition: Option<&str>) -> Vec<LabeledQuery> {
    records
        .iter()
        .filter(|r| condition.is_none_or(|c| r.condition == c))
        .flat_map(|r| {
            r.photos.iter().map(|p| LabeledQuery {
                image_path: p.clone(),
                true_object_id: r.id.clone(),
                condition_tag: r.condition.clone(),
            })
        })
        .collect()
}
