//! Mesh loading, canonical normalization and camera viewpoint math.

pub mod primitives;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub type Vec3 = [f64; 3];

/// Angular separation between a view and its rotation-aware neighbor.
pub const NEIGHBOR_SHIFT_DEG: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("failed to parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("degenerate mesh {object_id}: {reason}")]
    DegenerateMesh { object_id: String, reason: String },
    #[error("face {face} references vertex {index} but mesh has {n_vertices} vertices")]
    FaceIndex {
        face: usize,
        index: usize,
        n_vertices: usize,
    },
    #[error("invalid view grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Triangle geometry of one CAD object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub object_id: String,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub source_path: String,
}

impl Mesh {
    /// Builds a mesh after checking face indices and minimum size. The
    /// geometry is left in its original frame; see [`Mesh::normalized`].
    pub fn new(
        object_id: impl Into<String>,
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self, GeometryError> {
        let mesh = Mesh {
            object_id: object_id.into(),
            vertices,
            faces,
            source_path: String::new(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_source(mut self, path: impl Into<String>) -> Self {
        self.source_path = path.into();
        self
    }

    fn degenerate(&self, reason: impl Into<String>) -> GeometryError {
        GeometryError::DegenerateMesh {
            object_id: self.object_id.clone(),
            reason: reason.into(),
        }
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.vertices.len() < 4 {
            return Err(self.degenerate(format!(
                "{} vertices, need at least 4",
                self.vertices.len()
            )));
        }
        if self.faces.is_empty() {
            return Err(self.degenerate("no faces"));
        }
        if self
            .vertices
            .iter()
            .any(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(self.degenerate("non-finite vertex coordinate"));
        }
        let n = self.vertices.len();
        for (fi, face) in self.faces.iter().enumerate() {
            if let Some(&bad) = face.iter().find(|&&i| i >= n) {
                return Err(GeometryError::FaceIndex {
                    face: fi,
                    index: bad,
                    n_vertices: n,
                });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_center(&self) -> Vec3 {
        let (lo, hi) = self.bounding_box();
        [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ]
    }

    /// Radius of the sphere centered at the bounding-box center that encloses
    /// every vertex.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.bbox_center();
        self.vertices
            .iter()
            .map(|v| norm(sub(*v, c)))
            .fold(0.0, f64::max)
    }

    /// Centers the bounding box at the origin and scales the bounding sphere
    /// to unit radius.
    pub fn normalized(mut self) -> Result<Self, GeometryError> {
        self.validate()?;
        let c = self.bbox_center();
        let r = self.bounding_radius();
        if !(r > 1e-12) || !r.is_finite() {
            return Err(self.degenerate("zero spatial extent"));
        }
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] = (v[a] - c[a]) / r;
            }
        }
        Ok(self)
    }

    /// Applies `scale` then `offset` to every vertex.
    pub fn transformed(mut self, scale: Vec3, offset: Vec3) -> Self {
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] = v[a] * scale[a] + offset[a];
            }
        }
        self
    }

    /// Rotates every vertex about the z axis.
    pub fn rotated_z(mut self, deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        for v in &mut self.vertices {
            let (x, y) = (v[0], v[1]);
            v[0] = c * x - s * y;
            v[1] = s * x + c * y;
        }
        self
    }

    /// Rotates every vertex about the x axis.
    pub fn rotated_x(mut self, deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        for v in &mut self.vertices {
            let (y, z) = (v[1], v[2]);
            v[1] = c * y - s * z;
            v[2] = s * y + c * z;
        }
        self
    }

    /// Concatenates parts into one multi-component mesh.
    pub fn merge(object_id: impl Into<String>, parts: &[Mesh]) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for part in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&part.vertices);
            faces.extend(
                part.faces
                    .iter()
                    .map(|f| [f[0] + base, f[1] + base, f[2] + base]),
            );
        }
        Mesh::new(object_id, vertices, faces)
    }
}

/// Loads a binary/ASCII STL or an OBJ file and returns it normalized. The
/// object id defaults to the file stem.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, GeometryError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let object_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let parse_err = |reason: String| GeometryError::Parse {
        path: display.clone(),
        reason,
    };

    let (vertices, faces) = match ext.as_str() {
        "stl" => {
            let mut reader = BufReader::new(File::open(path)?);
            let stl = stl_io::read_stl(&mut reader).map_err(|e| parse_err(e.to_string()))?;
            let vertices = stl
                .vertices
                .iter()
                .map(|v| [f64::from(v[0]), f64::from(v[1]), f64::from(v[2])])
                .collect();
            let faces = stl.faces.iter().map(|f| f.vertices).collect();
            (vertices, faces)
        }
        "obj" => {
            if !path.exists() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{display} not found"),
                )
                .into());
            }
            let opts = tobj::LoadOptions {
                triangulate: true,
                ignore_points: true,
                ignore_lines: true,
                ..Default::default()
            };
            let (models, _materials) =
                tobj::load_obj(path, &opts).map_err(|e| parse_err(e.to_string()))?;
            let mut vertices: Vec<Vec3> = Vec::new();
            let mut faces = Vec::new();
            for model in models {
                let base = vertices.len();
                let m = model.mesh;
                vertices.extend(
                    m.positions
                        .chunks_exact(3)
                        .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]),
                );
                faces.extend(m.indices.chunks_exact(3).map(|t| {
                    [
                        base + t[0] as usize,
                        base + t[1] as usize,
                        base + t[2] as usize,
                    ]
                }));
            }
            (vertices, faces)
        }
        other => return Err(parse_err(format!("unsupported mesh extension '{other}'"))),
    };

    Mesh::new(object_id, vertices, faces)?
        .normalized()
        .map(|m| m.with_source(display))
}

/// One rendering camera: azimuth around the vertical axis, elevation above the
/// horizontal plane and roll about the viewing axis, all in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub inplane_deg: f64,
}

impl ViewpointSpec {
    /// Wraps azimuth and in-plane angles into `[0, 360)` and clamps elevation
    /// into `[0, 90]`.
    pub fn new(azimuth_deg: f64, elevation_deg: f64, inplane_deg: f64) -> Self {
        ViewpointSpec {
            azimuth_deg: wrap_deg(azimuth_deg),
            elevation_deg: elevation_deg.clamp(0.0, 90.0),
            inplane_deg: wrap_deg(inplane_deg),
        }
    }

    /// Stable file-name stem: `<elev>_<azim>_<inplane>`.
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}",
            fmt_angle(self.elevation_deg),
            fmt_angle(self.azimuth_deg),
            fmt_angle(self.inplane_deg)
        )
    }
}

fn fmt_angle(a: f64) -> String {
    if (a - a.round()).abs() < 1e-9 {
        format!("{}", a.round() as i64)
    } else {
        format!("{a:.2}")
    }
}

/// Maps an angle into `[0, 360)`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs.
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Smallest absolute angular difference between two azimuths, in `[0, 180]`.
pub fn azimuth_distance(a: f64, b: f64) -> f64 {
    let d = wrap_deg(a - b);
    d.min(360.0 - d)
}

/// A regular azimuth/elevation grid of camera positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGrid {
    pub elevations_deg: Vec<f64>,
    pub azimuth_step_deg: f64,
    #[serde(default)]
    pub inplane_deg: f64,
}

impl ViewGrid {
    /// Two elevations (30°, 60°), twelve azimuths each: 24 views.
    pub fn standard() -> Self {
        ViewGrid {
            elevations_deg: vec![30.0, 60.0],
            azimuth_step_deg: 30.0,
            inplane_deg: 0.0,
        }
    }

    pub fn azimuths_per_elevation(&self) -> Result<usize, GeometryError> {
        let step = self.azimuth_step_deg;
        if !(step > 0.0) || !step.is_finite() {
            return Err(GeometryError::InvalidGrid(format!(
                "azimuth step must be positive, got {step}"
            )));
        }
        let n = (360.0 / step).round();
        if n < 1.0 || (n * step - 360.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidGrid(format!(
                "azimuth step {step} does not divide 360"
            )));
        }
        Ok(n as usize)
    }

    /// Parses `"30,60:30"` (elevations, then azimuth step) with an optional
    /// `:inplane` suffix.
    pub fn parse(spec: &str) -> Result<Self, GeometryError> {
        let bad = || GeometryError::InvalidGrid(format!("cannot parse grid spec '{spec}'"));
        let mut parts = spec.split(':');
        let elevations_deg = parts
            .next()
            .ok_or_else(bad)?
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let azimuth_step_deg = parts
            .next()
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let inplane_deg = match parts.next() {
            Some(s) => s.trim().parse().map_err(|_| bad())?,
            None => 0.0,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(ViewGrid {
            elevations_deg,
            azimuth_step_deg,
            inplane_deg,
        })
    }
}

/// Expands a grid into viewpoints, elevations outer and azimuth ascending
/// inner.
pub fn expand_grid(grid: &ViewGrid) -> Result<Vec<ViewpointSpec>, GeometryError> {
    let n_az = grid.azimuths_per_elevation()?;
    if grid.elevations_deg.is_empty() {
        return Err(GeometryError::InvalidGrid("no elevations".into()));
    }
    if let Some(e) = grid
        .elevations_deg
        .iter()
        .find(|e| !(0.0..=90.0).contains(*e))
    {
        return Err(GeometryError::InvalidGrid(format!(
            "elevation {e} outside [0, 90]"
        )));
    }
    let mut out = Vec::with_capacity(grid.elevations_deg.len() * n_az);
    for &el in &grid.elevations_deg {
        for i in 0..n_az {
            out.push(ViewpointSpec::new(
                i as f64 * grid.azimuth_step_deg,
                el,
                grid.inplane_deg,
            ));
        }
    }
    Ok(out)
}

/// Which axis a neighbor shift moved along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftAxis {
    Azimuth,
    Elevation,
}

/// Rotation-aware neighbor of `v` with the shift axis chosen uniformly.
pub fn neighbor_view(v: &ViewpointSpec, seed: u64) -> ViewpointSpec {
    neighbor_view_with(v, seed, 0.5)
}

/// Shifts `v` by exactly 30° in azimuth (probability `p_azimuth`) or
/// elevation, with a uniformly resampled in-plane angle. Azimuth wraps; an
/// elevation shift that would leave `[0, 90)` takes the opposite sign.
pub fn neighbor_view_with(v: &ViewpointSpec, seed: u64, p_azimuth: f64) -> ViewpointSpec {
    let mut rng = seed::rng(seed);
    let axis = if rng.gen::<f64>() < p_azimuth {
        ShiftAxis::Azimuth
    } else {
        ShiftAxis::Elevation
    };
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let inplane = rng.gen_range(0.0..360.0);
    match axis {
        ShiftAxis::Azimuth => ViewpointSpec::new(
            v.azimuth_deg + sign * NEIGHBOR_SHIFT_DEG,
            v.elevation_deg,
            inplane,
        ),
        ShiftAxis::Elevation => {
            let mut el = v.elevation_deg + sign * NEIGHBOR_SHIFT_DEG;
            // The pole is excluded: azimuth is meaningless there.
            if !(0.0..90.0).contains(&el) {
                el = v.elevation_deg - sign * NEIGHBOR_SHIFT_DEG;
            }
            ViewpointSpec::new(v.azimuth_deg, el, inplane)
        }
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
