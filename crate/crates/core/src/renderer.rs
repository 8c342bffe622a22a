//! Deterministic software rasterizer for normalized meshes.
//!
//! Perspective camera on a sphere around the origin, z-buffered triangles,
//! two-sided Lambertian shading from a single directional light (a headlight
//! by default). Background pixels are a flat gray unless composited later.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{cross, dot, norm, scale, sub, Mesh, Vec3, ViewpointSpec};
use crate::seed;

/// Gray level of the flat background.
pub const BACKGROUND_GRAY: u8 = 128;
const AMBIENT: f64 = 0.15;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("view {index}: {source}")]
    AtView {
        index: usize,
        #[source]
        source: Box<RenderError>,
    },
    #[error("background pool is empty")]
    EmptyPool,
    #[error("background {index} is {width}x{height}, smaller than the {size}px render")]
    BackgroundTooSmall {
        index: usize,
        width: u32,
        height: u32,
        size: u32,
    },
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    #[default]
    FlatGray,
    /// Leaves the flat gray in place; callers composite a pool image with
    /// [`composite_background`].
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub image_size_px: u32,
    /// Camera distance in units of the bounding-sphere radius.
    pub camera_distance: f64,
    pub field_of_view_deg: f64,
    /// World-space direction towards the light. `None` places the light at
    /// the camera.
    pub light_direction: Option<Vec3>,
    pub material_albedo: f64,
    pub background: Background,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size_px: 224,
            camera_distance: 2.5,
            field_of_view_deg: 45.0,
            light_direction: None,
            material_albedo: 0.9,
            background: Background::FlatGray,
        }
    }
}

impl RenderConfig {
    pub fn with_size(mut self, px: u32) -> Self {
        self.image_size_px = px;
        self
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.image_size_px < 32 {
            return Err(RenderError::Config(format!(
                "image_size_px must be >= 32, got {}",
                self.image_size_px
            )));
        }
        if !(self.camera_distance > 1.0) || !self.camera_distance.is_finite() {
            return Err(RenderError::Config(format!(
                "camera_distance must exceed 1.0, got {}",
                self.camera_distance
            )));
        }
        if !(self.field_of_view_deg > 0.0 && self.field_of_view_deg < 180.0) {
            return Err(RenderError::Config(format!(
                "field_of_view_deg must be in (0, 180), got {}",
                self.field_of_view_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.material_albedo) {
            return Err(RenderError::Config(format!(
                "material_albedo must be in [0, 1], got {}",
                self.material_albedo
            )));
        }
        if let Some(l) = self.light_direction {
            if !(norm(l) > 1e-12) {
                return Err(RenderError::Config("light_direction has zero length".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding. Prototype sets record it
    /// so that stale render settings are detectable.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(width: u32, height: u32) -> Self {
        ForegroundMask {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean foreground pixel position `(x, y)` in pixel-center coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub object_id: String,
    pub viewpoint: ViewpointSpec,
    pub pixels: RgbImage,
    pub mask: ForegroundMask,
}

impl Rendering {
    /// `<root>/<object_id>/<elev>_<azim>_<inplane>.png`
    pub fn output_path(root: &Path, object_id: &str, viewpoint: &ViewpointSpec) -> PathBuf {
        root.join(object_id)
            .join(format!("{}.png", viewpoint.file_stem()))
    }

    pub fn save_png(&self, root: &Path) -> Result<PathBuf, RenderError> {
        let path = Self::output_path(root, &self.object_id, &self.viewpoint);
        let write_err = |e: String| RenderError::Write {
            path: path.display().to_string(),
            reason: e,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| write_err(e.to_string()))?;
        }
        self.pixels
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| write_err(e.to_string()))?;
        Ok(path)
    }
}

/// Orthonormal camera frame.
struct Camera {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    focal: f64,
}

impl Camera {
    fn new(v: &ViewpointSpec, cfg: &RenderConfig) -> Result<Self, RenderError> {
        let (az, el, roll) = (
            v.azimuth_deg.to_radians(),
            v.elevation_deg.to_radians(),
            v.inplane_deg.to_radians(),
        );
        if !(az.is_finite() && el.is_finite() && roll.is_finite()) {
            return Err(RenderError::DegenerateCamera(format!("non-finite viewpoint {v:?}")));
        }
        let d = cfg.camera_distance;
        let eye = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
        let forward = scale(eye, -1.0 / d);
        // Tangent of the azimuth circle; well defined even looking straight down.
        let right0 = [-az.sin(), az.cos(), 0.0];
        let up0 = cross(right0, forward);
        let (s, c) = roll.sin_cos();
        let right = [
            c * right0[0] + s * up0[0],
            c * right0[1] + s * up0[1],
            c * right0[2] + s * up0[2],
        ];
        let up = [
            -s * right0[0] + c * up0[0],
            -s * right0[1] + c * up0[1],
            -s * right0[2] + c * up0[2],
        ];
        let focal = 1.0 / (cfg.field_of_view_deg.to_radians() / 2.0).tan();
        Ok(Camera {
            eye,
            right,
            up,
            forward,
            focal,
        })
    }

    /// Screen position in pixels and view depth.
    fn project(&self, p: Vec3, size: f64) -> (f64, f64, f64) {
        let rel = sub(p, self.eye);
        let (x, y, z) = (dot(rel, self.right), dot(rel, self.up), dot(rel, self.forward));
        let nx = self.focal * x / z;
        let ny = self.focal * y / z;
        ((nx + 1.0) * 0.5 * size, (1.0 - ny) * 0.5 * size, z)
    }
}

fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Renders `mesh` from `viewpoint`. The flat-gray pipeline draws no random
/// numbers, so `seed` only matters for future stochastic stages; the result
/// is a pure function of all inputs.
pub fn render(
    mesh: &Mesh,
    viewpoint: &ViewpointSpec,
    config: &RenderConfig,
    _seed: u64,
) -> Result<Rendering, RenderError> {
    config.validate()?;
    let cam = Camera::new(viewpoint, config)?;
    let size = config.image_size_px;
    let fsize = f64::from(size);
    let n_px = (size * size) as usize;
    let light = match config.light_direction {
        Some(l) => scale(l, 1.0 / norm(l)),
        None => scale(cam.forward, -1.0),
    };

    let projected: Vec<(f64, f64, f64)> = mesh
        .vertices
        .iter()
        .map(|&v| cam.project(v, fsize))
        .collect();
    if projected.iter().any(|p| !(p.2 > 1e-9)) {
        return Err(RenderError::DegenerateCamera(
            "mesh extends behind the camera".into(),
        ));
    }

    let mut inv_depth = vec![0.0f64; n_px];
    let mut shade = vec![0.0f64; n_px];
    let mut covered = vec![false; n_px];

    for face in &mesh.faces {
        let [a, b, c] = [projected[face[0]], projected[face[1]], projected[face[2]]];
        let area = edge(a.0, a.1, b.0, b.1, c.0, c.1);
        if area.abs() < 1e-12 {
            continue;
        }
        let (pa, pb, pc) = (
            mesh.vertices[face[0]],
            mesh.vertices[face[1]],
            mesh.vertices[face[2]],
        );
        let n = cross(sub(pb, pa), sub(pc, pa));
        let nl = norm(n);
        if nl < 1e-15 {
            continue;
        }
        let lambert = (dot(n, light) / nl).abs();
        let intensity = config.material_albedo * (AMBIENT + (1.0 - AMBIENT) * lambert);

        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as u32;
        let x1 = (a.0.max(b.0).max(c.0).ceil().min(fsize) as u32).min(size);
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as u32;
        let y1 = (a.1.max(b.1).max(c.1).ceil().min(fsize) as u32).min(size);
        let inv_area = 1.0 / area;
        for y in y0..y1 {
            let py = f64::from(y) + 0.5;
            for x in x0..x1 {
                let px = f64::from(x) + 0.5;
                let w0 = edge(b.0, b.1, c.0, c.1, px, py) * inv_area;
                let w1 = edge(c.0, c.1, a.0, a.1, px, py) * inv_area;
                let w2 = edge(a.0, a.1, b.0, b.1, px, py) * inv_area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let iz = w0 / a.2 + w1 / b.2 + w2 / c.2;
                let idx = (y * size + x) as usize;
                if !covered[idx] || iz > inv_depth[idx] {
                    covered[idx] = true;
                    inv_depth[idx] = iz;
                    shade[idx] = intensity;
                }
            }
        }
    }

    let mut pixels = RgbImage::from_pixel(size, size, Rgb([BACKGROUND_GRAY; 3]));
    let mut mask = ForegroundMask::new(size, size);
    for (idx, &hit) in covered.iter().enumerate() {
        if hit {
            let g = (shade[idx] * 255.0).round().clamp(0.0, 255.0) as u8;
            let (x, y) = (idx as u32 % size, idx as u32 / size);
            pixels.put_pixel(x, y, Rgb([g, g, g]));
            mask.bits[idx] = true;
        }
    }
    Ok(Rendering {
        object_id: mesh.object_id.clone(),
        viewpoint: *viewpoint,
        pixels,
        mask,
    })
}

/// Replaces every background pixel with a random crop of a randomly chosen
/// pool image. Foreground pixels are left untouched.
pub fn composite_background(
    r: &Rendering,
    background_pool: &[RgbImage],
    seed: u64,
) -> Result<Rendering, RenderError> {
    if background_pool.is_empty() {
        return Err(RenderError::EmptyPool);
    }
    let (w, h) = r.pixels.dimensions();
    let mut rng = seed::rng(seed);
    let index = rng.gen_range(0..background_pool.len());
    let bg = &background_pool[index];
    let (bw, bh) = bg.dimensions();
    if bw < w || bh < h {
        return Err(RenderError::BackgroundTooSmall {
            index,
            width: bw,
            height: bh,
            size: w.max(h),
        });
    }
    let ox = rng.gen_range(0..=bw - w);
    let oy = rng.gen_range(0..=bh - h);
    let mut out = r.clone();
    for y in 0..h {
        for x in 0..w {
            if !r.mask.get(x, y) {
                out.pixels.put_pixel(x, y, *bg.get_pixel(ox + x, oy + y));
            }
        }
    }
    Ok(out)
}

/// Renders every viewpoint in parallel, preserving order. The first failure
/// is reported with its viewpoint index.
pub fn render_batch(
    mesh: &Mesh,
    viewpoints: &[ViewpointSpec],
    config: &RenderConfig,
) -> Result<Vec<Rendering>, RenderError> {
    viewpoints
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            render(mesh, v, config, i as u64).map_err(|e| RenderError::AtView {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::{cuboid, flat_square, uv_sphere};
    use crate::geometry::{expand_grid, ViewGrid};

    fn small() -> RenderConfig {
        RenderConfig::default().with_size(64)
    }

    #[test]
    fn sphere_mask_is_centered_disk_and_deterministic() {
        let m = uv_sphere("s", 24, 48).normalized().unwrap();
        let cfg = RenderConfig {
            camera_distance: 4.0,
            ..small()
        };
        let v = ViewpointSpec::new(37.0, 22.0, 81.0);
        let a = render(&m, &v, &cfg, 0).unwrap();
        let b = render(&m, &v, &cfg, 0).unwrap();
        assert_eq!(a, b);
        let (cx, cy) = a.mask.centroid().unwrap();
        assert!((cx - 32.0).abs() < 0.5 && (cy - 32.0).abs() < 0.5);
        // Disk: every foreground pixel is within the fitted radius.
        let r = (a.mask.area() as f64 / std::f64::consts::PI).sqrt();
        for y in 0..64 {
            for x in 0..64 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d < r - 1.5 {
                    assert!(a.mask.get(x, y));
                }
                if d > r + 1.5 {
                    assert!(!a.mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn cube_four_fold_symmetry() {
        let m = cuboid("c", [1.0; 3]).normalized().unwrap();
        let a = render(&m, &ViewpointSpec::new(0.0, 0.0, 0.0), &small(), 0).unwrap();
        let b = render(&m, &ViewpointSpec::new(90.0, 0.0, 0.0), &small(), 0).unwrap();
        assert_eq!(a.mask, b.mask);
        let diff = a
            .pixels
            .pixels()
            .zip(b.pixels.pixels())
            .filter(|(p, q)| (i16::from(p[0]) - i16::from(q[0])).abs() > 1)
            .count();
        assert_eq!(diff, 0);
    }

    /// Shoelace area of the square's corners pushed through an independent
    /// pinhole projection.
    fn projected_square_area(side: f64, v: &ViewpointSpec, cfg: &RenderConfig) -> f64 {
        let h = side / 2.0;
        let (az, el) = (v.azimuth_deg.to_radians(), v.elevation_deg.to_radians());
        let d = cfg.camera_distance;
        let eye = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
        let f = [-eye[0] / d, -eye[1] / d, -eye[2] / d];
        let r = [-az.sin(), az.cos(), 0.0];
        let u = cross(r, f);
        let focal = 1.0 / (cfg.field_of_view_deg.to_radians() / 2.0).tan();
        let px = f64::from(cfg.image_size_px) / 2.0;
        let pts: Vec<(f64, f64)> = [[-h, -h], [h, -h], [h, h], [-h, h]]
            .iter()
            .map(|c| {
                let rel = [c[0] - eye[0], c[1] - eye[1], -eye[2]];
                let z = dot(rel, f);
                (focal * dot(rel, r) / z * px, focal * dot(rel, u) / z * px)
            })
            .collect();
        let mut a = 0.0;
        for i in 0..4 {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % 4];
            a += x0 * y1 - x1 * y0;
        }
        a.abs() / 2.0
    }

    #[test]
    fn tilted_square_area_ratio() {
        // The square lies in z = 0: looking straight down it faces the
        // camera, at 30° elevation it is tilted 60° away.
        let m = flat_square("sq", 1.0).normalized().unwrap();
        let side = 2f64.sqrt();
        let top = ViewpointSpec::new(0.0, 90.0, 0.0);
        let tilt = ViewpointSpec::new(0.0, 30.0, 0.0);

        // Distant narrow camera: close to orthographic, ratio -> cos 60°.
        let far = RenderConfig {
            image_size_px: 256,
            camera_distance: 12.0,
            field_of_view_deg: 10.0,
            ..RenderConfig::default()
        };
        let a = render(&m, &top, &far, 0).unwrap().mask.area() as f64;
        let b = render(&m, &tilt, &far, 0).unwrap().mask.area() as f64;
        assert!((b / a - 0.5).abs() <= 0.05, "ratio {}", b / a);

        // Default camera: rasterized areas track the analytic projection.
        let cfg = RenderConfig::default().with_size(256);
        for v in [top, tilt, ViewpointSpec::new(40.0, 50.0, 0.0)] {
            let raster = render(&m, &v, &cfg, 0).unwrap().mask.area() as f64;
            let exact = projected_square_area(side, &v, &cfg);
            assert!((raster / exact - 1.0).abs() < 0.02, "{v:?}: {raster} vs {exact}");
        }
    }

    #[test]
    fn mask_non_empty_over_elevation_range() {
        let m = cuboid("c", [2.0, 0.3, 0.3]).normalized().unwrap();
        for el in [0.0, 30.0, 60.0, 90.0] {
            for az in [0.0, 45.0, 90.0] {
                let r = render(&m, &ViewpointSpec::new(az, el, 0.0), &small(), 0).unwrap();
                assert!(r.mask.area() > 0, "az {az} el {el}");
            }
        }
    }

    #[test]
    fn viewpoint_sensitivity_for_asymmetric_mesh() {
        let m = cuboid("bar", [2.0, 0.5, 0.3]).normalized().unwrap();
        let a = render(&m, &ViewpointSpec::new(0.0, 30.0, 0.0), &small(), 0).unwrap();
        let b = render(&m, &ViewpointSpec::new(90.0, 30.0, 0.0), &small(), 0).unwrap();
        let differing = a
            .pixels
            .pixels()
            .zip(b.pixels.pixels())
            .filter(|(p, q)| p != q)
            .count();
        assert!(differing as f64 >= 0.01 * 64.0 * 64.0);
    }

    #[test]
    fn roll_rotates_the_image() {
        let m = cuboid("bar", [2.0, 0.3, 0.3]).normalized().unwrap();
        let cfg = small();
        let a = render(&m, &ViewpointSpec::new(90.0, 0.0, 0.0), &cfg, 0).unwrap();
        let b = render(&m, &ViewpointSpec::new(90.0, 0.0, 90.0), &cfg, 0).unwrap();
        // A horizontal bar becomes vertical.
        let extent = |r: &Rendering| {
            let (mut w, mut h) = (0u32, 0u32);
            for y in 0..64 {
                w = w.max((0..64).filter(|&x| r.mask.get(x, y)).count() as u32);
            }
            for x in 0..64 {
                h = h.max((0..64).filter(|&y| r.mask.get(x, y)).count() as u32);
            }
            (w, h)
        };
        let (aw, ah) = extent(&a);
        let (bw, bh) = extent(&b);
        assert!(aw > 3 * ah);
        assert!(bh > 3 * bw);
    }

    #[test]
    fn rejects_invalid_config() {
        let m = cuboid("c", [1.0; 3]).normalized().unwrap();
        let v = ViewpointSpec::new(0.0, 30.0, 0.0);
        let near = RenderConfig {
            camera_distance: 0.9,
            ..small()
        };
        assert!(matches!(render(&m, &v, &near, 0), Err(RenderError::Config(_))));
        assert!(matches!(
            render(&m, &v, &RenderConfig::default().with_size(16), 0),
            Err(RenderError::Config(_))
        ));
    }

    #[test]
    fn composite_replaces_only_background() {
        let m = cuboid("c", [1.0; 3]).normalized().unwrap();
        let r = render(&m, &ViewpointSpec::new(20.0, 30.0, 0.0), &small(), 0).unwrap();
        let red = RgbImage::from_pixel(80, 80, Rgb([255, 0, 0]));
        let out = composite_background(&r, &[red], 3).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if r.mask.get(x, y) {
                    assert_eq!(out.pixels.get_pixel(x, y), r.pixels.get_pixel(x, y));
                } else {
                    assert_eq!(*out.pixels.get_pixel(x, y), Rgb([255, 0, 0]));
                }
            }
        }
    }

    #[test]
    fn composite_full_mask_is_identity_and_deterministic() {
        let m = cuboid("c", [1.0; 3]).normalized().unwrap();
        let mut r = render(&m, &ViewpointSpec::new(0.0, 30.0, 0.0), &small(), 0).unwrap();
        let noise = RgbImage::from_fn(100, 90, |x, y| Rgb([(x * 7) as u8, (y * 3) as u8, (x ^ y) as u8]));
        let pool = vec![noise.clone(), noise];
        let a = composite_background(&r, &pool, 11).unwrap();
        assert_eq!(a, composite_background(&r, &pool, 11).unwrap());
        r.mask.bits.iter_mut().for_each(|b| *b = true);
        assert_eq!(composite_background(&r, &pool, 11).unwrap(), r);
        assert!(matches!(composite_background(&r, &[], 0), Err(RenderError::EmptyPool)));
        let tiny = RgbImage::new(10, 10);
        assert!(matches!(
            composite_background(&r, &[tiny], 0),
            Err(RenderError::BackgroundTooSmall { .. })
        ));
    }

    #[test]
    fn batch_matches_sequential_in_grid_order() {
        let m = cuboid("c", [1.0, 0.6, 0.3]).normalized().unwrap();
        let views = expand_grid(&ViewGrid::standard()).unwrap();
        let cfg = RenderConfig::default().with_size(32);
        let batch = render_batch(&m, &views, &cfg).unwrap();
        assert_eq!(batch.len(), 24);
        for (i, (r, v)) in batch.iter().zip(&views).enumerate() {
            assert_eq!(r.viewpoint, *v);
            assert_eq!(*r, render(&m, v, &cfg, i as u64).unwrap());
        }
        assert!(render_batch(&m, &[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn batch_error_carries_view_index() {
        let m = cuboid("c", [1.0; 3]).normalized().unwrap();
        let views = vec![ViewpointSpec::new(0.0, 30.0, 0.0), ViewpointSpec {
            azimuth_deg: f64::NAN,
            elevation_deg: 0.0,
            inplane_deg: 0.0,
        }];
        match render_batch(&m, &views, &small()) {
            Err(RenderError::AtView { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn output_path_layout() {
        let p = Rendering::output_path(Path::new("renders"), "obj", &ViewpointSpec::new(90.0, 30.0, 0.0));
        assert_eq!(p, Path::new("renders/obj/30_90_0.png"));
    }
}
