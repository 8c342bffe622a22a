//! Procedural meshes used for sandboxes, toy training sets and tests.
//!
//! Builders return meshes in their natural frame; callers normalize.

use std::f64::consts::{PI, TAU};

use rand::Rng;

use super::{Mesh, Vec3};
use crate::seed;

fn build(id: &str, vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Mesh {
    Mesh::new(id, vertices, faces).expect("procedural mesh is well formed")
}

/// Axis-aligned box centered at the origin.
pub fn cuboid(id: &str, size: Vec3) -> Mesh {
    let [hx, hy, hz] = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let vertices = vec![
        [-hx, -hy, -hz],
        [hx, -hy, -hz],
        [hx, hy, -hz],
        [-hx, hy, -hz],
        [-hx, -hy, hz],
        [hx, -hy, hz],
        [hx, hy, hz],
        [-hx, hy, hz],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    build(id, vertices, faces)
}

/// Latitude/longitude sphere of unit radius.
pub fn uv_sphere(id: &str, rings: usize, segments: usize) -> Mesh {
    let rings = rings.max(2);
    let segments = segments.max(3);
    let mut vertices = vec![[0.0, 0.0, 1.0]];
    for r in 1..rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = TAU * s as f64 / segments as f64;
            vertices.push([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]);
        }
    }
    vertices.push([0.0, 0.0, -1.0]);
    let south = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            faces.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            faces.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    build(id, vertices, faces)
}

/// Frustum along z with capped ends; `top_radius = 0` gives a cone.
pub fn frustum(id: &str, bottom_radius: f64, top_radius: f64, height: f64, segments: usize) -> Mesh {
    let segments = segments.max(3);
    let h = height / 2.0;
    let mut vertices = vec![[0.0, 0.0, -h], [0.0, 0.0, h]];
    for s in 0..segments {
        let phi = TAU * s as f64 / segments as f64;
        vertices.push([bottom_radius * phi.cos(), bottom_radius * phi.sin(), -h]);
        vertices.push([top_radius * phi.cos(), top_radius * phi.sin(), h]);
    }
    let bot = |s: usize| 2 + 2 * (s % segments);
    let top = |s: usize| 3 + 2 * (s % segments);
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, bot(s + 1), bot(s)]);
        faces.push([bot(s), bot(s + 1), top(s + 1)]);
        faces.push([bot(s), top(s + 1), top(s)]);
        if top_radius > 0.0 {
            faces.push([1, top(s), top(s + 1)]);
        }
    }
    build(id, vertices, faces)
}

pub fn cylinder(id: &str, radius: f64, height: f64, segments: usize) -> Mesh {
    frustum(id, radius, radius, height, segments)
}

pub fn cone(id: &str, radius: f64, height: f64, segments: usize) -> Mesh {
    frustum(id, radius, 0.0, height, segments)
}

/// Torus around the z axis.
pub fn torus(id: &str, major: f64, minor: f64, major_segments: usize, minor_segments: usize) -> Mesh {
    let (nu, nv) = (major_segments.max(3), minor_segments.max(3));
    let mut vertices = Vec::with_capacity(nu * nv);
    for u in 0..nu {
        let a = TAU * u as f64 / nu as f64;
        for v in 0..nv {
            let b = TAU * v as f64 / nv as f64;
            let r = major + minor * b.cos();
            vertices.push([r * a.cos(), r * a.sin(), minor * b.sin()]);
        }
    }
    let idx = |u: usize, v: usize| (u % nu) * nv + (v % nv);
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for u in 0..nu {
        for v in 0..nv {
            faces.push([idx(u, v), idx(u + 1, v), idx(u + 1, v + 1)]);
            faces.push([idx(u, v), idx(u + 1, v + 1), idx(u, v + 1)]);
        }
    }
    build(id, vertices, faces)
}

/// Square-based pyramid with apex on +z.
pub fn square_pyramid(id: &str, base: f64, height: f64) -> Mesh {
    let b = base / 2.0;
    let h = height / 2.0;
    let vertices = vec![[-b, -b, -h], [b, -b, -h], [b, b, -h], [-b, b, -h], [0.0, 0.0, h]];
    let faces = vec![[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    build(id, vertices, faces)
}

/// Regular tetrahedron with unit circumradius.
pub fn tetrahedron(id: &str) -> Mesh {
    let s = 1.0 / 3f64.sqrt();
    let vertices = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    build(id, vertices, faces)
}

/// Zero-thickness square in the z = 0 plane, two triangles. Four vertices
/// satisfy the minimum mesh size.
pub fn flat_square(id: &str, side: f64) -> Mesh {
    let h = side / 2.0;
    let vertices = vec![[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]];
    build(id, vertices, vec![[0, 1, 2], [0, 2, 3]])
}

/// Ten visually distinct normalized primitives used as a classification
/// sandbox, with ids `sandbox_00` .. `sandbox_09`.
pub fn sandbox_meshes() -> Vec<Mesh> {
    let parts: Vec<Mesh> = vec![
        uv_sphere("sphere", 12, 24),
        cylinder("pillar", 0.35, 2.0, 24),
        cylinder("disk", 1.0, 0.2, 24),
        cone("cone", 1.0, 1.6, 24),
        torus("torus", 1.0, 0.25, 32, 12),
        square_pyramid("pyramid", 2.0, 1.2),
        cuboid("bar", [2.0, 0.3, 0.3]),
        Mesh::merge(
            "hourglass",
            &[
                frustum("lower", 1.0, 0.1, 1.0, 24).transformed([1.0; 3], [0.0, 0.0, -1.0]),
                frustum("upper", 0.1, 1.0, 1.0, 24),
            ],
        )
        .unwrap(),
        Mesh::merge(
            "mushroom",
            &[
                cylinder("stem", 0.25, 1.2, 24).transformed([1.0; 3], [0.0, 0.0, -1.2]),
                uv_sphere("cap", 8, 16).transformed([1.0, 1.0, 0.5], [0.0; 3]),
            ],
        )
        .unwrap(),
        Mesh::merge(
            "ringpost",
            &[
                cylinder("post", 0.15, 2.0, 16).transformed([1.0; 3], [0.0, 0.0, -1.0]),
                torus("ring", 0.8, 0.15, 32, 8),
            ],
        )
        .unwrap(),
    ];
    parts
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut m = m.normalized().expect("primitive has extent");
            m.source_path = format!("procedural:{}", m.object_id);
            m.object_id = format!("sandbox_{i:02}");
            m
        })
        .collect()
}

/// A random multi-part assembly of boxes, cylinders, cones and spheres,
/// normalized. Deterministic in `seed`.
pub fn random_assembly(object_id: &str, seed: u64) -> Mesh {
    let mut rng = seed::rng(seed);
    let n_parts = rng.gen_range(2..=4);
    let mut parts = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let size = [
            rng.gen_range(0.2..1.2),
            rng.gen_range(0.2..1.2),
            rng.gen_range(0.2..1.2),
        ];
        let offset = [
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
            rng.gen_range(-0.7..0.7),
        ];
        let base = match rng.gen_range(0..4) {
            0 => cuboid("p", [1.0; 3]),
            1 => cylinder("p", 0.5, 1.0, 16),
            2 => cone("p", 0.5, 1.0, 16),
            _ => uv_sphere("p", 8, 16).transformed([0.5; 3], [0.0; 3]),
        };
        let tilt = rng.gen_range(0.0..90.0);
        let spin = rng.gen_range(0.0..360.0);
        parts.push(
            base.transformed(size, [0.0; 3])
                .rotated_x(tilt)
                .rotated_z(spin)
                .transformed([1.0; 3], offset),
        );
    }
    let mut m = Mesh::merge(object_id, &parts)
        .and_then(Mesh::normalized)
        .expect("assembly has extent");
    m.source_path = format!("procedural:assembly:{seed}");
    m
}

/// `n` random assemblies with ids `<prefix>_000`, ... Each object's geometry
/// depends only on `(seed, index)`.
pub fn toy_objects(prefix: &str, n: usize, seed: u64) -> Vec<Mesh> {
    (0..n)
        .map(|i| random_assembly(&format!("{prefix}_{i:03}"), seed::derive(seed, &[i as u64])))
        .collect()
}
