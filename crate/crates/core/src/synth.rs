//! Synthetic benchmark meshes.
//!
//! The closed shapes are all built from a subdivided icosahedron (or
//! tetrahedron) so that refinement levels are comparable across shapes. The
//! torus and open disk exist to exercise topology rejection.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SemError;
use crate::mesh::{Point3, RawMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Icosphere,
    Ellipsoid,
    GaussianBumpSphere,
    Tetrahedron,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Icosphere, Shape::Ellipsoid, Shape::GaussianBumpSphere, Shape::Tetrahedron];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Icosphere => "icosphere",
            Shape::Ellipsoid => "ellipsoid",
            Shape::GaussianBumpSphere => "gaussian-bump-sphere",
            Shape::Tetrahedron => "tetrahedron",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Shape::ALL.iter().map(|s| s.name()).collect();
                SemError::Config(format!("unknown shape '{s}' (expected one of: {})", names.join(", ")))
            })
    }
}

/// Parameters for [`generate`]. Unused fields are ignored by shapes that do
/// not need them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub level: u32,
    pub axes: [f64; 3],
    pub bumps: usize,
    pub amplitude: f64,
    pub width: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            level: 3,
            axes: [1.0, 1.0, 1.5],
            bumps: 3,
            amplitude: 0.4,
            width: 0.35,
            seed: 0,
        }
    }
}

pub fn generate(shape: Shape, params: &SynthParams) -> RawMesh {
    match shape {
        Shape::Icosphere => icosphere(params.level),
        Shape::Ellipsoid => ellipsoid(params.level, params.axes),
        Shape::GaussianBumpSphere => {
            gaussian_bump_sphere(params.level, params.bumps, params.amplitude, params.width, params.seed)
        }
        Shape::Tetrahedron => tetrahedron(params.level),
    }
}

fn subdivide(mesh: &RawMesh) -> RawMesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::with_capacity(mesh.faces.len() * 3 / 2);
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point3>| -> usize {
        *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
            vertices.push((vertices[a] + vertices[b]) * 0.5);
            vertices.len() - 1
        })
    };
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        faces.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    RawMesh::new(vertices, faces)
}

fn icosahedron() -> RawMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let vertices = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Point3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    RawMesh::new(vertices, faces)
}

/// Unit icosphere with `10 * 4^level + 2` vertices.
pub fn icosphere(level: u32) -> RawMesh {
    let mut mesh = icosahedron();
    for _ in 0..level {
        mesh = subdivide(&mesh);
        for p in &mut mesh.vertices {
            *p = p.normalize();
        }
    }
    mesh
}

pub fn ellipsoid(level: u32, axes: [f64; 3]) -> RawMesh {
    let mut mesh = icosphere(level);
    for p in &mut mesh.vertices {
        *p = Point3::new(p.x * axes[0], p.y * axes[1], p.z * axes[2]);
    }
    mesh
}

/// Icosphere displaced radially by a sum of Gaussian bumps centred at
/// seeded random points on the sphere.
pub fn gaussian_bump_sphere(level: u32, bumps: usize, amplitude: f64, width: f64, seed: u64) -> RawMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Point3> = (0..bumps)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let s = (1.0 - z * z).sqrt();
            Point3::new(s * phi.cos(), s * phi.sin(), z)
        })
        .collect();
    let mut mesh = icosphere(level);
    let two_w2 = 2.0 * width * width;
    for p in &mut mesh.vertices {
        let bump: f64 = centers.iter().map(|c| (-(*p - c).norm_squared() / two_w2).exp()).sum();
        *p *= 1.0 + amplitude * bump;
    }
    mesh
}

/// Regular tetrahedron with flat (unprojected) subdivision.
pub fn tetrahedron(level: u32) -> RawMesh {
    let vertices = vec![
        Point3::new(1.0, 1.0, 1.0),
        Point3::new(1.0, -1.0, -1.0),
        Point3::new(-1.0, 1.0, -1.0),
        Point3::new(-1.0, -1.0, 1.0),
    ];
    let mut mesh = RawMesh::new(vertices, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]);
    for _ in 0..level {
        mesh = subdivide(&mesh);
    }
    mesh
}

/// Genus-one torus; rejected by [`crate::mesh::TriMesh::new`].
pub fn torus(major_segments: usize, minor_segments: usize, major_radius: f64, minor_radius: f64) -> RawMesh {
    let (nu, nv) = (major_segments, minor_segments);
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = 2.0 * PI * i as f64 / nu as f64;
        for j in 0..nv {
            let v = 2.0 * PI * j as f64 / nv as f64;
            let r = major_radius + minor_radius * v.cos();
            vertices.push(Point3::new(r * u.cos(), r * u.sin(), minor_radius * v.sin()));
        }
    }
    let idx = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    RawMesh::new(vertices, faces)
}

/// Flat triangulated square with `n x n` cells; has a boundary.
pub fn open_disk(n: usize) -> RawMesh {
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            vertices.push(Point3::new(i as f64 / n as f64, j as f64 / n as f64, 0.0));
        }
    }
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    let mut faces = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    RawMesh::new(vertices, faces)
}
