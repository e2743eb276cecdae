//! Initial spherical conformal map.
//!
//! The most regular face is pinned to an equilateral triangle in the plane,
//! the remaining vertices solve the classical cotangent Laplace equation,
//! and the result is lifted to the sphere and balanced by Möbius
//! transformations until its area-weighted mass centre is at the origin.
//! Alternating hemispherical cotangent solves then remove the distortion
//! concentrated around the pinned face, followed by a final re-centering.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::laplacian::{assemble_cotan_laplacian, Region};
use crate::mesh::{self, face_area, MeshFormat, Point3, TriMesh};
use crate::solver::{InteriorSolver, SolverKind};
use crate::sphere::{inverse_stereographic, Chart};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    /// Circumradius of the pinned triangle.
    pub pin_radius: f64,
    pub max_centering_iter: usize,
    pub centering_tol: f64,
    /// Fraction of the mass centre removed per Möbius step.
    pub damping: f64,
    /// Alternating south/north re-solves after the pinned solve.
    pub refine_passes: usize,
    pub solver: SolverKind,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            pin_radius: 10.0,
            max_centering_iter: 100,
            centering_tol: 1e-6,
            damping: 0.5,
            refine_passes: 3,
            solver: SolverKind::Direct,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalMap {
    pub f0: Vec<Point3>,
    /// Mean absolute corner-angle difference in radians.
    pub quality: f64,
    pub centered: bool,
    pub center_norm: f64,
    pub centering_iterations: usize,
}

/// Face maximizing `4√3 |Δ| / Σ e²` (1 for an equilateral triangle).
pub fn most_regular_face(mesh: &TriMesh) -> usize {
    let p = mesh.vertices();
    let mut best = (0, f64::NEG_INFINITY);
    for (fi, &[a, b, c]) in mesh.faces().iter().enumerate() {
        let e2 = (p[b] - p[a]).norm_squared() + (p[c] - p[b]).norm_squared() + (p[a] - p[c]).norm_squared();
        let q = 4.0 * 3f64.sqrt() * mesh.face_areas()[fi] / e2;
        if q > best.1 {
            best = (fi, q);
        }
    }
    best.0
}

fn corner_angles(a: &Point3, b: &Point3, c: &Point3) -> [f64; 3] {
    let angle = |o: &Point3, u: &Point3, v: &Point3| {
        let (x, y) = (u - o, v - o);
        x.cross(&y).norm().atan2(x.dot(&y))
    };
    [angle(a, b, c), angle(b, c, a), angle(c, a, b)]
}

/// Mean absolute difference between the corner angles of the mesh and of
/// the flat image triangles.
pub fn angle_distortion(mesh: &TriMesh, f: &[Point3]) -> f64 {
    let p = mesh.vertices();
    let mut total = 0.0;
    for &[a, b, c] in mesh.faces() {
        let dom = corner_angles(&p[a], &p[b], &p[c]);
        let img = corner_angles(&f[a], &f[b], &f[c]);
        total += dom.iter().zip(&img).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    total / (3 * mesh.num_faces()) as f64
}

/// Weighted mass centre `Σ a f / Σ a`.
pub fn mass_center(f: &[Point3], weights: &[f64]) -> Point3 {
    let total: f64 = weights.iter().sum();
    f.iter().zip(weights).map(|(p, &w)| p * w).sum::<Point3>() / total
}

/// The ball automorphism taking `c` to the origin, restricted to the sphere.
pub fn mobius_shift(x: &Point3, c: &Point3) -> Point3 {
    let d = x - c;
    let y = d * ((1.0 - c.norm_squared()) / d.norm_squared()) - c;
    y.normalize()
}

/// Applies damped Möbius shifts until the weighted mass centre is below
/// `tol`. Returns the number of steps and whether it succeeded.
pub fn mobius_center(f: &mut [Point3], weights: &[f64], cfg: &ConformalConfig) -> (usize, bool, f64) {
    let mut c = mass_center(f, weights);
    for it in 0..cfg.max_centering_iter {
        if c.norm() <= cfg.centering_tol {
            return (it, true, c.norm());
        }
        let shift = c * cfg.damping;
        for p in f.iter_mut() {
            *p = mobius_shift(p, &shift);
        }
        c = mass_center(f, weights);
    }
    let ok = c.norm() <= cfg.centering_tol;
    (cfg.max_centering_iter, ok, c.norm())
}

fn signed_volume(mesh: &TriMesh, f: &[Point3]) -> f64 {
    mesh.faces().iter().map(|&[a, b, c]| f[a].dot(&f[b].cross(&f[c]))).sum()
}

/// Planar harmonic map with the given face pinned to an equilateral
/// triangle of circumradius `radius`.
pub fn punctured_harmonic_map(mesh: &TriMesh, pinned_face: usize, radius: f64, solver: SolverKind) -> Result<Vec<Complex64>> {
    let pinned = mesh.faces()[pinned_face];
    let interior: Vec<usize> = (0..mesh.num_vertices()).filter(|v| !pinned.contains(v)).collect();
    let region = Region::new(mesh, None, interior, pinned.to_vec())?;
    let l = assemble_cotan_laplacian(mesh, &region);
    let h_b: Vec<Complex64> = (0..3).map(|k| Complex64::from_polar(radius, 2.0 * PI * k as f64 / 3.0)).collect();
    let h_i = InteriorSolver::new(&l, solver)?.solve(&h_b)?;
    let mut h = vec![Complex64::new(0.0, 0.0); mesh.num_vertices()];
    for (v, z) in region.vertices().zip(h_i.into_iter().chain(h_b)) {
        h[v] = z;
    }
    Ok(h)
}

/// Re-solves the classical Laplace equation on the vertices of `chart`
/// inside the unit disk, with the surrounding one-ring as Dirichlet data.
/// Does nothing if a vertex sits on the chart's pole.
pub fn hemisphere_resolve(mesh: &TriMesh, f: &mut [Point3], chart: Chart, solver: SolverKind) -> Result<()> {
    let h = match f.iter().map(|p| chart.project(&p.normalize())).collect::<Result<Vec<_>>>() {
        Ok(h) => h,
        Err(SemError::Pole) => {
            log::debug!("skipping {chart} re-solve: a vertex lies on the pole");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let inside: Vec<bool> = h.iter().map(|z| z.norm() < 1.0).collect();
    let interior: Vec<usize> = (0..h.len()).filter(|&v| inside[v]).collect();
    let boundary: Vec<usize> = (0..h.len())
        .filter(|&v| !inside[v] && mesh.neighbors(v).iter().any(|&u| inside[u]))
        .collect();
    if interior.is_empty() || boundary.is_empty() {
        return Ok(());
    }
    let region = Region::new(mesh, Some(chart), interior, boundary)?;
    let l = assemble_cotan_laplacian(mesh, &region);
    let h_i = InteriorSolver::new(&l, solver)?.solve(&region.gather_boundary(&h))?;
    for (&v, z) in region.interior().iter().zip(h_i) {
        f[v] = chart.lift(z);
    }
    Ok(())
}

pub fn conformal_initialize(mesh: &TriMesh, cfg: &ConformalConfig) -> Result<ConformalMap> {
    let face = most_regular_face(mesh);
    let mut h = punctured_harmonic_map(mesh, face, cfg.pin_radius, cfg.solver)?;
    let mut f: Vec<Point3> = h.iter().map(|&z| inverse_stereographic(z)).collect();
    if signed_volume(mesh, &f) < 0.0 {
        for z in &mut h {
            *z = z.conj();
        }
        f = h.iter().map(|&z| inverse_stereographic(z)).collect();
    }
    let weights = mesh.vertex_areas();
    let (mut centering_iterations, mut centered, mut center_norm) = mobius_center(&mut f, &weights, cfg);
    if cfg.refine_passes > 0 {
        for _ in 0..cfg.refine_passes {
            for chart in Chart::BOTH {
                hemisphere_resolve(mesh, &mut f, chart, cfg.solver)?;
            }
        }
        let (it, ok, norm) = mobius_center(&mut f, &weights, cfg);
        centering_iterations += it;
        (centered, center_norm) = (ok, norm);
    }
    if !centered {
        log::warn!(
            "Möbius centering stopped after {centering_iterations} steps with mass centre {center_norm:.3e}"
        );
    }
    Ok(ConformalMap {
        quality: angle_distortion(mesh, &f),
        f0: f,
        centered,
        center_norm,
        centering_iterations,
    })
}

/// Reads a precomputed spherical map: a mesh file whose vertices are the
/// unit-sphere images of `mesh`'s vertices, in the same order.
pub fn load_spherical_map(path: impl AsRef<Path>, mesh: &TriMesh) -> Result<ConformalMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SemError::io(path, e))?;
    let raw = match MeshFormat::from_path(path)? {
        MeshFormat::Off => mesh::read_off(&text)?,
        MeshFormat::Obj => mesh::read_obj(&text)?,
    };
    if raw.vertices.len() != mesh.num_vertices() {
        return Err(SemError::DimensionMismatch(format!(
            "spherical map has {} vertices, mesh has {}",
            raw.vertices.len(),
            mesh.num_vertices()
        )));
    }
    if let Some(p) = raw.vertices.iter().find(|p| (p.norm() - 1.0).abs() > 1e-6) {
        return Err(SemError::NotOnSphere { x: p.x, y: p.y, z: p.z });
    }
    let f: Vec<Point3> = raw.vertices.iter().map(|p| p.normalize()).collect();
    for (fi, &[a, b, c]) in mesh.faces().iter().enumerate() {
        let area = face_area(&f[a], &f[b], &f[c]);
        if area < crate::laplacian::DEGENERATE_IMAGE_AREA {
            return Err(SemError::DegenerateImage { face: fi, area });
        }
    }
    let center_norm = mass_center(&f, &mesh.vertex_areas()).norm();
    Ok(ConformalMap {
        quality: angle_distortion(mesh, &f),
        f0: f,
        centered: center_norm <= ConformalConfig::default().centering_tol,
        center_norm,
        centering_iterations: 0,
    })
}
