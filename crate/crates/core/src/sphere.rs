//! Maps between the unit sphere and the complex plane.
//!
//! The projection is taken from the north pole `(0, 0, 1)`, so the southern
//! hemisphere lands in the closed unit disk. Inversion `z -> z / |z|^2`
//! exchanges the two hemispheres; on the sphere it is the reflection
//! `x3 -> -x3`.

use std::ops::{Deref, DerefMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::mesh::Point3;

/// Tolerance on `|p| - 1` accepted by [`stereographic_project`].
pub const UNIT_TOL: f64 = 1e-9;
/// Distance from the north pole below which projection fails.
pub const POLE_TOL: f64 = 1e-12;
/// Modulus below which a planar point cannot be inverted.
pub const ORIGIN_TOL: f64 = 1e-14;

/// One of the two hemispherical charts.
///
/// The south chart is the plain projection, so the southern hemisphere maps
/// into the unit disk. The north chart is its inversion, which maps the
/// northern hemisphere into the unit disk with reversed orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chart {
    South,
    North,
}

impl Chart {
    pub const BOTH: [Chart; 2] = [Chart::South, Chart::North];

    /// 0 for south, 1 for north.
    pub fn index(self) -> usize {
        match self {
            Chart::South => 0,
            Chart::North => 1,
        }
    }

    pub fn other(self) -> Chart {
        match self {
            Chart::South => Chart::North,
            Chart::North => Chart::South,
        }
    }

    pub fn project(self, p: &Point3) -> Result<Complex64> {
        match self {
            Chart::South => stereographic_project(p),
            Chart::North => stereographic_project(&Point3::new(p.x, p.y, -p.z)),
        }
    }

    pub fn lift(self, z: Complex64) -> Point3 {
        match self {
            Chart::South => inverse_stereographic(z),
            Chart::North => inverse_stereographic_reflected(z),
        }
    }

    /// Sign of the planar signed area of a correctly oriented face.
    pub fn orientation_sign(self) -> f64 {
        match self {
            Chart::South => -1.0,
            Chart::North => 1.0,
        }
    }
}

impl std::fmt::Display for Chart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Chart::South => "south",
            Chart::North => "north",
        })
    }
}

/// Per-vertex planar coordinates of one chart.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanarCoords(pub Vec<Complex64>);

impl PlanarCoords {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    /// Entrywise inversion; see [`invert_plane`].
    pub fn inverted(&self) -> Result<Self> {
        invert_plane(&self.0).map(Self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

impl Deref for PlanarCoords {
    type Target = Vec<Complex64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for PlanarCoords {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

/// `(x1 + i x2) / (1 - x3)` for a unit vector `p`.
pub fn stereographic_project(p: &Point3) -> Result<Complex64> {
    if (p.norm() - 1.0).abs() > UNIT_TOL {
        return Err(SemError::NotOnSphere { x: p.x, y: p.y, z: p.z });
    }
    let to_pole = Point3::new(p.x, p.y, p.z - 1.0).norm();
    if to_pole < POLE_TOL {
        return Err(SemError::Pole);
    }
    let denom = 1.0 - p.z;
    Ok(Complex64::new(p.x / denom, p.y / denom))
}

/// `(2u, 2v, |z|^2 - 1) / (|z|^2 + 1)`.
pub fn inverse_stereographic(z: Complex64) -> Point3 {
    let r2 = z.norm_sqr();
    let s = 1.0 / (r2 + 1.0);
    Point3::new(2.0 * z.re * s, 2.0 * z.im * s, (r2 - 1.0) * s)
}

/// Inverse projection followed by the reflection `x3 -> -x3`; equal to
/// `inverse_stereographic(invert(z))` without dividing by `z`.
pub fn inverse_stereographic_reflected(z: Complex64) -> Point3 {
    let r2 = z.norm_sqr();
    let s = 1.0 / (r2 + 1.0);
    Point3::new(2.0 * z.re * s, 2.0 * z.im * s, (1.0 - r2) * s)
}

/// `z / |z|^2` for a single value.
pub fn invert_point(z: Complex64) -> Option<Complex64> {
    let r2 = z.norm_sqr();
    (z.norm() >= ORIGIN_TOL).then(|| Complex64::new(z.re / r2, z.im / r2))
}

/// Entrywise `z / |z|^2`.
pub fn invert_plane(h: &[Complex64]) -> Result<Vec<Complex64>> {
    h.iter()
        .enumerate()
        .map(|(index, &z)| invert_point(z).ok_or(SemError::Origin { index }))
        .collect()
}

/// Chord length between the sphere images of `a` and `b`:
/// `2 |a - b| / (sqrt(1 + |a|^2) sqrt(1 + |b|^2))`.
pub fn chord_length(a: Complex64, b: Complex64) -> f64 {
    2.0 * (a - b).norm() / ((1.0 + a.norm_sqr()).sqrt() * (1.0 + b.norm_sqr()).sqrt())
}
