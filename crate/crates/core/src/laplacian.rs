//! The modified stretch Laplacian, stretch factors and the stretch energy.
//!
//! For an edge `[v_i, v_j]` with opposite vertices `v_l` and `v_r` the weight
//! is
//!
//! ```text
//! w_ij = -1/2 (cot θ_l(f) / σ(Δ_l) + cot θ_r(f) / σ(Δ_r))
//!      = -(f_l - f_i)·(f_l - f_j) / (4|Δ_l|) - (f_r - f_i)·(f_r - f_j) / (4|Δ_r|)
//! ```
//!
//! where the angles are measured on the image triangles and
//! `σ(Δ) = |Δ| / |f(Δ)|`. The second form is the one used for assembly.

use faer::sparse::{SparseColMat, SparseColMatRef, Triplet};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::mesh::{face_area, Point3, TriMesh};
use crate::sphere::Chart;

/// Image areas below this are treated as collapsed triangles.
pub const DEGENERATE_IMAGE_AREA: f64 = 1e-15;

const ABSENT: usize = usize::MAX;

/// A set of vertices `I ∪ B` on which a Laplacian is assembled.
///
/// Local indices put the interior `I` first, then the boundary ring `B`.
/// Only faces with all three vertices in the region contribute to weights,
/// so the term of an edge's outside face is dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    chart: Option<Chart>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    local: Vec<usize>,
    faces: Vec<usize>,
    edges: Vec<usize>,
}

impl Region {
    /// Builds a region. Every neighbour of an interior vertex must lie in
    /// `interior ∪ boundary`.
    pub fn new(mesh: &TriMesh, chart: Option<Chart>, interior: Vec<usize>, boundary: Vec<usize>) -> Result<Self> {
        let n = mesh.num_vertices();
        let mut local = vec![ABSENT; n];
        for (k, &v) in interior.iter().chain(&boundary).enumerate() {
            if v >= n {
                return Err(SemError::RegionMismatch(format!("vertex {v} is outside 0..{n}")));
            }
            if local[v] != ABSENT {
                return Err(SemError::RegionMismatch(format!("vertex {v} listed twice")));
            }
            local[v] = k;
        }
        for &v in &interior {
            if let Some(&u) = mesh.neighbors(v).iter().find(|&&u| local[u] == ABSENT) {
                return Err(SemError::RegionMismatch(format!(
                    "interior vertex {v} has neighbour {u} outside the region"
                )));
            }
        }
        let faces: Vec<usize> = (0..mesh.num_faces())
            .filter(|&fi| mesh.faces()[fi].iter().all(|&v| local[v] != ABSENT))
            .collect();
        let mut edge_used = vec![false; mesh.num_edges()];
        for &fi in &faces {
            for e in mesh.face_edges(fi) {
                edge_used[e] = true;
            }
        }
        let edges = (0..mesh.num_edges()).filter(|&e| edge_used[e]).collect();
        Ok(Self {
            chart,
            interior,
            boundary,
            local,
            faces,
            edges,
        })
    }

    /// All vertices as interior, no boundary.
    pub fn whole(mesh: &TriMesh) -> Self {
        Self::new(mesh, None, (0..mesh.num_vertices()).collect(), Vec::new())
            .expect("the full vertex set is always a valid region")
    }

    pub fn chart(&self) -> Option<Chart> {
        self.chart
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn len(&self) -> usize {
        self.interior.len() + self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global vertex ids in local order.
    pub fn vertices(&self) -> impl Iterator<Item = usize> + '_ {
        self.interior.iter().chain(&self.boundary).copied()
    }

    pub fn local_index(&self, v: usize) -> Option<usize> {
        self.local.get(v).copied().filter(|&k| k != ABSENT)
    }

    pub fn contains(&self, v: usize) -> bool {
        self.local_index(v).is_some()
    }

    pub fn is_interior(&self, v: usize) -> bool {
        self.local_index(v).is_some_and(|k| k < self.interior.len())
    }

    /// Faces with all three vertices in the region.
    pub fn faces(&self) -> &[usize] {
        &self.faces
    }

    /// Edges of [`Region::faces`].
    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    /// Per-vertex values restricted to the region, in local order.
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.vertices().map(|v| values[v]).collect()
    }

    pub fn gather_interior<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.interior.iter().map(|&v| values[v]).collect()
    }

    pub fn gather_boundary<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.boundary.iter().map(|&v| values[v]).collect()
    }
}

/// Geometry of one edge `[v_i, v_j]` with the image positions of its
/// endpoints and, per side, the opposite image vertex and the domain area
/// of that face. A missing side contributes nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeStencil {
    pub fi: Point3,
    pub fj: Point3,
    pub left: Option<(Point3, f64)>,
    pub right: Option<(Point3, f64)>,
}

fn half_weight_dot(fi: &Point3, fj: &Point3, fo: &Point3, area: f64) -> f64 {
    -(fo - fi).dot(&(fo - fj)) / (4.0 * area)
}

fn half_weight_cot(fi: &Point3, fj: &Point3, fo: &Point3, area: f64) -> Option<f64> {
    let (u, v) = (fi - fo, fj - fo);
    let cross = u.cross(&v).norm();
    let image_area = 0.5 * cross;
    if image_area < DEGENERATE_IMAGE_AREA {
        return None;
    }
    let theta = cross.atan2(u.dot(&v));
    let cot = theta.cos() / theta.sin();
    let sigma = area / image_area;
    Some(-0.5 * cot / sigma)
}

impl EdgeStencil {
    pub fn weight_dot(&self) -> f64 {
        let side = |s: Option<(Point3, f64)>| s.map_or(0.0, |(fo, a)| half_weight_dot(&self.fi, &self.fj, &fo, a));
        side(self.left) + side(self.right)
    }

    /// Cotangent form. The error's `face` is 0 for the left side and 1 for
    /// the right side.
    pub fn weight_cot(&self) -> Result<f64> {
        let mut w = 0.0;
        for (k, side) in [self.left, self.right].into_iter().enumerate() {
            if let Some((fo, a)) = side {
                w += half_weight_cot(&self.fi, &self.fj, &fo, a).ok_or(SemError::DegenerateImage {
                    face: k,
                    area: face_area(&self.fi, &self.fj, &fo),
                })?;
            }
        }
        Ok(w)
    }
}

/// Stencil of mesh edge `edge` under `f`, dropping sides whose face is not
/// in `region`.
pub fn edge_stencil(mesh: &TriMesh, f: &[Point3], edge: usize, region: Option<&Region>) -> EdgeStencil {
    let e = mesh.edges()[edge];
    let keep = |face: usize| region.is_none_or(|r| mesh.faces()[face].iter().all(|&v| r.contains(v)));
    let side = |o: usize, face: usize| keep(face).then(|| (f[o], mesh.face_areas()[face]));
    EdgeStencil {
        fi: f[e.i],
        fj: f[e.j],
        left: side(e.left, e.left_face),
        right: side(e.right, e.right_face),
    }
}

fn check_image(mesh: &TriMesh, f: &[Point3], face: usize) -> Result<f64> {
    let [a, b, c] = mesh.faces()[face];
    let area = face_area(&f[a], &f[b], &f[c]);
    if area < DEGENERATE_IMAGE_AREA {
        return Err(SemError::DegenerateImage { face, area });
    }
    Ok(area)
}

fn check_len(mesh: &TriMesh, f: &[Point3]) -> Result<()> {
    if f.len() != mesh.num_vertices() {
        return Err(SemError::DimensionMismatch(format!(
            "{} positions for a mesh with {} vertices",
            f.len(),
            mesh.num_vertices()
        )));
    }
    Ok(())
}

/// Weight of `edge` in the dot-product form.
pub fn edge_weight_dot(mesh: &TriMesh, f: &[Point3], edge: usize, region: Option<&Region>) -> Result<f64> {
    check_len(mesh, f)?;
    let e = mesh.edges()[edge];
    for face in [e.left_face, e.right_face] {
        check_image(mesh, f, face)?;
    }
    Ok(edge_stencil(mesh, f, edge, region).weight_dot())
}

/// Weight of `edge` in the cotangent form.
pub fn edge_weight_cot(mesh: &TriMesh, f: &[Point3], edge: usize, region: Option<&Region>) -> Result<f64> {
    check_len(mesh, f)?;
    let e = mesh.edges()[edge];
    edge_stencil(mesh, f, edge, region).weight_cot().map_err(|err| match err {
        SemError::DegenerateImage { face, area } => SemError::DegenerateImage {
            face: if face == 0 { e.left_face } else { e.right_face },
            area,
        },
        other => other,
    })
}

/// `|Δ| / |f(Δ)|` for one face.
pub fn stretch_factor(mesh: &TriMesh, f: &[Point3], face: usize) -> Result<f64> {
    check_len(mesh, f)?;
    Ok(mesh.face_areas()[face] / check_image(mesh, f, face)?)
}

pub fn stretch_factors(mesh: &TriMesh, f: &[Point3]) -> Result<Vec<f64>> {
    check_len(mesh, f)?;
    (0..mesh.num_faces()).map(|fi| stretch_factor(mesh, f, fi)).collect()
}

/// Per-edge dot-form weights accumulated over `faces` in order.
fn accumulate_weights(mesh: &TriMesh, f: &[Point3], faces: &[usize]) -> Result<Vec<f64>> {
    let mut w = vec![0.0; mesh.num_edges()];
    for &fi in faces {
        check_image(mesh, f, fi)?;
        let face = mesh.faces()[fi];
        let area = mesh.face_areas()[fi];
        let edges = mesh.face_edges(fi);
        for c in 0..3 {
            let (o, a, b) = (face[c], face[(c + 1) % 3], face[(c + 2) % 3]);
            w[edges[c]] += half_weight_dot(&f[a], &f[b], &f[o], area);
        }
    }
    Ok(w)
}

/// A Laplacian over a [`Region`] with its interior blocks.
#[derive(Debug, Clone)]
pub struct StretchLaplacian {
    chart: Option<Chart>,
    n_interior: usize,
    n_boundary: usize,
    full: SparseColMat<usize, f64>,
    ii: SparseColMat<usize, f64>,
    ib: SparseColMat<usize, f64>,
    weights: Vec<(usize, usize, f64)>,
}

impl StretchLaplacian {
    /// Assembles from one weight per region edge. Off-diagonal entries are
    /// the weights, the diagonal holds negative row sums.
    pub fn from_edge_weights(mesh: &TriMesh, region: &Region, weight: impl Fn(usize) -> f64) -> Self {
        let dim = region.len();
        let ni = region.n_interior();
        let mut diag = vec![0.0; dim];
        let mut weights = Vec::with_capacity(region.edges().len());
        let mut full = Vec::with_capacity(2 * region.edges().len() + dim);
        let mut ii = Vec::new();
        let mut ib = Vec::new();
        let mut push = |r: usize, c: usize, w: f64| {
            full.push(Triplet::new(r, c, w));
            if r < ni {
                if c < ni {
                    ii.push(Triplet::new(r, c, w));
                } else {
                    ib.push(Triplet::new(r, c - ni, w));
                }
            }
        };
        for &e in region.edges() {
            let edge = mesh.edges()[e];
            let (a, b) = (region.local[edge.i], region.local[edge.j]);
            let w = weight(e);
            push(a, b, w);
            push(b, a, w);
            diag[a] -= w;
            diag[b] -= w;
            weights.push((a.min(b), a.max(b), w));
        }
        for (k, &d) in diag.iter().enumerate() {
            push(k, k, d);
        }
        let build = |r: usize, c: usize, t: &[Triplet<usize, usize, f64>]| {
            SparseColMat::try_new_from_triplets(r, c, t).expect("triplet indices are in range")
        };
        Self {
            chart: region.chart(),
            n_interior: ni,
            n_boundary: region.n_boundary(),
            full: build(dim, dim, &full),
            ii: build(ni, ni, &ii),
            ib: build(ni, dim - ni, &ib),
            weights,
        }
    }

    pub fn chart(&self) -> Option<Chart> {
        self.chart
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn n_boundary(&self) -> usize {
        self.n_boundary
    }

    pub fn dim(&self) -> usize {
        self.n_interior + self.n_boundary
    }

    pub fn matrix(&self) -> SparseColMatRef<'_, usize, f64> {
        self.full.as_ref()
    }

    /// `L_{I,I}`.
    pub fn interior_block(&self) -> SparseColMatRef<'_, usize, f64> {
        self.ii.as_ref()
    }

    /// `L_{I,B}`.
    pub fn boundary_block(&self) -> SparseColMatRef<'_, usize, f64> {
        self.ib.as_ref()
    }

    /// `(a, b, w)` per edge in local indices with `a < b`.
    pub fn edge_weights(&self) -> &[(usize, usize, f64)] {
        &self.weights
    }

    /// `L x` for a region-local vector.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        spmv(self.matrix(), x)
    }

    /// `xᴴ L x` accumulated entry by entry.
    pub fn quadratic_form(&self, x: &[Complex64]) -> Result<Complex64> {
        if x.len() != self.dim() {
            return Err(SemError::RegionMismatch(format!(
                "vector of length {} against a {}x{} Laplacian",
                x.len(),
                self.dim(),
                self.dim()
            )));
        }
        let m = self.matrix();
        let mut q = Complex64::new(0.0, 0.0);
        for j in 0..m.ncols() {
            for (&i, &v) in m.row_idx_of_col_raw(j).iter().zip(m.val_of_col(j)) {
                q += x[i].conj() * v * x[j];
            }
        }
        Ok(q)
    }

    pub fn to_dense(&self) -> faer::Mat<f64> {
        self.full.to_dense()
    }
}

/// Sparse real matrix times complex vector.
pub fn spmv(m: SparseColMatRef<'_, usize, f64>, x: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(m.ncols(), x.len(), "spmv dimension mismatch");
    let mut y = vec![Complex64::new(0.0, 0.0); m.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        for (&i, &v) in m.row_idx_of_col_raw(j).iter().zip(m.val_of_col(j)) {
            y[i] += v * xj;
        }
    }
    y
}

/// The modified stretch Laplacian of `f` on `region`.
pub fn assemble_laplacian(mesh: &TriMesh, f: &[Point3], region: &Region) -> Result<StretchLaplacian> {
    check_len(mesh, f)?;
    let w = accumulate_weights(mesh, f, region.faces())?;
    Ok(StretchLaplacian::from_edge_weights(mesh, region, |e| w[e]))
}

/// The classical cotangent Laplacian of the mesh itself on `region`.
pub fn assemble_cotan_laplacian(mesh: &TriMesh, region: &Region) -> StretchLaplacian {
    let p = mesh.vertices();
    let mut w = vec![0.0; mesh.num_edges()];
    for &fi in region.faces() {
        let face = mesh.faces()[fi];
        let edges = mesh.face_edges(fi);
        for c in 0..3 {
            let (o, a, b) = (face[c], face[(c + 1) % 3], face[(c + 2) % 3]);
            let (u, v) = (p[a] - p[o], p[b] - p[o]);
            let theta = u.cross(&v).norm().atan2(u.dot(&v));
            w[edges[c]] += -0.5 * theta.cos() / theta.sin();
        }
    }
    StretchLaplacian::from_edge_weights(mesh, region, |e| w[e])
}

/// `E_S(f) = Σ_Δ |f(Δ)|² / |Δ|`, evaluated as `½ Σ_edges (-w_ij) ‖f_i - f_j‖²`
/// over the whole mesh.
///
/// This is the sum of the two hemispherical quadratic forms written in
/// sphere coordinates; it tends to `4π` for equiareal maps of fine meshes.
pub fn stretch_energy(mesh: &TriMesh, f: &[Point3]) -> Result<f64> {
    check_len(mesh, f)?;
    let faces: Vec<usize> = (0..mesh.num_faces()).collect();
    let w = accumulate_weights(mesh, f, &faces)?;
    Ok(0.5
        * mesh
            .edges()
            .iter()
            .zip(&w)
            .map(|(e, &w)| -w * (f[e.i] - f[e.j]).norm_squared())
            .sum::<f64>())
}

/// `½ [Re(h1ᴴ L1 h1) + Re(h2ᴴ L2 h2)]` for region-local chart coordinates.
pub fn chart_energy(h1: &[Complex64], h2: &[Complex64], l1: &StretchLaplacian, l2: &StretchLaplacian) -> Result<f64> {
    let mut total = 0.0;
    for (h, l) in [(h1, l1), (h2, l2)] {
        let q = l.quadratic_form(h)?;
        let scale: f64 = l.edge_weights().iter().map(|&(a, b, w)| w.abs() * h[a].norm() * h[b].norm()).sum::<f64>();
        let diag: f64 = (0..l.dim()).map(|k| h[k].norm_sqr()).sum::<f64>();
        let bound = 1e-10 * (1.0 + scale + diag * l.edge_weights().iter().map(|w| w.2.abs()).fold(0.0, f64::max));
        assert!(
            q.im.abs() <= bound,
            "quadratic form of a real symmetric matrix has imaginary part {}",
            q.im
        );
        total += q.re;
    }
    Ok(0.5 * total)
}

/// Summary of the per-face stretch factors of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchStats {
    pub sigma: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub energy: f64,
    pub folded_faces: usize,
}

/// Chart owning a face when no partition is given: the south chart if at
/// least two vertices lie in the closed southern hemisphere.
pub fn hemisphere_owner(f: &[Point3], face: &[usize; 3]) -> Chart {
    if face.iter().filter(|&&v| f[v].z <= 0.0).count() >= 2 {
        Chart::South
    } else {
        Chart::North
    }
}

/// Number of faces whose image in the owning chart has the wrong
/// orientation (or zero area).
pub fn count_folds(mesh: &TriMesh, f: &[Point3], owner: impl Fn(usize) -> Chart) -> Result<usize> {
    check_len(mesh, f)?;
    let mut folds = 0;
    for (fi, face) in mesh.faces().iter().enumerate() {
        let chart = owner(fi);
        let z = face
            .iter()
            .map(|&v| chart.project(&f[v].normalize()))
            .collect::<Result<Vec<_>>>()?;
        let signed = ((z[1] - z[0]).conj() * (z[2] - z[0])).im;
        if !(signed * chart.orientation_sign() > 0.0) {
            folds += 1;
        }
    }
    Ok(folds)
}

pub fn stretch_stats(mesh: &TriMesh, f: &[Point3]) -> Result<StretchStats> {
    let sigma = stretch_factors(mesh, f)?;
    let m = sigma.len() as f64;
    let mean = sigma.iter().sum::<f64>() / m;
    let std = (sigma.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m).sqrt();
    let energy = stretch_energy(mesh, f)?;
    let folded_faces = count_folds(mesh, f, |fi| hemisphere_owner(f, &mesh.faces()[fi]))?;
    Ok(StretchStats {
        sigma,
        mean,
        std,
        energy,
        folded_faces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::RawMesh;
    use crate::synth;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    fn equilateral_pair(scale: f64) -> EdgeStencil {
        let h = 3f64.sqrt() / 2.0;
        let area = 3f64.sqrt() / 4.0;
        EdgeStencil {
            fi: p(0.0, 0.0, 0.0) * scale,
            fj: p(1.0, 0.0, 0.0) * scale,
            left: Some((p(0.5, h, 0.0) * scale, area)),
            right: Some((p(0.5, -h, 0.0) * scale, area)),
        }
    }

    #[test]
    fn equilateral_weights() {
        let s = equilateral_pair(1.0);
        assert_relative_eq!(s.weight_dot(), -1.0 / 3f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(s.weight_cot().unwrap(), -1.0 / 3f64.sqrt(), max_relative = 1e-14);
        // domain areas stay those of the unit triangles, image doubled
        let s2 = equilateral_pair(2.0);
        assert_relative_eq!(s2.weight_dot(), -4.0 / 3f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(s2.weight_cot().unwrap(), -4.0 / 3f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn obtuse_pair_has_positive_weight() {
        let s = EdgeStencil {
            fi: p(0.0, 0.0, 0.0),
            fj: p(2.0, 0.0, 0.0),
            left: Some((p(1.0, 0.2, 0.0), 0.2)),
            right: Some((p(1.1, -0.3, 0.0), 0.3)),
        };
        let (d, c) = (s.weight_dot(), s.weight_cot().unwrap());
        assert!(d > 0.0);
        assert!((d - c).abs() <= 1e-12 * d.abs().max(1.0));
    }

    #[test]
    fn right_angle_side_vanishes() {
        let s = EdgeStencil {
            fi: p(1.0, 0.0, 0.0),
            fj: p(0.0, 1.0, 0.0),
            left: Some((p(0.0, 0.0, 0.0), 0.5)),
            right: Some((p(1.0, 1.0, 0.3), 0.5)),
        };
        let right_only = EdgeStencil { left: None, ..s };
        assert_eq!(s.weight_dot(), right_only.weight_dot());
        assert!((s.weight_cot().unwrap() - right_only.weight_cot().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn stretch_factor_examples() {
        let mesh = TriMesh::new(synth::tetrahedron(0)).unwrap();
        let f: Vec<Point3> = mesh.vertices().to_vec();
        for fi in 0..mesh.num_faces() {
            assert_relative_eq!(stretch_factor(&mesh, &f, fi).unwrap(), 1.0, max_relative = 1e-14);
        }
        let doubled: Vec<Point3> = f.iter().map(|q| q * 2.0).collect();
        assert_relative_eq!(stretch_factor(&mesh, &doubled, 0).unwrap(), 0.25, max_relative = 1e-14);

        // right triangle with legs (1, 1) mapped to legs (2, 1)
        let raw = RawMesh::new(
            vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(0.0, 1.0, 0.0), p(0.3, 0.3, -1.0)],
            vec![[0, 1, 2], [0, 3, 1], [1, 3, 2], [2, 3, 0]],
        );
        let mesh = TriMesh::new(raw).unwrap();
        let face = mesh
            .faces()
            .iter()
            .position(|fc| {
                let mut s = *fc;
                s.sort();
                s == [0, 1, 2]
            })
            .unwrap();
        let mut img = mesh.vertices().to_vec();
        img[1] = p(2.0, 0.0, 0.0);
        assert_relative_eq!(stretch_factor(&mesh, &img, face).unwrap(), 0.5, max_relative = 1e-14);

        img[2] = p(1.0, 0.0, 0.0);
        img[1] = p(2.0, 0.0, 0.0);
        assert!(matches!(stretch_factor(&mesh, &img, face), Err(SemError::DegenerateImage { .. })));
    }

    fn sphere_mesh(level: u32) -> TriMesh {
        TriMesh::new(synth::icosphere(level)).unwrap()
    }

    #[test]
    fn assembled_weights_match_per_edge_oracle() {
        let mesh = sphere_mesh(2);
        let f: Vec<Point3> = mesh.vertices().iter().map(|q| (q + p(0.1 * q.y, 0.0, 0.2 * q.x * q.x)).normalize()).collect();
        let interior: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| f[v].z < 0.1).collect();
        let boundary: Vec<usize> = (0..mesh.num_vertices())
            .filter(|&v| f[v].z >= 0.1 && mesh.neighbors(v).iter().any(|&u| f[u].z < 0.1))
            .collect();
        let region = Region::new(&mesh, Some(Chart::South), interior, boundary).unwrap();
        let l = assemble_laplacian(&mesh, &f, &region).unwrap();
        let dense = l.to_dense();
        for &e in region.edges() {
            let edge = mesh.edges()[e];
            let (a, b) = (region.local_index(edge.i).unwrap(), region.local_index(edge.j).unwrap());
            let oracle = edge_weight_dot(&mesh, &f, e, Some(&region)).unwrap();
            assert_eq!(dense[(a, b)], oracle);
            assert_eq!(dense[(b, a)], oracle);
            if region.is_interior(edge.i) || region.is_interior(edge.j) {
                assert_eq!(oracle, edge_weight_dot(&mesh, &f, e, None).unwrap());
            }
        }
        for r in 0..l.dim() {
            let row: f64 = (0..l.dim()).map(|c| dense[(r, c)]).sum();
            let mag: f64 = (0..l.dim()).map(|c| dense[(r, c)].abs()).sum();
            assert!(row.abs() <= 1e-12 * mag.max(1.0));
        }
        assert_eq!(l.interior_block().nrows(), region.n_interior());
        assert_eq!(l.boundary_block().ncols(), region.n_boundary());
    }

    #[test]
    fn single_interior_vertex() {
        let mesh = sphere_mesh(1);
        let v = 0;
        let ring = mesh.neighbors(v).to_vec();
        let region = Region::new(&mesh, None, vec![v], ring.clone()).unwrap();
        let f = mesh.vertices().to_vec();
        let l = assemble_laplacian(&mesh, &f, &region).unwrap();
        let ii = l.interior_block().to_dense();
        assert_eq!((ii.nrows(), ii.ncols()), (1, 1));
        let expected: f64 = ring
            .iter()
            .map(|&u| -edge_weight_dot(&mesh, &f, mesh.edge_index(v, u).unwrap(), None).unwrap())
            .sum();
        assert_relative_eq!(ii[(0, 0)], expected, max_relative = 1e-14);
        assert!(Region::new(&mesh, None, vec![v], ring[1..].to_vec()).is_err());
    }

    #[test]
    fn cotan_matches_stretch_form_on_identity() {
        let mesh = TriMesh::new(synth::ellipsoid(2, [1.0, 1.2, 1.5])).unwrap();
        let region = Region::whole(&mesh);
        let a = assemble_cotan_laplacian(&mesh, &region);
        let b = assemble_laplacian(&mesh, mesh.vertices(), &region).unwrap();
        for (x, y) in a.edge_weights().iter().zip(b.edge_weights()) {
            assert_eq!((x.0, x.1), (y.0, y.1));
            assert!((x.2 - y.2).abs() <= 1e-12 * x.2.abs().max(1.0));
        }
    }

    #[test]
    fn energy_matches_face_sum_and_identity_area() {
        let mesh = sphere_mesh(3).normalized();
        let f: Vec<Point3> = mesh.vertices().iter().map(|q| q.normalize()).collect();
        let oracle: f64 = (0..mesh.num_faces())
            .map(|fi| {
                let [a, b, c] = mesh.faces()[fi];
                face_area(&f[a], &f[b], &f[c]).powi(2) / mesh.face_areas()[fi]
            })
            .sum();
        let e = stretch_energy(&mesh, &f).unwrap();
        assert_relative_eq!(e, oracle, max_relative = 1e-12);
        let id = stretch_energy(&mesh, mesh.vertices()).unwrap();
        assert_relative_eq!(id, 4.0 * PI, max_relative = 1e-12);
    }

    #[test]
    fn chart_energy_examples() {
        let mesh = sphere_mesh(1);
        let f = mesh.vertices().to_vec();
        let region = Region::whole(&mesh);
        let l = assemble_laplacian(&mesh, &f, &region).unwrap();
        let constant = vec![Complex64::new(0.3, -2.0); l.dim()];
        assert!(chart_energy(&constant, &constant, &l, &l).unwrap().abs() < 1e-13);
        let short = vec![Complex64::new(1.0, 0.0); 3];
        assert!(matches!(chart_energy(&short, &constant, &l, &l), Err(SemError::RegionMismatch(_))));
    }

    #[test]
    fn chart_energy_three_vertex_oracle() {
        // a single tetrahedron face as the region gives a 3x3 matrix
        let raw = synth::tetrahedron(0);
        let mesh = TriMesh::new(raw).unwrap();
        let weights = [-0.7, 0.4, -1.3, -0.2, -0.9, -0.5];
        let region = Region::new(&mesh, None, vec![], vec![0, 1, 2]).unwrap();
        let l = StretchLaplacian::from_edge_weights(&mesh, &region, |e| weights[e]);
        assert_eq!(l.dim(), 3);
        let dense = l.to_dense();
        let h = [Complex64::new(0.5, 1.0), Complex64::new(-1.5, 0.25), Complex64::new(2.0, -0.75)];
        let mut q = Complex64::new(0.0, 0.0);
        for r in 0..3 {
            for c in 0..3 {
                q += h[r].conj() * dense[(r, c)] * h[c];
            }
        }
        let zero = [Complex64::new(0.0, 0.0); 3];
        let e = chart_energy(&h, &zero, &l, &l).unwrap();
        assert_relative_eq!(e, 0.5 * q.re, max_relative = 1e-14);
        let mut pairs = 0.0;
        for &(a, b, w) in l.edge_weights() {
            pairs += -w * (h[a] - h[b]).norm_sqr();
        }
        assert_relative_eq!(e, 0.5 * pairs, max_relative = 1e-13);
    }

    #[test]
    fn stats_on_identity_and_scaling() {
        let mesh = sphere_mesh(2).normalized();
        let s = stretch_stats(&mesh, mesh.vertices()).unwrap();
        assert_relative_eq!(s.mean, 1.0, max_relative = 1e-12);
        assert!(s.std < 1e-12);
        assert_eq!(s.folded_faces, 0);
        let doubled: Vec<Point3> = mesh.vertices().iter().map(|q| q * 2.0).collect();
        assert_relative_eq!(stretch_stats(&mesh, &doubled).unwrap().mean, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn folds_detect_mirrored_faces() {
        let mesh = sphere_mesh(2);
        let f: Vec<Point3> = mesh.vertices().iter().map(|q| q.normalize()).collect();
        assert_eq!(stretch_stats(&mesh, &f).unwrap().folded_faces, 0);
        let mirrored: Vec<Point3> = f.iter().map(|q| p(-q.x, q.y, q.z)).collect();
        assert_eq!(stretch_stats(&mesh, &mirrored).unwrap().folded_faces, mesh.num_faces());
    }

    fn point() -> impl Strategy<Value = Point3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y, z)| p(x, y, z))
    }

    fn well_shaped(a: &Point3, b: &Point3, c: &Point3) -> bool {
        let area = face_area(a, b, c);
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        area > 1e-2 * longest * longest
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cot_and_dot_forms_agree(
            fi in point(), fj in point(), fl in point(), fr in point(),
            al in 0.05f64..2.0, ar in 0.05f64..2.0,
        ) {
            prop_assume!(well_shaped(&fi, &fj, &fl) && well_shaped(&fi, &fj, &fr));
            let s = EdgeStencil { fi, fj, left: Some((fl, al)), right: Some((fr, ar)) };
            let (d, c) = (s.weight_dot(), s.weight_cot().unwrap());
            prop_assert!((d - c).abs() <= 1e-12 * d.abs().max(1.0), "dot {} cot {}", d, c);
        }

        #[test]
        fn quadratic_form_is_rotation_invariant(phase in 0.0f64..std::f64::consts::TAU, seed in 0u64..1000) {
            let mesh = sphere_mesh(1);
            let f = mesh.vertices().to_vec();
            let l = assemble_laplacian(&mesh, &f, &Region::whole(&mesh)).unwrap();
            let h: Vec<Complex64> = (0..l.dim())
                .map(|k| Complex64::new(((k as u64 * 7 + seed) % 13) as f64 / 5.0, ((k as u64 * 3 + seed) % 11) as f64 / 7.0))
                .collect();
            let u = Complex64::from_polar(1.0, phase);
            let hr: Vec<Complex64> = h.iter().map(|z| z * u).collect();
            let e0 = chart_energy(&h, &h, &l, &l).unwrap();
            let e1 = chart_energy(&hr, &hr, &l, &l).unwrap();
            prop_assert!((e0 - e1).abs() <= 1e-10 * e0.abs().max(1.0));
        }
    }
}
