//! Numerical checks of the convergence analysis: the weight-difference
//! decomposition, the H-matrix identity, the error-transfer recursion,
//! spectral tracking of the accumulated transfer product and R-linear
//! rate estimates.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use faer::{c64, Mat};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::laplacian::{assemble_laplacian, edge_stencil, Region, StretchLaplacian};
use crate::mesh::{Point3, TriMesh};
use crate::sem::{IndexPartition, SemConfig, SemSolver, Snapshot};
use crate::solver::{InteriorSolver, SolverKind};
use crate::sphere::Chart;

/// Γ denominators below this are rejected.
pub const GAMMA_FLOOR: f64 = 1e-14;

/// Chart coordinates together with their sphere image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSample {
    pub chart: Chart,
    pub h: Vec<Complex64>,
    pub f: Vec<Point3>,
}

impl ChartSample {
    pub fn new(chart: Chart, h: Vec<Complex64>) -> Self {
        let f = h.iter().map(|&z| chart.lift(z)).collect();
        Self { chart, h, f }
    }
}

/// The terms of the decomposition
/// `w_new - w_old = c_i ε_i - c_l ε_l + c_j ε_j - c_r ε_r` for one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub edge: (usize, usize),
    /// Opposite vertices of the left and right faces, if those faces count.
    pub l: Option<usize>,
    pub r: Option<usize>,
    pub w_new: f64,
    pub w_old: f64,
    pub c_i: Complex64,
    pub c_l: Complex64,
    pub c_j: Complex64,
    pub c_r: Complex64,
    pub eps_i: Complex64,
    pub eps_l: Complex64,
    pub eps_j: Complex64,
    pub eps_r: Complex64,
    /// Phases of `ε` in the order `i, l, j, r`.
    pub psi: [f64; 4],
    pub d: [Complex64; 4],
}

impl WeightDelta {
    pub fn predicted(&self) -> Complex64 {
        self.c_i * self.eps_i - self.c_l * self.eps_l + self.c_j * self.eps_j - self.c_r * self.eps_r
    }

    /// `|w_new - w_old - predicted|`.
    pub fn residual(&self) -> f64 {
        (Complex64::from(self.w_new - self.w_old) - self.predicted()).norm()
    }

    /// Coefficient of `ε_v` in the decomposition, summed per vertex.
    pub fn vertex_terms(&self) -> Vec<(usize, Complex64)> {
        let mut out = vec![(self.edge.0, self.c_i), (self.edge.1, self.c_j)];
        if let Some(l) = self.l {
            out.push((l, -self.c_l));
        }
        if let Some(r) = self.r {
            out.push((r, -self.c_r));
        }
        out
    }
}

fn phase(z: Complex64) -> f64 {
    if z == Complex64::new(0.0, 0.0) {
        0.0
    } else {
        z.arg()
    }
}

fn d_factor(h_new: Complex64, h_old: Complex64) -> (f64, Complex64) {
    let psi = phase(h_new - h_old);
    let m = 2.0 / ((1.0 + h_new.norm_sqr()).sqrt() * (1.0 + h_old.norm_sqr()).sqrt());
    (psi, Complex64::from_polar(m, -psi))
}

/// `‖v‖ cos φ` for the angle `φ` between `u` and `v`; zero if either vanishes.
fn projected_length(u: &Point3, v: &Point3) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    nv * (u.dot(v) / (nu * nv))
}

/// Decomposition of the change of the weight of `edge` between two samples
/// of the same chart.
pub fn weight_delta(mesh: &TriMesh, edge: usize, region: Option<&Region>, new: &ChartSample, old: &ChartSample) -> Result<WeightDelta> {
    let n = mesh.num_vertices();
    for s in [new, old] {
        if s.h.len() != n || s.f.len() != n {
            return Err(SemError::DimensionMismatch(format!("sample of length {} for {n} vertices", s.h.len())));
        }
    }
    for face in [mesh.edges()[edge].left_face, mesh.edges()[edge].right_face] {
        let [a, b, c] = mesh.faces()[face];
        for f in [&new.f, &old.f] {
            let area = crate::mesh::face_area(&f[a], &f[b], &f[c]);
            if area < crate::laplacian::DEGENERATE_IMAGE_AREA {
                return Err(SemError::DegenerateImage { face, area });
            }
        }
    }
    let e = mesh.edges()[edge];
    let st_new = edge_stencil(mesh, &new.f, edge, region);
    let st_old = edge_stencil(mesh, &old.f, edge, region);
    let (i, j) = (e.i, e.j);
    let eps = |v: usize| new.h[v] - old.h[v];
    let df = |v: usize| new.f[v] - old.f[v];
    let (fi, fj, pi, pj) = (new.f[i], new.f[j], old.f[i], old.f[j]);
    let mut psi = [0.0; 4];
    let mut d = [Complex64::new(0.0, 0.0); 4];
    for (slot, v) in [(0, i), (2, j)] {
        (psi[slot], d[slot]) = d_factor(new.h[v], old.h[v]);
    }
    let zero = Complex64::new(0.0, 0.0);
    let (mut c_i, mut c_j, mut c_l, mut c_r) = (zero, zero, zero, zero);
    let mut l = None;
    let mut r = None;
    if st_new.left.is_some() {
        let o = e.left;
        let area = mesh.face_areas()[e.left_face];
        (psi[1], d[1]) = d_factor(new.h[o], old.h[o]);
        let (fo, po) = (new.f[o], old.f[o]);
        let s = 4.0 * area;
        c_l = d[1] * projected_length(&df(o), &(fo - fj + po - pi)) / s;
        c_i += d[0] * projected_length(&df(i), &(fo - fj)) / s;
        c_j += d[2] * projected_length(&df(j), &(po - pi)) / s;
        l = Some(o);
    }
    if st_new.right.is_some() {
        let o = e.right;
        let area = mesh.face_areas()[e.right_face];
        (psi[3], d[3]) = d_factor(new.h[o], old.h[o]);
        let (fo, po) = (new.f[o], old.f[o]);
        let s = 4.0 * area;
        c_r = d[3] * projected_length(&df(o), &(fo - fi + po - pj)) / s;
        c_i += d[0] * projected_length(&df(i), &(po - pj)) / s;
        c_j += d[2] * projected_length(&df(j), &(fo - fi)) / s;
        r = Some(o);
    }
    Ok(WeightDelta {
        edge: (i, j),
        l,
        r,
        w_new: st_new.weight_dot(),
        w_old: st_old.weight_dot(),
        c_i,
        c_l,
        c_j,
        c_r,
        eps_i: eps(i),
        eps_l: l.map_or(zero, eps),
        eps_j: eps(j),
        eps_r: r.map_or(zero, eps),
        psi,
        d,
    })
}

/// One iterate of one chart with its Laplacian and factorization.
pub struct ChartFrame {
    pub k: usize,
    pub sample: ChartSample,
    pub laplacian: StretchLaplacian,
    solver: InteriorSolver,
}

impl ChartFrame {
    pub fn new(mesh: &TriMesh, region: &Region, k: usize, sample: ChartSample, kind: SolverKind) -> Result<Self> {
        let laplacian = assemble_laplacian(mesh, &sample.f, region)?;
        let solver = InteriorSolver::new(&laplacian, kind)?;
        Ok(Self {
            k,
            sample,
            laplacian,
            solver,
        })
    }

    pub fn solver(&self) -> &InteriorSolver {
        &self.solver
    }

    /// Dense `Â = -L_II^{-1} L_IB` as a complex matrix.
    pub fn transfer(&self) -> Result<Mat<c64>> {
        let a = self.solver.transfer_matrix()?;
        Ok(Mat::from_fn(a.nrows(), a.ncols(), |r, c| c64::new(a[(r, c)], 0.0)))
    }

    /// `L_II^{-1} M` for a dense complex `M`.
    pub fn solve_dense(&self, m: &Mat<c64>) -> Result<Mat<c64>> {
        self.solver.solve_complex_dense(m.as_ref())
    }
}

/// The matrices of the H identity for one chart and iteration.
#[derive(Debug, Clone)]
pub struct HAssembly {
    pub h_i: Mat<c64>,
    pub h_b: Mat<c64>,
    /// Region-local, interior first.
    pub g: Vec<Complex64>,
    pub eps: Vec<Complex64>,
    /// Relative residual of the identity.
    pub residual: f64,
    /// Largest decomposition residual over the edges used.
    pub decomposition_residual: f64,
}

/// Assembles `H_I`, `H_B` with
/// `([L^k, B^k] - [L^{k-1}, B^{k-1}]) g = H_I ε_I + H_B ε_B`.
pub fn assemble_h(mesh: &TriMesh, region: &Region, new: &ChartFrame, old: &ChartFrame) -> Result<HAssembly> {
    let (ni, nb) = (region.n_interior(), region.n_boundary());
    let h_b_new = region.gather_boundary(&new.sample.h);
    let mut g: Vec<Complex64> = old.solver.solve(&h_b_new)?.into_iter().collect();
    // (L^{k-1})^{-1} B^{k-1} h_B = -(solve), so negate the solve
    for z in g.iter_mut() {
        *z = -*z;
    }
    g.extend(h_b_new.iter().map(|z| -z));
    let eps: Vec<Complex64> = region
        .vertices()
        .map(|v| new.sample.h[v] - old.sample.h[v])
        .collect();
    let mut h = Mat::<c64>::zeros(ni, ni + nb);
    let mut decomposition_residual: f64 = 0.0;
    let mut cache: HashMap<usize, WeightDelta> = HashMap::new();
    for (row, &i) in region.interior().iter().enumerate() {
        for &j in mesh.neighbors(i) {
            let e = mesh.edge_index(i, j).expect("neighbours share an edge");
            let wd = match cache.entry(e) {
                Entry::Occupied(o) => o.into_mut(),
                Entry::Vacant(v) => {
                    let wd = weight_delta(mesh, e, Some(region), &new.sample, &old.sample)?;
                    decomposition_residual = decomposition_residual.max(wd.residual());
                    v.insert(wd)
                }
            };
            let wd = &*wd;
            let li = region.local_index(i).expect("interior vertex");
            let lj = region.local_index(j).ok_or_else(|| SemError::RegionMismatch(format!("neighbour {j} of {i} outside region")))?;
            let gd = g[lj] - g[li];
            for (v, c) in wd.vertex_terms() {
                let col = region.local_index(v).ok_or_else(|| SemError::RegionMismatch(format!("stencil vertex {v} outside region")))?;
                h[(row, col)] += c * gd;
            }
        }
    }
    let lhs_new = new.laplacian.apply(&g);
    let lhs_old = old.laplacian.apply(&g);
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for row in 0..ni {
        let lhs = lhs_new[row] - lhs_old[row];
        let mut rhs = Complex64::new(0.0, 0.0);
        let mut scale = 0.0;
        for col in 0..ni + nb {
            let t = h[(row, col)] * eps[col];
            rhs += t;
            scale += t.norm();
        }
        num = num.max((lhs - rhs).norm());
        den = den.max(lhs.norm()).max(scale);
    }
    let residual = if den == 0.0 { num } else { num / den };
    let h_i = h.subcols(0, ni).to_owned();
    let h_b = h.subcols(ni, nb).to_owned();
    Ok(HAssembly {
        h_i,
        h_b,
        g,
        eps,
        residual,
        decomposition_residual,
    })
}

/// Block sizes of the error vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizes {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

impl BlockSizes {
    pub fn of(partition: &IndexPartition) -> Self {
        Self {
            m1: partition.b1.len(),
            n1: partition.i1.len(),
            m2: partition.b2.len(),
            n2: partition.i2.len(),
        }
    }

    /// `ℓ = n1 + m1 + 2 n2 + 2 m2`.
    pub fn ell(&self) -> usize {
        self.n1 + self.m1 + 2 * self.n2 + 2 * self.m2
    }

    /// Offsets of the six blocks `B1, I1, B2, I2, B2', I2'`.
    pub fn offsets(&self) -> [usize; 7] {
        let s = [self.m1, self.n1, self.m2, self.n2, self.m2, self.n2];
        let mut o = [0; 7];
        for b in 0..6 {
            o[b + 1] = o[b] + s[b];
        }
        o
    }
}

/// Error-transfer matrices of one iteration.
#[derive(Debug, Clone)]
pub struct ErrorTransferBundle {
    pub k: usize,
    pub sizes: BlockSizes,
    pub gamma1: Vec<Complex64>,
    pub gamma2: Vec<Complex64>,
    pub a1: Mat<c64>,
    pub a2: Mat<c64>,
    pub s31: Mat<c64>,
    pub t13: Mat<c64>,
    pub t15: Mat<c64>,
    pub t16: Mat<c64>,
    pub t21: Mat<c64>,
    pub t22: Mat<c64>,
    pub t31: Mat<c64>,
    pub t32: Mat<c64>,
    pub t43: Mat<c64>,
    pub t44: Mat<c64>,
    pub h1: HAssembly,
    pub h2: HAssembly,
    pub h2_prev: HAssembly,
    pub zeta: Vec<Complex64>,
    pub zeta_next: Vec<Complex64>,
    /// `(S^{(k)})^{-1} T^{(k)}`.
    pub curly_t: Mat<c64>,
    /// `‖ζ^{(k+1)} - 𝒯 ζ^{(k)}‖ / ‖ζ^{(k+1)}‖`.
    pub recursion_residual: f64,
}

fn selection(rows: &[usize], cols: &[usize]) -> Result<Vec<usize>> {
    let pos: HashMap<usize, usize> = cols.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    rows.iter()
        .map(|v| {
            pos.get(v)
                .copied()
                .ok_or_else(|| SemError::DimensionMismatch(format!("boundary vertex {v} is not interior to the other chart")))
        })
        .collect()
}

fn gamma(a: &[Complex64], b: &[Complex64], offset: usize) -> Result<Vec<Complex64>> {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(idx, (x, y))| {
            let p = x * y;
            if p.norm() < GAMMA_FLOOR {
                Err(SemError::SingularGamma { index: offset + idx, value: p.norm() })
            } else {
                Ok(p.inv())
            }
        })
        .collect()
}

/// `-diag(γ) P M` where `P` picks the rows `sel` of `M`.
fn neg_gamma_select(gamma: &[Complex64], sel: &[usize], m: &Mat<c64>) -> Mat<c64> {
    Mat::from_fn(sel.len(), m.ncols(), |r, c| -gamma[r] * m[(sel[r], c)])
}

fn conj_mat(m: &Mat<c64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)].conj())
}

fn mat_vec(m: &Mat<c64>, x: &[Complex64]) -> Vec<Complex64> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)] * x[c]).sum()).collect()
}

fn norm2(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Frames of both charts at every recorded iteration.
pub struct DiagnosticRun<'m> {
    mesh: &'m TriMesh,
    partition: IndexPartition,
    regions: [Region; 2],
    frames: Vec<[ChartFrame; 2]>,
}

impl<'m> DiagnosticRun<'m> {
    /// `snapshots` must be consecutive iterates starting anywhere.
    pub fn new(mesh: &'m TriMesh, partition: &IndexPartition, snapshots: &[Snapshot], kind: SolverKind) -> Result<Self> {
        let regions = [
            Region::new(mesh, Some(Chart::South), partition.i1.clone(), partition.b1.clone())?,
            Region::new(mesh, Some(Chart::North), partition.i2.clone(), partition.b2.clone())?,
        ];
        for w in snapshots.windows(2) {
            if w[1].k != w[0].k + 1 {
                return Err(SemError::DimensionMismatch(format!("snapshots {} and {} are not consecutive", w[0].k, w[1].k)));
            }
        }
        let frames = snapshots
            .iter()
            .map(|s| {
                Ok([
                    ChartFrame::new(mesh, &regions[0], s.k, ChartSample::new(Chart::South, s.h1.clone()), kind)?,
                    ChartFrame::new(mesh, &regions[1], s.k, ChartSample::new(Chart::North, s.h2.clone()), kind)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mesh,
            partition: partition.clone(),
            regions,
            frames,
        })
    }

    pub fn first_k(&self) -> Option<usize> {
        self.frames.first().map(|f| f[0].k)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn frame(&self, k: usize, chart: Chart) -> Result<&ChartFrame> {
        let first = self.first_k().ok_or_else(|| SemError::DimensionMismatch("no snapshots".into()))?;
        k.checked_sub(first)
            .and_then(|i| self.frames.get(i))
            .map(|f| &f[chart.index()])
            .ok_or_else(|| SemError::DimensionMismatch(format!("iteration {k} was not recorded")))
    }

    /// H identity for `chart` between iterations `k - 1` and `k`.
    pub fn h_assembly(&self, k: usize, chart: Chart) -> Result<HAssembly> {
        let prev = k.checked_sub(1).ok_or_else(|| SemError::DimensionMismatch("iteration 0 has no predecessor".into()))?;
        assemble_h(self.mesh, &self.regions[chart.index()], self.frame(k, chart)?, self.frame(prev, chart)?)
    }

    /// Iterations `k` for which [`Self::build_transfer`] has all inputs.
    pub fn transfer_range(&self) -> std::ops::Range<usize> {
        match self.first_k() {
            Some(first) if self.len() >= 4 => first + 2..first + self.len() - 1,
            _ => 0..0,
        }
    }

    /// Transfer matrices of iteration `k`, using iterates `k-2 ..= k+1`.
    pub fn build_transfer(&self, k: usize) -> Result<ErrorTransferBundle> {
        if k < 2 {
            return Err(SemError::DimensionMismatch("transfer matrices need k >= 2".into()));
        }
        let p = &self.partition;
        let sizes = BlockSizes::of(p);
        let sel2 = selection(&p.b1, &p.i2)?;
        let sel1 = selection(&p.b2, &p.i1)?;
        let (s, n) = (Chart::South, Chart::North);
        let f1_k = self.frame(k, s)?;
        let f1_next = self.frame(k + 1, s)?;
        let f2_k = self.frame(k, n)?;
        let f2_prev = self.frame(k - 1, n)?;

        let interior = |fr: &ChartFrame, chart: Chart| self.regions[chart.index()].gather_interior(&fr.sample.h);
        let pick = |x: &[Complex64], sel: &[usize]| sel.iter().map(|&i| x[i]).collect::<Vec<_>>();
        let gamma2 = gamma(&pick(&interior(f2_prev, n), &sel2), &pick(&interior(f2_k, n), &sel2), 0)?;
        let gamma1 = gamma(&pick(&interior(f1_k, s), &sel1), &pick(&interior(f1_next, s), &sel1), 0)?;
        let gamma1_conj: Vec<Complex64> = gamma1.iter().map(|z| z.conj()).collect();

        let h1 = self.h_assembly(k, s)?;
        let h2 = self.h_assembly(k, n)?;
        let h2_prev = self.h_assembly(k - 1, n)?;

        let a1 = f1_k.transfer()?;
        let a2 = f2_k.transfer()?;
        let a2_prev = f2_prev.transfer()?;

        let t13 = neg_gamma_select(&gamma2, &sel2, &a2_prev);
        let t15 = neg_gamma_select(&gamma2, &sel2, &f2_prev.solve_dense(&h2_prev.h_b)?);
        let t16 = neg_gamma_select(&gamma2, &sel2, &f2_prev.solve_dense(&h2_prev.h_i)?);
        let t21 = f1_k.solve_dense(&conj_mat(&h1.h_b))?;
        let t22 = f1_k.solve_dense(&conj_mat(&h1.h_i))?;
        let t31 = neg_gamma_select(&gamma1_conj, &sel1, &t21);
        let t32 = neg_gamma_select(&gamma1_conj, &sel1, &t22);
        let s31 = neg_gamma_select(&gamma1_conj, &sel1, &a1);
        let t43 = f2_k.solve_dense(&h2.h_b)?;
        let t44 = f2_k.solve_dense(&h2.h_i)?;

        let o = sizes.offsets();
        let ell = sizes.ell();
        let mut t = Mat::<c64>::zeros(ell, ell);
        let mut put = |rb: usize, cb: usize, m: &Mat<c64>| {
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    t[(o[rb] + r, o[cb] + c)] = m[(r, c)];
                }
            }
        };
        put(0, 2, &t13);
        put(0, 4, &t15);
        put(0, 5, &t16);
        put(1, 0, &t21);
        put(1, 1, &t22);
        put(2, 0, &t31);
        put(2, 1, &t32);
        put(3, 2, &t43);
        put(3, 3, &t44);
        put(4, 2, &Mat::identity(sizes.m2, sizes.m2));
        put(5, 3, &Mat::identity(sizes.n2, sizes.n2));

        let curly_t = unit_lower_solve(&sizes, &a1, &s31, &a2, &t);

        let zeta = self.zeta(k)?;
        let zeta_next = self.zeta(k + 1)?;
        let pred = mat_vec(&curly_t, &zeta);
        let diff: Vec<Complex64> = pred.iter().zip(&zeta_next).map(|(a, b)| a - b).collect();
        let scale = norm2(&zeta_next);
        let recursion_residual = if scale == 0.0 { norm2(&diff) } else { norm2(&diff) / scale };

        Ok(ErrorTransferBundle {
            k,
            sizes,
            gamma1,
            gamma2,
            a1,
            a2,
            s31,
            t13,
            t15,
            t16,
            t21,
            t22,
            t31,
            t32,
            t43,
            t44,
            h1,
            h2,
            h2_prev,
            zeta,
            zeta_next,
            curly_t,
            recursion_residual,
        })
    }

    /// `ζ^{(k)} = [conj ε_B1; conj ε_I1; ε_B2; ε_I2; ε_B2^{(k-1)}; ε_I2^{(k-1)}]`.
    pub fn zeta(&self, k: usize) -> Result<Vec<Complex64>> {
        if k < 2 {
            return Err(SemError::DimensionMismatch("ζ needs k >= 2".into()));
        }
        let p = &self.partition;
        let diff = |chart: Chart, k: usize, idx: &[usize]| -> Result<Vec<Complex64>> {
            let (a, b) = (self.frame(k, chart)?, self.frame(k - 1, chart)?);
            Ok(idx.iter().map(|&v| a.sample.h[v] - b.sample.h[v]).collect())
        };
        let mut z = Vec::with_capacity(BlockSizes::of(p).ell());
        z.extend(diff(Chart::South, k, &p.b1)?.into_iter().map(|x| x.conj()));
        z.extend(diff(Chart::South, k, &p.i1)?.into_iter().map(|x| x.conj()));
        z.extend(diff(Chart::North, k, &p.b2)?);
        z.extend(diff(Chart::North, k, &p.i2)?);
        z.extend(diff(Chart::North, k - 1, &p.b2)?);
        z.extend(diff(Chart::North, k - 1, &p.i2)?);
        Ok(z)
    }
}

/// `S^{-1} T` by block forward substitution; `S` is unit lower triangular
/// with blocks `-Â1` at (2,1), `-S31` at (3,1) and `-Â2` at (4,3).
fn unit_lower_solve(sizes: &BlockSizes, a1: &Mat<c64>, s31: &Mat<c64>, a2: &Mat<c64>, t: &Mat<c64>) -> Mat<c64> {
    let o = sizes.offsets();
    let ell = sizes.ell();
    let mut x = t.clone();
    let block = |x: &Mat<c64>, b: usize| x.subrows(o[b], o[b + 1] - o[b]).to_owned();
    let x1 = block(&x, 0);
    let add = |x: &mut Mat<c64>, b: usize, m: &Mat<c64>, src: &Mat<c64>| {
        let prod = m * src;
        for c in 0..ell {
            for r in 0..prod.nrows() {
                x[(o[b] + r, c)] += prod[(r, c)];
            }
        }
    };
    add(&mut x, 1, a1, &x1);
    add(&mut x, 2, s31, &x1);
    let x3 = block(&x, 2);
    add(&mut x, 3, a2, &x3);
    x
}

/// One point of the spectral track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub k: usize,
    pub max_abs: f64,
    pub spectral_radius: f64,
}

/// Accumulates `𝒯^{(k)} ··· 𝒯^{(k0)}` one bundle at a time.
#[derive(Debug, Clone, Default)]
pub struct SpectralTracker {
    product: Option<Mat<c64>>,
}

impl SpectralTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiplies in `bundle` and returns the largest entry and spectral
    /// radius of the updated product.
    pub fn push(&mut self, bundle: &ErrorTransferBundle) -> Result<SpectralPoint> {
        let next = match &self.product {
            None => bundle.curly_t.clone(),
            Some(p) => {
                if p.nrows() != bundle.curly_t.ncols() {
                    return Err(SemError::DimensionMismatch(format!(
                        "transfer matrix of size {} after {}",
                        bundle.curly_t.nrows(),
                        p.nrows()
                    )));
                }
                &bundle.curly_t * p
            }
        };
        let max_abs = (0..next.ncols())
            .flat_map(|c| (0..next.nrows()).map(move |r| (r, c)))
            .map(|(r, c)| next[(r, c)].norm())
            .fold(0.0, f64::max);
        let eig = next.eigenvalues().map_err(|e| SemError::EigenFailure(format!("{e:?}")))?;
        let spectral_radius = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
        self.product = Some(next);
        Ok(SpectralPoint {
            k: bundle.k,
            max_abs,
            spectral_radius,
        })
    }
}

/// Largest entry and spectral radius of `𝒯^{(k)} ··· 𝒯^{(k0)}` for each
/// bundle in order.
pub fn spectral_track(bundles: &[ErrorTransferBundle]) -> Result<Vec<SpectralPoint>> {
    let mut tracker = SpectralTracker::new();
    bundles.iter().map(|b| tracker.push(b)).collect()
}

/// Per-iteration `‖h* - h^{(k)}‖_∞^{1/k}` on the `B2` and `I2` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub k: Vec<usize>,
    pub b2: Vec<f64>,
    pub i2: Vec<f64>,
    /// Both differences are exactly zero.
    pub exact: Vec<bool>,
}

impl RateSeries {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

fn kth_root(x: f64, k: usize) -> f64 {
    if x == 0.0 {
        0.0
    } else if k == 0 {
        x
    } else {
        (x.ln() / k as f64).exp()
    }
}

/// R-linear rate estimates of `history` against `h_star` over the index
/// sets `b` and `i`.
pub fn r_linear_estimate(history: &[(usize, &[Complex64])], h_star: &[Complex64], b: &[usize], i: &[usize]) -> RateSeries {
    let sup = |h: &[Complex64], idx: &[usize]| idx.iter().map(|&v| (h_star[v] - h[v]).norm()).fold(0.0, f64::max);
    let mut out = RateSeries {
        k: Vec::new(),
        b2: Vec::new(),
        i2: Vec::new(),
        exact: Vec::new(),
    };
    for &(k, h) in history {
        let (eb, ei) = (sup(h, b), sup(h, i));
        out.k.push(k);
        out.b2.push(kth_root(eb, k));
        out.i2.push(kth_root(ei, k));
        out.exact.push(eb == 0.0 && ei == 0.0);
    }
    out
}

/// Residuals of the three identities at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub k: usize,
    pub decomposition: f64,
    pub h_identity: f64,
    pub recursion: Option<f64>,
}

/// Acceptance thresholds of the three identity checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub decomposition: f64,
    pub h_identity: f64,
    pub recursion: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            decomposition: 1e-10,
            h_identity: 1e-9,
            recursion: 1e-8,
        }
    }
}

/// Outcome of [`run_diagnostics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub iterations: usize,
    pub sizes: BlockSizes,
    pub residuals: Vec<ResidualPoint>,
    pub spectral: Vec<SpectralPoint>,
    pub rates: RateSeries,
    pub max_decomposition: f64,
    pub max_h_identity: f64,
    pub max_recursion: f64,
    pub thresholds: Thresholds,
}

impl DiagnosticSummary {
    pub fn decomposition_ok(&self) -> bool {
        self.max_decomposition <= self.thresholds.decomposition
    }

    pub fn h_identity_ok(&self) -> bool {
        self.max_h_identity <= self.thresholds.h_identity
    }

    pub fn recursion_ok(&self) -> bool {
        self.max_recursion <= self.thresholds.recursion
    }

    pub fn passed(&self) -> bool {
        self.decomposition_ok() && self.h_identity_ok() && self.recursion_ok()
    }
}

/// Runs `iterations` SEM iterations from `f0` with every iterate recorded,
/// then checks the three identities, tracks the transfer product and
/// estimates rates over the last `window` iterates against the final one.
/// The mesh is rescaled to area `4π` internally.
pub fn run_diagnostics(mesh: &TriMesh, f0: Vec<Point3>, config: &SemConfig, iterations: usize, window: usize) -> Result<DiagnosticSummary> {
    let mesh = mesh.normalized();
    let cfg = SemConfig {
        record_snapshots: true,
        ..config.clone()
    };
    let mut sem = SemSolver::new(&mesh, f0, cfg)?;
    for _ in 0..iterations {
        sem.iterate()?;
    }
    let partition = sem.state().partition.clone();
    let snapshots = sem.snapshots();
    let run = DiagnosticRun::new(&mesh, &partition, snapshots, config.solver)?;
    let mut residuals = Vec::with_capacity(iterations);
    let mut spectral = Vec::new();
    let mut tracker = SpectralTracker::new();
    let transfer = run.transfer_range();
    for k in 1..=iterations {
        let (recursion, decomposition, h_identity) = if transfer.contains(&k) {
            let b = run.build_transfer(k)?;
            spectral.push(tracker.push(&b)?);
            log::debug!("k = {k}: recursion residual {:.3e}", b.recursion_residual);
            let hs = [&b.h1, &b.h2];
            (
                Some(b.recursion_residual),
                hs.iter().map(|h| h.decomposition_residual).fold(0.0, f64::max),
                hs.iter().map(|h| h.residual).fold(0.0, f64::max),
            )
        } else {
            let hs = [run.h_assembly(k, Chart::South)?, run.h_assembly(k, Chart::North)?];
            (
                None,
                hs.iter().map(|h| h.decomposition_residual).fold(0.0, f64::max),
                hs.iter().map(|h| h.residual).fold(0.0, f64::max),
            )
        };
        residuals.push(ResidualPoint {
            k,
            decomposition,
            h_identity,
            recursion,
        });
    }
    let h_star = &sem.state().h2;
    let tail = &snapshots[snapshots.len().saturating_sub(window)..];
    let history: Vec<(usize, &[Complex64])> = tail.iter().map(|s| (s.k, s.h2.as_slice())).collect();
    let rates = r_linear_estimate(&history, h_star, &partition.b2, &partition.i2);
    let max = |f: fn(&ResidualPoint) -> f64| residuals.iter().map(f).fold(0.0, f64::max);
    Ok(DiagnosticSummary {
        iterations,
        sizes: BlockSizes::of(&partition),
        max_decomposition: max(|r| r.decomposition),
        max_h_identity: max(|r| r.h_identity),
        max_recursion: max(|r| r.recursion.unwrap_or(0.0)),
        residuals,
        spectral,
        rates,
        thresholds: Thresholds::default(),
    })
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let err = |e| SemError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
    writeln!(w, "{header}").map_err(err)?;
    for row in rows {
        writeln!(w, "{row}").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn write_spectral_csv(path: &Path, points: &[SpectralPoint]) -> Result<()> {
    write_rows(
        path,
        "k,max_abs,spectral_radius",
        points.iter().map(|p| format!("{},{:.17e},{:.17e}", p.k, p.max_abs, p.spectral_radius)),
    )
}

pub fn write_rates_csv(path: &Path, rates: &RateSeries) -> Result<()> {
    write_rows(
        path,
        "k,rate_b2,rate_i2",
        (0..rates.len()).map(|n| format!("{},{:.17e},{:.17e}", rates.k[n], rates.b2[n], rates.i2[n])),
    )
}

pub fn write_residuals_csv(path: &Path, points: &[ResidualPoint]) -> Result<()> {
    write_rows(
        path,
        "k,residual_decomposition,residual_h,residual_recursion",
        points.iter().map(|p| {
            let rec = p.recursion.map_or(String::new(), |r| format!("{r:.17e}"));
            format!("{},{:.17e},{:.17e},{rec}", p.k, p.decomposition, p.h_identity)
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{conformal_initialize, ConformalConfig};
    use crate::synth;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_mesh() -> (TriMesh, ChartSample) {
        let mesh = TriMesh::new(synth::ellipsoid(2, [1.0, 1.0, 1.5])).unwrap().normalized();
        let f0 = conformal_initialize(&mesh, &ConformalConfig::default()).unwrap().f0;
        let h = f0.iter().map(|p| Chart::South.project(p).unwrap()).collect();
        (mesh, ChartSample::new(Chart::South, h))
    }

    fn perturbed(base: &ChartSample, amp: f64, rng: &mut ChaCha8Rng) -> ChartSample {
        let h = base
            .h
            .iter()
            .map(|z| z + Complex64::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
            .collect();
        ChartSample::new(base.chart, h)
    }

    #[test]
    fn identical_samples_give_zero_delta() {
        let (mesh, s) = sample_mesh();
        for e in 0..mesh.num_edges() {
            let wd = weight_delta(&mesh, e, None, &s, &s).unwrap();
            assert_eq!(wd.w_new, wd.w_old);
            assert_eq!(wd.predicted(), Complex64::new(0.0, 0.0));
            assert_eq!(wd.psi, [0.0; 4]);
        }
    }

    #[test]
    fn single_vertex_move_matches_decomposition() {
        let (mesh, s) = sample_mesh();
        let mut h = s.h.clone();
        h[5] += Complex64::new(1e-3, -4e-4);
        let moved = ChartSample::new(Chart::South, h);
        for &e in mesh.vertex_faces(5).iter().flat_map(|&f| mesh.face_edges(f).to_vec()).collect::<Vec<_>>().iter() {
            let wd = weight_delta(&mesh, e, None, &moved, &s).unwrap();
            assert!(wd.residual() <= 1e-10, "edge {e}: {}", wd.residual());
        }
    }

    #[test]
    fn d_factor_matches_chord_length() {
        let (a, b) = (Complex64::new(0.3, 0.7), Complex64::new(-1.2, 0.4));
        let (_, d) = d_factor(a, b);
        let chord = (Chart::South.lift(a) - Chart::South.lift(b)).norm();
        assert!((d * (a - b) - chord).norm() < 1e-14);
    }

    #[test]
    fn h_identity_on_random_pair() {
        let (mesh, s) = sample_mesh();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let region = Region::new(
            &mesh,
            Some(Chart::South),
            (0..mesh.num_vertices()).filter(|&v| s.h[v].norm() < 1.1).collect(),
            {
                let inside: Vec<bool> = s.h.iter().map(|z| z.norm() < 1.1).collect();
                (0..mesh.num_vertices()).filter(|&v| !inside[v] && mesh.neighbors(v).iter().any(|&u| inside[u])).collect()
            },
        )
        .unwrap();
        let old = ChartFrame::new(&mesh, &region, 0, s.clone(), SolverKind::Direct).unwrap();
        let new = ChartFrame::new(&mesh, &region, 1, perturbed(&s, 1e-3, &mut rng), SolverKind::Direct).unwrap();
        let h = assemble_h(&mesh, &region, &new, &old).unwrap();
        assert!(h.residual <= 1e-9, "{}", h.residual);
        assert!(h.decomposition_residual <= 1e-10);
        let same = assemble_h(&mesh, &region, &old, &old).unwrap();
        assert!(same.eps.iter().all(|z| z.norm() == 0.0));
        assert_eq!(same.residual, 0.0);
    }

    #[test]
    fn geometric_sequence_rate() {
        let h_star = vec![Complex64::new(0.2, 0.1); 4];
        let u = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.5), Complex64::new(0.3, 0.0), Complex64::new(-0.6, 0.8)];
        let hist: Vec<(usize, Vec<Complex64>)> =
            (1..=200).map(|k| (k, h_star.iter().zip(&u).map(|(a, b)| a + b * 0.9f64.powi(k as i32)).collect())).collect();
        let view: Vec<(usize, &[Complex64])> = hist.iter().map(|(k, h)| (*k, h.as_slice())).collect();
        let r = r_linear_estimate(&view, &h_star, &[0, 1], &[2, 3]);
        assert!((r.b2[199] - 0.9).abs() <= 1e-3);
        assert!((r.i2[199] - 0.9).abs() <= 1e-3);
        assert!(!r.exact[199]);
    }

    #[test]
    fn constant_history_is_exact() {
        let h = vec![Complex64::new(0.5, 0.5); 3];
        let r = r_linear_estimate(&[(1, &h), (2, &h)], &h, &[0], &[1, 2]);
        assert!(r.exact.iter().all(|&e| e));
        assert!(r.b2.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kth_root_is_stable_for_tiny_values() {
        assert!((kth_root(1e-300, 300) - 0.1).abs() < 1e-12);
        assert_eq!(kth_root(0.0, 5), 0.0);
    }

    #[test]
    fn single_bundle_track_is_its_own_radius() {
        let sizes = BlockSizes { m1: 1, n1: 1, m2: 1, n2: 1 };
        let z = Mat::<c64>::zeros(1, 1);
        let h = HAssembly {
            h_i: z.clone(),
            h_b: z.clone(),
            g: vec![],
            eps: vec![],
            residual: 0.0,
            decomposition_residual: 0.0,
        };
        let curly_t = Mat::from_fn(6, 6, |r, c| if r == c { c64::new(0.5 * (r + 1) as f64 / 6.0, 0.0) } else { c64::new(0.0, 0.0) });
        let b = ErrorTransferBundle {
            k: 2,
            sizes,
            gamma1: vec![],
            gamma2: vec![],
            a1: z.clone(),
            a2: z.clone(),
            s31: z.clone(),
            t13: z.clone(),
            t15: z.clone(),
            t16: z.clone(),
            t21: z.clone(),
            t22: z.clone(),
            t31: z.clone(),
            t32: z.clone(),
            t43: z.clone(),
            t44: z.clone(),
            h1: h.clone(),
            h2: h.clone(),
            h2_prev: h,
            zeta: vec![],
            zeta_next: vec![],
            curly_t,
            recursion_residual: 0.0,
        };
        let track = spectral_track(std::slice::from_ref(&b)).unwrap();
        assert!((track[0].spectral_radius - 0.5).abs() < 1e-12);
        assert!((track[0].max_abs - 0.5).abs() < 1e-12);
        let track2 = spectral_track(&[b.clone(), b]).unwrap();
        assert!((track2[1].spectral_radius - 0.25).abs() < 1e-12);
    }

    #[test]
    fn recursion_holds_on_a_short_run() {
        let mesh = TriMesh::new(synth::ellipsoid(2, [1.0, 1.0, 1.5])).unwrap().normalized();
        let f0 = conformal_initialize(&mesh, &ConformalConfig::default()).unwrap().f0;
        let cfg = SemConfig {
            record_snapshots: true,
            ..SemConfig::default()
        };
        let mut sem = SemSolver::new(&mesh, f0, cfg).unwrap();
        for _ in 0..7 {
            sem.iterate().unwrap();
        }
        let run = DiagnosticRun::new(&mesh, &sem.state().partition, sem.snapshots(), SolverKind::Direct).unwrap();
        assert_eq!(run.transfer_range(), 2..7);
        for k in run.transfer_range() {
            let b = run.build_transfer(k).unwrap();
            assert_eq!(b.zeta.len(), b.sizes.ell());
            assert!(b.recursion_residual <= 1e-8, "k = {k}: {}", b.recursion_residual);
            assert!(b.h1.residual <= 1e-9 && b.h2.residual <= 1e-9);
        }
    }

    #[test]
    fn driver_reports_all_identities() {
        let mesh = TriMesh::new(synth::ellipsoid(2, [1.0, 1.0, 1.5])).unwrap();
        let f0 = conformal_initialize(&mesh.normalized(), &ConformalConfig::default()).unwrap().f0;
        let summary = run_diagnostics(&mesh, f0, &SemConfig::default(), 8, 5).unwrap();
        assert_eq!(summary.residuals.len(), 8);
        assert_eq!(summary.spectral.iter().map(|p| p.k).collect::<Vec<_>>(), (2..8).collect::<Vec<_>>());
        assert_eq!(summary.rates.k, vec![4, 5, 6, 7, 8]);
        assert!(summary.rates.exact[4]);
        assert!(summary.passed(), "{:?}", (summary.max_decomposition, summary.max_h_identity, summary.max_recursion));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decomposition_holds_for_random_perturbations(seed in any::<u64>(), amp in 1e-6f64..1e-2) {
            let (mesh, s) = sample_mesh();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = perturbed(&s, amp, &mut rng);
            let b = perturbed(&s, amp, &mut rng);
            let e = rng.random_range(0..mesh.num_edges());
            let wd = weight_delta(&mesh, e, None, &a, &b).unwrap();
            prop_assert!(wd.residual() <= 1e-10);
        }
    }
}
