//! Dirichlet solves `L_II h_I = -L_IB h_B` for complex boundary data over a
//! real sparse matrix.

use faer::linalg::solvers::Solve;
use faer::prelude::*;
use faer::sparse::linalg::LuError;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SparseColMatRef};
use faer::{Mat, MatRef};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::laplacian::StretchLaplacian;

/// Relative residual required of every solve.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Condition estimates above this are logged.
pub const ILL_CONDITIONED: f64 = 1e12;
const REFINEMENT_STEPS: usize = 2;
const MINRES_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Sparse LU with partial pivoting.
    #[default]
    Direct,
    /// Unpreconditioned MINRES.
    Minres,
}

/// The two blocks of a Dirichlet problem and its boundary values.
#[derive(Debug, Clone, Copy)]
pub struct PartitionedSystem<'a> {
    pub l_ii: SparseColMatRef<'a, usize, f64>,
    pub l_ib: SparseColMatRef<'a, usize, f64>,
    pub h_b: &'a [Complex64],
}

impl<'a> PartitionedSystem<'a> {
    pub fn new(laplacian: &'a StretchLaplacian, h_b: &'a [Complex64]) -> Self {
        Self {
            l_ii: laplacian.interior_block(),
            l_ib: laplacian.boundary_block(),
            h_b,
        }
    }
}

/// A factorized (or MINRES-backed) interior block.
#[derive(Debug, Clone)]
pub struct InteriorSolver {
    kind: SolverKind,
    l_ii: SparseColMat<usize, f64>,
    l_ib: SparseColMat<usize, f64>,
    lu: Option<Lu<usize, f64>>,
    symbolic: Option<SymbolicLu<usize>>,
    condition: Option<f64>,
}

fn lu_error(e: LuError, n: usize) -> SemError {
    match e {
        LuError::SymbolicSingular { index } => SemError::SingularSystem { pivot: index },
        LuError::Generic(_) => SemError::SingularSystem { pivot: n },
    }
}

fn owned(m: SparseColMatRef<'_, usize, f64>) -> SparseColMat<usize, f64> {
    SparseColMat::new(m.symbolic().to_owned().expect("allocation"), m.val().to_vec())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `y = A x` for a real sparse matrix and real vector.
fn spmv_real(a: SparseColMatRef<'_, usize, f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        for (&i, &v) in a.row_idx_of_col_raw(j).iter().zip(a.val_of_col(j)) {
            y[i] += v * xj;
        }
    }
    y
}

impl InteriorSolver {
    pub fn new(laplacian: &StretchLaplacian, kind: SolverKind) -> Result<Self> {
        Self::from_blocks(laplacian.interior_block(), laplacian.boundary_block(), kind, None)
    }

    /// Reuses a symbolic factorization of a matrix with the same pattern.
    pub fn with_symbolic(laplacian: &StretchLaplacian, kind: SolverKind, symbolic: Option<SymbolicLu<usize>>) -> Result<Self> {
        Self::from_blocks(laplacian.interior_block(), laplacian.boundary_block(), kind, symbolic)
    }

    pub fn from_blocks(
        l_ii: SparseColMatRef<'_, usize, f64>,
        l_ib: SparseColMatRef<'_, usize, f64>,
        kind: SolverKind,
        symbolic: Option<SymbolicLu<usize>>,
    ) -> Result<Self> {
        let n = l_ii.nrows();
        if l_ii.ncols() != n || l_ib.nrows() != n {
            return Err(SemError::RegionMismatch(format!(
                "L_II is {}x{} but L_IB has {} rows",
                n,
                l_ii.ncols(),
                l_ib.nrows()
            )));
        }
        let mut solver = Self {
            kind,
            l_ii: owned(l_ii),
            l_ib: owned(l_ib),
            lu: None,
            symbolic: None,
            condition: None,
        };
        if kind == SolverKind::Direct && n > 0 {
            let symbolic = match symbolic {
                Some(s) => s,
                None => SymbolicLu::try_new(l_ii.symbolic()).map_err(|_| SemError::SingularSystem { pivot: 0 })?,
            };
            let lu = Lu::try_new_with_symbolic(symbolic.clone(), l_ii).map_err(|e| lu_error(e, n))?;
            solver.lu = Some(lu);
            solver.symbolic = Some(symbolic);
            let cond = solver.condition_estimate()?;
            if !cond.is_finite() {
                return Err(SemError::SingularSystem { pivot: n });
            }
            if cond > ILL_CONDITIONED {
                log::warn!("interior system is ill-conditioned (1-norm condition estimate {cond:.3e})");
            }
            solver.condition = Some(cond);
        }
        Ok(solver)
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    pub fn n_interior(&self) -> usize {
        self.l_ii.nrows()
    }

    pub fn n_boundary(&self) -> usize {
        self.l_ib.ncols()
    }

    pub fn symbolic(&self) -> Option<SymbolicLu<usize>> {
        self.symbolic.clone()
    }

    /// 1-norm condition estimate of `L_II` (direct solver only).
    pub fn condition(&self) -> Option<f64> {
        self.condition
    }

    fn raw_solve(&self, rhs: Mat<f64>) -> Result<Mat<f64>> {
        match (&self.lu, self.kind) {
            (Some(lu), _) => {
                let mut x = rhs;
                lu.solve_in_place(x.as_mut());
                if let Some(i) = (0..x.ncols()).flat_map(|c| (0..x.nrows()).map(move |r| (r, c))).find(|&(r, c)| !x[(r, c)].is_finite()) {
                    return Err(SemError::SingularSystem { pivot: i.0 });
                }
                Ok(x)
            }
            (None, SolverKind::Minres) => {
                let mut x = Mat::zeros(rhs.nrows(), rhs.ncols());
                for c in 0..rhs.ncols() {
                    let b: Vec<f64> = (0..rhs.nrows()).map(|r| rhs[(r, c)]).collect();
                    let sol = minres(self.l_ii.as_ref(), &b, MINRES_TOL, 10 * b.len().max(1))?;
                    for (r, v) in sol.into_iter().enumerate() {
                        x[(r, c)] = v;
                    }
                }
                Ok(x)
            }
            (None, SolverKind::Direct) => Ok(rhs),
        }
    }

    /// `L_II^{-1} B` for real right-hand sides, with up to two steps of
    /// iterative refinement per column.
    pub fn solve_real(&self, rhs: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let n = self.n_interior();
        if rhs.nrows() != n {
            return Err(SemError::RegionMismatch(format!("right-hand side has {} rows, expected {n}", rhs.nrows())));
        }
        let mut x = self.raw_solve(rhs.to_owned())?;
        for step in 0..=REFINEMENT_STEPS {
            let mut residual = Mat::<f64>::zeros(n, rhs.ncols());
            let mut worst = 0.0f64;
            for c in 0..rhs.ncols() {
                let xc: Vec<f64> = (0..n).map(|r| x[(r, c)]).collect();
                let ax = spmv_real(self.l_ii.as_ref(), &xc);
                let b: Vec<f64> = (0..n).map(|r| rhs[(r, c)]).collect();
                let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
                let scale = max_abs(&b);
                let rel = if scale > 0.0 { max_abs(&r) / scale } else { max_abs(&r) };
                worst = worst.max(rel);
                for (k, v) in r.into_iter().enumerate() {
                    residual[(k, c)] = v;
                }
            }
            if worst <= RESIDUAL_TOL {
                break;
            }
            if step == REFINEMENT_STEPS {
                log::warn!("interior solve residual {worst:.3e} exceeds {RESIDUAL_TOL:e} after refinement");
                break;
            }
            let dx = self.raw_solve(residual)?;
            x += dx;
        }
        Ok(x)
    }

    /// `L_II^{-1} b` for complex `b`; real and imaginary parts share one
    /// factorization.
    pub fn solve_complex(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.n_interior();
        let b = Mat::from_fn(n, 2, |r, c| if c == 0 { rhs[r].re } else { rhs[r].im });
        if rhs.len() != n {
            return Err(SemError::RegionMismatch(format!("right-hand side has length {}, expected {n}", rhs.len())));
        }
        let x = self.solve_real(b.as_ref())?;
        Ok((0..n).map(|r| Complex64::new(x[(r, 0)], x[(r, 1)])).collect())
    }

    /// `L_II^{-1} M` for a dense complex matrix.
    pub fn solve_complex_dense(&self, rhs: MatRef<'_, c64>) -> Result<Mat<c64>> {
        let (n, m) = (rhs.nrows(), rhs.ncols());
        let b = Mat::from_fn(n, 2 * m, |r, c| if c < m { rhs[(r, c)].re } else { rhs[(r, c - m)].im });
        let x = self.solve_real(b.as_ref())?;
        Ok(Mat::from_fn(n, m, |r, c| c64::new(x[(r, c)], x[(r, c + m)])))
    }

    /// `h_I = -L_II^{-1} L_IB h_B`.
    pub fn solve(&self, h_b: &[Complex64]) -> Result<Vec<Complex64>> {
        if h_b.len() != self.n_boundary() {
            return Err(SemError::RegionMismatch(format!(
                "{} boundary values for {} boundary vertices",
                h_b.len(),
                self.n_boundary()
            )));
        }
        let rhs: Vec<Complex64> = crate::laplacian::spmv(self.l_ib.as_ref(), h_b).into_iter().map(|z| -z).collect();
        self.solve_complex(&rhs)
    }

    /// Dense `Â = -L_II^{-1} L_IB` (`n_I x n_B`).
    pub fn transfer_matrix(&self) -> Result<Mat<f64>> {
        let ib = self.l_ib.to_dense();
        let rhs = Mat::from_fn(ib.nrows(), ib.ncols(), |r, c| -ib[(r, c)]);
        self.solve_real(rhs.as_ref())
    }

    /// Hager's estimate of `‖L_II‖₁ ‖L_II^{-1}‖₁`; uses symmetry of `L_II`.
    fn condition_estimate(&self) -> Result<f64> {
        let n = self.n_interior();
        let a = self.l_ii.as_ref();
        let norm_a = (0..n).map(|j| a.val_of_col(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let solve = |v: &[f64]| -> Result<Vec<f64>> {
            let x = self.raw_solve(Mat::from_fn(n, 1, |r, _| v[r]))?;
            Ok((0..n).map(|r| x[(r, 0)]).collect())
        };
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = solve(&x)?;
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = solve(&xi)?;
            let (j, zmax) = z.iter().enumerate().fold((0, 0.0f64), |acc, (k, v)| if v.abs() > acc.1 { (k, v.abs()) } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[j] = 1.0;
        }
        Ok(norm_a * est)
    }
}

/// One-shot `h_I = -L_II^{-1} L_IB h_B`.
pub fn solve_interior(sys: &PartitionedSystem<'_>, kind: SolverKind) -> Result<Vec<Complex64>> {
    InteriorSolver::from_blocks(sys.l_ii, sys.l_ib, kind, None)?.solve(sys.h_b)
}

/// Dense `Â = -L_II^{-1} L_IB`.
pub fn apply_transfer(sys: &PartitionedSystem<'_>, kind: SolverKind) -> Result<Mat<f64>> {
    InteriorSolver::from_blocks(sys.l_ii, sys.l_ib, kind, None)?.transfer_matrix()
}

/// MINRES for a symmetric, possibly indefinite `a`.
pub fn minres(a: SparseColMatRef<'_, usize, f64>, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut x = vec![0.0; n];
    let beta1 = dot(b, b).sqrt();
    if beta1 == 0.0 {
        return Ok(x);
    }
    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    for _ in 0..max_iter {
        let s = 1.0 / beta;
        let v: Vec<f64> = y.iter().map(|t| s * t).collect();
        y = spmv_real(a, &v);
        if oldb != 0.0 {
            let c = beta / oldb;
            for (yi, ri) in y.iter_mut().zip(&r1) {
                *yi -= c * ri;
            }
        }
        let alfa = dot(&v, &y);
        let c = alfa / beta;
        for (yi, ri) in y.iter_mut().zip(&r2) {
            *yi -= c * ri;
        }
        r1 = std::mem::replace(&mut r2, y.clone());
        oldb = beta;
        beta = dot(&r2, &r2).sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let w1 = std::mem::replace(&mut w2, w.clone());
        for k in 0..n {
            w[k] = (v[k] - oldeps * w1[k] - delta * w2[k]) / gamma;
            x[k] += phi * w[k];
        }
        if phibar <= tol * beta1 || beta == 0.0 {
            return Ok(x);
        }
    }
    Err(SemError::NotConverged {
        iterations: max_iter,
        residual: phibar / beta1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian::{assemble_laplacian, Region};
    use crate::mesh::TriMesh;
    use crate::synth;
    use faer::sparse::Triplet;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sparse(n: usize, m: usize, entries: &[(usize, usize, f64)]) -> SparseColMat<usize, f64> {
        let t: Vec<_> = entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(n, m, &t).unwrap()
    }

    #[test]
    fn one_by_one() {
        let ii = sparse(1, 1, &[(0, 0, 4.0)]);
        let ib = sparse(1, 1, &[(0, 0, 2.0)]);
        for kind in [SolverKind::Direct, SolverKind::Minres] {
            let sys = PartitionedSystem {
                l_ii: ii.as_ref(),
                l_ib: ib.as_ref(),
                h_b: &[c(1.0, -3.0)],
            };
            let x = solve_interior(&sys, kind).unwrap();
            assert!((x[0] - c(-0.5, 1.5)).norm() < 1e-15);
        }
    }

    #[test]
    fn three_by_three_matches_dense_oracle() {
        // indefinite symmetric block
        let a = [[2.0, -1.0, 0.5], [-1.0, -3.0, 1.0], [0.5, 1.0, 1.5]];
        let mut e = Vec::new();
        for r in 0..3 {
            for col in 0..3 {
                e.push((r, col, a[r][col]));
            }
        }
        let ii = sparse(3, 3, &e);
        let ib = sparse(3, 2, &[(0, 0, -1.0), (1, 1, 0.5), (2, 0, 0.25), (2, 1, -2.0)]);
        let h_b = [c(1.0, 2.0), c(-0.5, 0.75)];
        let dense_a = Mat::from_fn(3, 3, |r, col| c64::new(a[r][col], 0.0));
        let ibd = ib.to_dense();
        let b = Mat::from_fn(3, 1, |r, _| -(0..2).map(|k| h_b[k] * ibd[(r, k)]).sum::<Complex64>());
        let oracle = dense_a.partial_piv_lu().solve(&b);
        for kind in [SolverKind::Direct, SolverKind::Minres] {
            let sys = PartitionedSystem {
                l_ii: ii.as_ref(),
                l_ib: ib.as_ref(),
                h_b: &h_b,
            };
            let x = solve_interior(&sys, kind).unwrap();
            for r in 0..3 {
                assert!((x[r] - oracle[(r, 0)]).norm() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn singular_block_is_reported() {
        let ii = sparse(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        let ib = sparse(2, 1, &[(0, 0, 1.0)]);
        let err = InteriorSolver::from_blocks(ii.as_ref(), ib.as_ref(), SolverKind::Direct, None).unwrap_err();
        assert!(matches!(err, SemError::SingularSystem { .. }), "{err}");
    }

    fn sphere_region() -> (TriMesh, StretchLaplacian) {
        let mesh = TriMesh::new(synth::icosphere(3)).unwrap();
        let f = mesh.vertices().to_vec();
        let interior: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| f[v].z < 0.0).collect();
        let boundary: Vec<usize> = (0..mesh.num_vertices())
            .filter(|&v| f[v].z >= 0.0 && mesh.neighbors(v).iter().any(|&u| f[u].z < 0.0))
            .collect();
        let region = Region::new(&mesh, None, interior, boundary).unwrap();
        let l = assemble_laplacian(&mesh, &f, &region).unwrap();
        (mesh, l)
    }

    #[test]
    fn constants_are_harmonic() {
        let (_, l) = sphere_region();
        for kind in [SolverKind::Direct, SolverKind::Minres] {
            let s = InteriorSolver::new(&l, kind).unwrap();
            let x = s.solve(&vec![c(0.7, -1.1); l.n_boundary()]).unwrap();
            assert!(x.iter().all(|z| (z - c(0.7, -1.1)).norm() <= 1e-10));
        }
    }

    #[test]
    fn transfer_preserves_constants_and_matches_solve() {
        let (_, l) = sphere_region();
        let s = InteriorSolver::new(&l, SolverKind::Direct).unwrap();
        let a = s.transfer_matrix().unwrap();
        for r in 0..a.nrows() {
            let row: f64 = (0..a.ncols()).map(|k| a[(r, k)]).sum();
            assert!((row - 1.0).abs() <= 1e-10);
        }
        let h_b: Vec<Complex64> = (0..l.n_boundary()).map(|k| Complex64::from_polar(1.0, k as f64)).collect();
        let x = s.solve(&h_b).unwrap();
        for r in 0..a.nrows() {
            let ax: Complex64 = (0..a.ncols()).map(|k| a[(r, k)] * h_b[k]).sum();
            assert!((ax - x[r]).norm() <= 1e-12);
        }
        assert!(s.condition().unwrap() > 1.0);
    }

    #[test]
    fn one_interior_vertex_transfer_row() {
        let mesh = TriMesh::new(synth::icosphere(1)).unwrap();
        let ring = mesh.neighbors(3).to_vec();
        let region = Region::new(&mesh, None, vec![3], ring.clone()).unwrap();
        let l = assemble_laplacian(&mesh, mesh.vertices(), &region).unwrap();
        let a = apply_transfer(&PartitionedSystem::new(&l, &[]), SolverKind::Direct).unwrap();
        let ib = l.boundary_block().to_dense();
        let ii = l.interior_block().to_dense()[(0, 0)];
        let mut sum = 0.0;
        for k in 0..ring.len() {
            assert!((a[(0, k)] - (-ib[(0, k)] / ii)).abs() < 1e-15);
            sum += a[(0, k)];
        }
        assert!((sum - 1.0).abs() < 1e-14);
    }

    #[test]
    fn direct_solve_is_deterministic() {
        let (_, l) = sphere_region();
        let h_b: Vec<Complex64> = (0..l.n_boundary()).map(|k| c(k as f64, 1.0)).collect();
        let a = InteriorSolver::new(&l, SolverKind::Direct).unwrap().solve(&h_b).unwrap();
        let b = InteriorSolver::new(&l, SolverKind::Direct).unwrap().solve(&h_b).unwrap();
        assert_eq!(a, b);
    }
}
