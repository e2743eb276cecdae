//! The stretch energy minimization driver.
//!
//! Each iteration inverts the north chart into the south chart, solves the
//! south Dirichlet problem with the Laplacian from the previous south step,
//! lifts to the sphere and reassembles; then does the same for the north
//! chart. The index sets are fixed by a short warm-up.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

use faer::sparse::linalg::solvers::SymbolicLu;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_initialize, ConformalConfig};
use crate::diagnostics::{r_linear_estimate, RateSeries};
use crate::error::{Result, SemError};
use crate::laplacian::{assemble_laplacian, stretch_energy, stretch_factors, stretch_stats, Region, StretchLaplacian, StretchStats};
use crate::mesh::{Point3, TriMesh};
use crate::solver::{InteriorSolver, SolverKind};
use crate::sphere::{invert_plane, invert_point, Chart, PlanarCoords};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    /// Stop when `|E^(k) - E^(k-1)| <= tol`.
    pub tol: f64,
    /// Index sets are `{ |h| < radius }`.
    pub radius: f64,
    pub max_iter: usize,
    /// Warm-up passes used to fix the index sets.
    pub warmup: usize,
    pub solver: SolverKind,
    /// Consecutive sign-alternating energy changes above `tol` that flag a
    /// quasi-periodic run.
    pub quasi_periodic_window: usize,
    /// Stop when `max |h2^(k) - h2^(k-1)|` over the north region falls to
    /// this.
    pub stagnation_tol: f64,
    /// Number of trailing north-chart iterates kept for rate estimates.
    pub rate_window: usize,
    /// Keep every iterate for diagnostics.
    pub record_snapshots: bool,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            radius: 1.1,
            max_iter: 500,
            warmup: 3,
            solver: SolverKind::Direct,
            quasi_periodic_window: 50,
            stagnation_tol: 1e-13,
            rate_window: 60,
            record_snapshots: false,
        }
    }
}

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(SemError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.radius > 1.0) {
            return Err(SemError::Config(format!("radius must exceed 1, got {}", self.radius)));
        }
        if self.quasi_periodic_window == 0 {
            return Err(SemError::Config("quasi_periodic_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Interior and boundary index sets of both charts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexPartition {
    pub i1: Vec<usize>,
    pub b1: Vec<usize>,
    pub i2: Vec<usize>,
    pub b2: Vec<usize>,
    pub radius: f64,
}

impl IndexPartition {
    pub fn interior(&self, chart: Chart) -> &[usize] {
        match chart {
            Chart::South => &self.i1,
            Chart::North => &self.i2,
        }
    }

    pub fn boundary(&self, chart: Chart) -> &[usize] {
        match chart {
            Chart::South => &self.b1,
            Chart::North => &self.b2,
        }
    }

    /// Hash of the four index lists.
    pub fn fingerprint(&self) -> u64 {
        let mut s = DefaultHasher::new();
        (&self.i1, &self.b1, &self.i2, &self.b2).hash(&mut s);
        s.finish()
    }

    /// Checks disjointness and that every interior neighbour is covered.
    pub fn validate(&self, mesh: &TriMesh) -> Result<()> {
        for chart in Chart::BOTH {
            Region::new(mesh, Some(chart), self.interior(chart).to_vec(), self.boundary(chart).to_vec())?;
        }
        Ok(())
    }
}

/// `I = { |h_i| < r }` and its outer one-ring `B`, both sorted.
pub fn partition_chart(mesh: &TriMesh, h: &[Complex64], radius: f64, chart: Chart) -> Result<(Vec<usize>, Vec<usize>)> {
    let inside: Vec<bool> = h.iter().map(|z| z.norm() < radius).collect();
    let interior: Vec<usize> = (0..h.len()).filter(|&v| inside[v]).collect();
    let boundary: Vec<usize> = (0..h.len())
        .filter(|&v| !inside[v] && mesh.neighbors(v).iter().any(|&u| inside[u]))
        .collect();
    let number = chart.index() + 1;
    if interior.is_empty() {
        return Err(SemError::EmptyInterior { chart: number });
    }
    if boundary.is_empty() {
        return Err(SemError::EmptyBoundary { chart: number });
    }
    Ok((interior, boundary))
}

/// Sphere point of chart coordinate `z`, evaluated through whichever chart
/// keeps the coordinate inside the unit disk.
pub fn lift_from(chart: Chart, z: Complex64) -> Point3 {
    if z.norm() <= 1.0 {
        chart.lift(z)
    } else {
        match invert_point(z) {
            Some(w) => chart.other().lift(w),
            None => chart.lift(z),
        }
    }
}

pub fn lift_all(chart: Chart, h: &[Complex64]) -> Vec<Point3> {
    h.iter().map(|&z| lift_from(chart, z)).collect()
}

/// The iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub f: Vec<Point3>,
    pub h1: PlanarCoords,
    pub h2: PlanarCoords,
    pub partition: IndexPartition,
    pub k: usize,
    pub energy: f64,
}

/// Chart coordinates after both half-steps of iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub k: usize,
    pub h1: Vec<Complex64>,
    pub h2: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Tolerance,
    MaxIter,
    Stagnation,
    QuasiPeriodicSuspected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub n1: usize,
    pub m1: usize,
    pub n2: usize,
    pub m2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub initial_energy: f64,
    pub energy_history: Vec<f64>,
    pub delta_history: Vec<f64>,
    pub sigma_history: Vec<f64>,
    /// `max |h2^(k) - h2^(k-1)|` over the north region per iteration.
    pub step_history: Vec<f64>,
    pub final_stats: StretchStats,
    pub iterations: usize,
    pub termination_reason: TerminationReason,
    pub partition: PartitionSizes,
    /// Iterations after the third whose energy fell by more than `1e-9`.
    pub energy_decreases: usize,
    pub rates: Option<RateSeries>,
    pub config: SemConfig,
}

/// State, index sets and lagged Laplacians of a running minimization.
pub struct SemSolver<'m> {
    mesh: &'m TriMesh,
    config: SemConfig,
    regions: [Region; 2],
    laplacians: [StretchLaplacian; 2],
    symbolic: [Option<SymbolicLu<usize>>; 2],
    state: ParamState,
    fingerprint: u64,
    snapshots: Vec<Snapshot>,
}

fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

impl<'m> SemSolver<'m> {
    /// Runs the index-fixing warm-up from the spherical map `f0`.
    pub fn new(mesh: &'m TriMesh, f0: Vec<Point3>, config: SemConfig) -> Result<Self> {
        config.validate()?;
        if f0.len() != mesh.num_vertices() {
            return Err(SemError::DimensionMismatch(format!(
                "{} initial positions for {} vertices",
                f0.len(),
                mesh.num_vertices()
            )));
        }
        let mut f: Vec<Point3> = f0.iter().map(|p| p.normalize()).collect();
        let mut h: Vec<Complex64> = f.iter().map(|p| Chart::South.project(p)).collect::<Result<_>>()?;
        let mut parts: [Option<(Vec<usize>, Vec<usize>)>; 2] = [None, None];
        let mut first = true;
        for _ in 0..config.warmup {
            for chart in Chart::BOTH {
                if !first {
                    h = invert_plane(&h)?;
                }
                first = false;
                let (interior, boundary) = partition_chart(mesh, &h, config.radius, chart)?;
                let region = Region::new(mesh, Some(chart), interior.clone(), boundary.clone())?;
                let l = assemble_laplacian(mesh, &f, &region)?;
                let h_i = InteriorSolver::new(&l, config.solver)?.solve(&region.gather_boundary(&h))?;
                for (&v, z) in region.interior().iter().zip(h_i) {
                    h[v] = z;
                }
                f = lift_all(chart, &h);
                log::debug!(
                    "warm-up {chart}: n = {}, m = {}, max |h_I| = {:.3e}, E = {:.10}",
                    interior.len(),
                    boundary.len(),
                    region.interior().iter().map(|&v| h[v].norm()).fold(0.0, f64::max),
                    stretch_energy(mesh, &f).unwrap_or(f64::NAN)
                );
                parts[chart.index()] = Some((interior, boundary));
            }
        }
        let (h1, h2) = if config.warmup == 0 {
            let h1: Vec<Complex64> = f.iter().map(|p| Chart::South.project(p)).collect::<Result<_>>()?;
            let h2: Vec<Complex64> = f.iter().map(|p| Chart::North.project(p)).collect::<Result<_>>()?;
            for chart in Chart::BOTH {
                let h = if chart == Chart::South { &h1 } else { &h2 };
                parts[chart.index()] = Some(partition_chart(mesh, h, config.radius, chart)?);
            }
            (h1, h2)
        } else {
            (invert_plane(&h)?, h)
        };
        let [p1, p2] = parts.map(|p| p.expect("both charts partitioned"));
        let partition = IndexPartition {
            i1: p1.0,
            b1: p1.1,
            i2: p2.0,
            b2: p2.1,
            radius: config.radius,
        };
        let regions = [
            Region::new(mesh, Some(Chart::South), partition.i1.clone(), partition.b1.clone())?,
            Region::new(mesh, Some(Chart::North), partition.i2.clone(), partition.b2.clone())?,
        ];
        let laplacians = [
            assemble_laplacian(mesh, &f, &regions[0])?,
            assemble_laplacian(mesh, &f, &regions[1])?,
        ];
        let energy = stretch_energy(mesh, &f)?;
        if !energy.is_finite() {
            return Err(SemError::NonFiniteEnergy { iteration: 0 });
        }
        let fingerprint = partition.fingerprint();
        let mut snapshots = Vec::new();
        if config.record_snapshots {
            snapshots.push(Snapshot {
                k: 0,
                h1: h1.clone(),
                h2: h2.clone(),
            });
        }
        log::info!(
            "index sets fixed: n1 = {}, m1 = {}, n2 = {}, m2 = {}, E(0) = {energy:.10}",
            partition.i1.len(),
            partition.b1.len(),
            partition.i2.len(),
            partition.b2.len()
        );
        Ok(Self {
            mesh,
            config,
            regions,
            laplacians,
            symbolic: [None, None],
            state: ParamState {
                f,
                h1: PlanarCoords::new(h1),
                h2: PlanarCoords::new(h2),
                partition,
                k: 0,
                energy,
            },
            fingerprint,
            snapshots,
        })
    }

    pub fn state(&self) -> &ParamState {
        &self.state
    }

    pub fn config(&self) -> &SemConfig {
        &self.config
    }

    pub fn mesh(&self) -> &TriMesh {
        self.mesh
    }

    pub fn region(&self, chart: Chart) -> &Region {
        &self.regions[chart.index()]
    }

    /// The Laplacian the next half-step on `chart` will use.
    pub fn laplacian(&self, chart: Chart) -> &StretchLaplacian {
        &self.laplacians[chart.index()]
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// One half-step on `chart`: invert the other chart, solve the interior
    /// with the lagged Laplacian, lift, reassemble.
    fn half_step(&mut self, chart: Chart) -> Result<()> {
        let s = chart.index();
        let source = match chart {
            Chart::South => &self.state.h2,
            Chart::North => &self.state.h1,
        };
        let mut h = invert_plane(source)?;
        let solver = InteriorSolver::with_symbolic(&self.laplacians[s], self.config.solver, self.symbolic[s].take())?;
        self.symbolic[s] = solver.symbolic();
        let region = &self.regions[s];
        let h_i = solver.solve(&region.gather_boundary(&h))?;
        for (&v, z) in region.interior().iter().zip(h_i) {
            h[v] = z;
        }
        self.state.f = lift_all(chart, &h);
        self.laplacians[s] = assemble_laplacian(self.mesh, &self.state.f, region)?;
        match chart {
            Chart::South => self.state.h1 = PlanarCoords::new(h),
            Chart::North => self.state.h2 = PlanarCoords::new(h),
        }
        Ok(())
    }

    pub fn south_step(&mut self) -> Result<()> {
        self.half_step(Chart::South)
    }

    pub fn north_step(&mut self) -> Result<()> {
        self.half_step(Chart::North)
    }

    /// Both half-steps and the energy; returns `E^(k)`.
    pub fn iterate(&mut self) -> Result<f64> {
        self.south_step()?;
        self.north_step()?;
        debug_assert_eq!(self.state.partition.fingerprint(), self.fingerprint);
        self.state.k += 1;
        let energy = stretch_energy(self.mesh, &self.state.f)?;
        if !energy.is_finite() {
            return Err(SemError::NonFiniteEnergy { iteration: self.state.k });
        }
        self.state.energy = energy;
        if self.config.record_snapshots {
            self.snapshots.push(Snapshot {
                k: self.state.k,
                h1: self.state.h1.to_vec(),
                h2: self.state.h2.to_vec(),
            });
        }
        Ok(energy)
    }

    /// Iterates until a stopping rule fires.
    pub fn run(mut self) -> Result<SemOutcome> {
        let mesh = self.mesh;
        let initial_energy = self.state.energy;
        let mut energy_history = Vec::new();
        let mut delta_history = Vec::new();
        let mut sigma_history = Vec::new();
        let mut step_history = Vec::new();
        let mut sigma_prev = stretch_factors(mesh, &self.state.f)?;
        let mut recent: VecDeque<(usize, Vec<Complex64>)> = VecDeque::new();
        let mut alternating = 0usize;
        let mut energy_decreases = 0usize;
        let mut reason = TerminationReason::MaxIter;
        while self.state.k < self.config.max_iter {
            let prev_energy = self.state.energy;
            let prev_h2 = self.state.h2.to_vec();
            let energy = self.iterate()?;
            let k = self.state.k;
            let delta = energy - prev_energy;
            let sigma = stretch_factors(mesh, &self.state.f)?;
            let ds = sigma.iter().zip(&sigma_prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            sigma_prev = sigma;
            let step = max_diff(&self.regions[1].gather(&self.state.h2), &self.regions[1].gather(&prev_h2));
            energy_history.push(energy);
            delta_history.push(delta);
            sigma_history.push(ds);
            step_history.push(step);
            log::debug!("k = {k}: E = {energy:.12}, delta = {delta:.3e}, |dh| = {step:.3e}");
            if self.config.rate_window > 0 {
                recent.push_back((k, self.state.h2.to_vec()));
                if recent.len() > self.config.rate_window {
                    recent.pop_front();
                }
            }
            if k > 3 && delta < -1e-9 {
                energy_decreases += 1;
                log::debug!("energy fell by {:.3e} at iteration {k}", -delta);
            }
            let previous = delta_history.len().checked_sub(2).map(|i| delta_history[i]);
            if delta.abs() > self.config.tol && previous.is_some_and(|p: f64| p.abs() > self.config.tol && p.signum() != delta.signum()) {
                alternating += 1;
            } else {
                alternating = 0;
            }

            if delta.abs() <= self.config.tol {
                reason = TerminationReason::Tolerance;
                break;
            }
            if step <= self.config.stagnation_tol {
                reason = TerminationReason::Stagnation;
                break;
            }
            if alternating >= self.config.quasi_periodic_window {
                reason = TerminationReason::QuasiPeriodicSuspected;
                break;
            }
        }
        let rates = (recent.len() >= 2).then(|| {
            let history: Vec<(usize, &[Complex64])> = recent.iter().map(|(k, h)| (*k, h.as_slice())).collect();
            r_linear_estimate(&history, &self.state.h2, &self.state.partition.b2, &self.state.partition.i2)
        });
        let p = &self.state.partition;
        let report = ConvergenceReport {
            initial_energy,
            energy_history,
            delta_history,
            sigma_history,
            step_history,
            final_stats: stretch_stats(mesh, &self.state.f)?,
            iterations: self.state.k,
            termination_reason: reason,
            partition: PartitionSizes {
                n1: p.i1.len(),
                m1: p.b1.len(),
                n2: p.i2.len(),
                m2: p.b2.len(),
            },
            energy_decreases,
            rates,
            config: self.config.clone(),
        };
        if report.final_stats.folded_faces > 0 {
            log::warn!("final map has {} folded faces", report.final_stats.folded_faces);
        }
        log::info!(
            "stopped after {} iterations ({:?}), E = {:.10}",
            report.iterations,
            report.termination_reason,
            self.state.energy
        );
        Ok(SemOutcome {
            state: self.state,
            report,
            snapshots: self.snapshots,
        })
    }
}

/// Result of [`run_sem`].
#[derive(Debug, Clone)]
pub struct SemOutcome {
    pub state: ParamState,
    pub report: ConvergenceReport,
    pub snapshots: Vec<Snapshot>,
}

/// Index sets computed directly from a spherical map, without warm-up.
pub fn direct_partition(mesh: &TriMesh, f: &[Point3], radius: f64) -> Result<IndexPartition> {
    let h1: Vec<Complex64> = f.iter().map(|p| Chart::South.project(&p.normalize())).collect::<Result<_>>()?;
    let h2: Vec<Complex64> = f.iter().map(|p| Chart::North.project(&p.normalize())).collect::<Result<_>>()?;
    let (i1, b1) = partition_chart(mesh, &h1, radius, Chart::South)?;
    let (i2, b2) = partition_chart(mesh, &h2, radius, Chart::North)?;
    Ok(IndexPartition { i1, b1, i2, b2, radius })
}

/// Runs the warm-up and the main loop from the spherical map `f0`. The
/// mesh is rescaled to area `4π` internally.
pub fn run_sem_from(mesh: &TriMesh, f0: Vec<Point3>, config: &SemConfig) -> Result<SemOutcome> {
    config.validate()?;
    let mesh = mesh.normalized();
    if config.max_iter == 0 {
        let f: Vec<Point3> = f0.iter().map(|p| p.normalize()).collect();
        let partition = direct_partition(&mesh, &f, config.radius)?;
        let h1 = f.iter().map(|p| Chart::South.project(p)).collect::<Result<Vec<_>>>()?;
        let h2 = f.iter().map(|p| Chart::North.project(p)).collect::<Result<Vec<_>>>()?;
        let energy = stretch_energy(&mesh, &f)?;
        let report = ConvergenceReport {
            initial_energy: energy,
            energy_history: Vec::new(),
            delta_history: Vec::new(),
            sigma_history: Vec::new(),
            step_history: Vec::new(),
            final_stats: stretch_stats(&mesh, &f)?,
            iterations: 0,
            termination_reason: TerminationReason::MaxIter,
            partition: PartitionSizes {
                n1: partition.i1.len(),
                m1: partition.b1.len(),
                n2: partition.i2.len(),
                m2: partition.b2.len(),
            },
            energy_decreases: 0,
            rates: None,
            config: config.clone(),
        };
        return Ok(SemOutcome {
            state: ParamState {
                f,
                h1: PlanarCoords::new(h1),
                h2: PlanarCoords::new(h2),
                partition,
                k: 0,
                energy,
            },
            report,
            snapshots: Vec::new(),
        });
    }
    SemSolver::new(&mesh, f0, config.clone())?.run()
}

/// Conformal initialization followed by [`run_sem_from`].
pub fn run_sem(mesh: &TriMesh, config: &SemConfig) -> Result<SemOutcome> {
    let mesh = mesh.normalized();
    let init = conformal_initialize(
        &mesh,
        &ConformalConfig {
            solver: config.solver,
            ..ConformalConfig::default()
        },
    )?;
    run_sem_from(&mesh, init.f0, config)
}
