use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use equiareal::conformal::{conformal_initialize, load_spherical_map, ConformalConfig};
use equiareal::diagnostics::{run_diagnostics, write_rates_csv, write_residuals_csv, write_spectral_csv, DiagnosticSummary};
use equiareal::error::{Result, SemError};
use equiareal::laplacian::stretch_stats;
use equiareal::mesh::{load_mesh, save_mesh, Point3, RawMesh, TriMesh};
use equiareal::sem::{run_sem_from, SemConfig, TerminationReason};
use equiareal::solver::SolverKind;
use equiareal::synth::{generate, Shape, SynthParams};

const DIAGNOSE_VERTEX_LIMIT: usize = 5000;

#[derive(Parser)]
#[command(name = "sem", version, about = "Spherical equiareal parameterization by stretch energy minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameterize a genus-zero mesh onto the unit sphere.
    Param(ParamArgs),
    /// Run the convergence diagnostics on a small mesh.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic benchmark mesh.
    Synth(SynthArgs),
    /// Recompute stretch statistics of a mesh and its spherical map.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SemArgs {
    /// JSON file with solver settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverKind>,
    /// Precomputed spherical map (same vertex order) replacing the
    /// conformal initializer.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct ParamArgs {
    input: PathBuf,
    /// Output mesh with vertices on the unit sphere.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// JSON convergence report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    sem: SemArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    input: PathBuf,
    /// Directory receiving the CSV series and summary.json.
    #[arg(long, default_value = "diagnostics")]
    out_dir: PathBuf,
    /// Number of recorded iterations.
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    /// Trailing iterates used for rate estimates.
    #[arg(long, default_value_t = 60)]
    window: usize,
    /// Allow meshes above the vertex limit.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    sem: SemArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// icosphere, ellipsoid, gaussian-bump-sphere or tetrahedron.
    shape: String,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    level: u32,
    /// Ellipsoid semi-axes as `a,b,c`.
    #[arg(long, value_parser = parse_axes, default_value = "1,1,1.5")]
    axes: [f64; 3],
    #[arg(long, default_value_t = 3)]
    bumps: usize,
    #[arg(long, default_value_t = 0.4)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.35)]
    width: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    mesh: PathBuf,
    /// Spherical map with the same vertex order.
    map: PathBuf,
    /// Write the statistics as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    match s {
        "direct" => Ok(SolverKind::Direct),
        "minres" => Ok(SolverKind::Minres),
        _ => Err(format!("unknown solver '{s}' (expected direct or minres)")),
    }
}

fn parse_axes(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c] if v.iter().all(|x| *x > 0.0 && x.is_finite()) => Ok([a, b, c]),
        _ => Err("expected three positive numbers a,b,c".into()),
    }
}

impl SemArgs {
    fn config(&self) -> Result<SemConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| SemError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| SemError::Config(format!("{}: {e}", path.display())))?
            }
            None => SemConfig::default(),
        };
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.radius {
            cfg.radius = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.solver {
            cfg.solver = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn initial_map(&self, mesh: &TriMesh, cfg: &SemConfig) -> Result<Vec<Point3>> {
        let init = match &self.init {
            Some(path) => load_spherical_map(path, mesh)?,
            None => conformal_initialize(
                mesh,
                &ConformalConfig {
                    solver: cfg.solver,
                    ..ConformalConfig::default()
                },
            )?,
        };
        if !init.centered {
            log::warn!("initial map is not centred (|mass centre| = {:.3e})", init.center_norm);
        }
        Ok(init.f0)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SemError::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| SemError::io(path, e))
}

fn cmd_param(args: &ParamArgs) -> Result<u8> {
    let cfg = args.sem.config()?;
    let mesh = load_mesh(&args.input)?.normalized();
    let f0 = args.sem.initial_map(&mesh, &cfg)?;
    let out = run_sem_from(&mesh, f0, &cfg)?;
    if let Some(path) = &args.output {
        save_mesh(path, &RawMesh::new(out.state.f.clone(), mesh.faces().to_vec()))?;
    }
    if let Some(path) = &args.report {
        write_json(path, &out.report)?;
    }
    let stats = &out.report.final_stats;
    println!(
        "{} iterations ({:?}), mean sigma - 1 = {:.3e}, std = {:.3e}, E = {:.8}, folds = {}",
        out.report.iterations,
        out.report.termination_reason,
        stats.mean - 1.0,
        stats.std,
        stats.energy,
        stats.folded_faces
    );
    Ok(match out.report.termination_reason {
        TerminationReason::Tolerance | TerminationReason::Stagnation => 0,
        TerminationReason::MaxIter => 2,
        TerminationReason::QuasiPeriodicSuspected => 3,
    })
}

fn print_check(name: &str, value: f64, threshold: f64) {
    let verdict = if value <= threshold { "PASS" } else { "FAIL" };
    println!("{verdict} {name}: max residual {value:.3e} (threshold {threshold:.0e})");
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<u8> {
    let cfg = args.sem.config()?;
    let mesh = load_mesh(&args.input)?.normalized();
    if mesh.num_vertices() > DIAGNOSE_VERTEX_LIMIT && !args.force {
        return Err(SemError::Config(format!(
            "mesh has {} vertices; diagnostics build dense matrices and are meant for at most {DIAGNOSE_VERTEX_LIMIT} (pass --force to run anyway)",
            mesh.num_vertices()
        )));
    }
    let f0 = args.sem.initial_map(&mesh, &cfg)?;
    let summary: DiagnosticSummary = run_diagnostics(&mesh, f0, &cfg, args.iterations, args.window)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| SemError::io(&args.out_dir, e))?;
    write_spectral_csv(&args.out_dir.join("spectral.csv"), &summary.spectral)?;
    write_rates_csv(&args.out_dir.join("rates.csv"), &summary.rates)?;
    write_residuals_csv(&args.out_dir.join("residuals.csv"), &summary.residuals)?;
    write_json(&args.out_dir.join("summary.json"), &summary)?;
    let t = summary.thresholds;
    print_check("weight decomposition", summary.max_decomposition, t.decomposition);
    print_check("H identity", summary.max_h_identity, t.h_identity);
    print_check("error recursion", summary.max_recursion, t.recursion);
    Ok(if summary.passed() { 0 } else { 4 })
}

fn cmd_synth(args: &SynthArgs) -> Result<u8> {
    let shape: Shape = args.shape.parse()?;
    let params = SynthParams {
        level: args.level,
        axes: args.axes,
        bumps: args.bumps,
        amplitude: args.amplitude,
        width: args.width,
        seed: args.seed,
    };
    save_mesh(&args.output, &generate(shape, &params))?;
    Ok(0)
}

fn cmd_stats(args: &StatsArgs) -> Result<u8> {
    let mesh = load_mesh(&args.mesh)?.normalized();
    let map = load_spherical_map(&args.map, &mesh)?;
    let stats = stretch_stats(&mesh, &map.f0)?;
    println!(
        "mean sigma - 1 = {:.3e}, std = {:.3e}, E = {:.8}, folds = {}",
        stats.mean - 1.0,
        stats.std,
        stats.energy,
        stats.folded_faces
    );
    if let Some(path) = &args.report {
        write_json(path, &stats)?;
    }
    Ok(0)
}

fn configure_threads() {
    let Ok(value) = std::env::var("SEM_THREADS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(0) | Err(_) => log::warn!("ignoring SEM_THREADS={value}"),
        Ok(1) => faer::set_global_parallelism(faer::Par::Seq),
        Ok(n) => faer::set_global_parallelism(faer::Par::rayon(n)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Param(a) => cmd_param(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
