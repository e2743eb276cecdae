use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SemError>;

#[derive(Debug, Error)]
pub enum SemError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("degenerate face {face} (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("point ({x}, {y}, {z}) is not on the unit sphere")]
    NotOnSphere { x: f64, y: f64, z: f64 },

    #[error("point coincides with the north pole")]
    Pole,

    #[error("planar coordinate {index} is at the origin and cannot be inverted")]
    Origin { index: usize },

    #[error("degenerate image triangle at face {face} (area {area:e})")]
    DegenerateImage { face: usize, area: f64 },

    #[error("dimension mismatch: {0}")]
    RegionMismatch(String),

    #[error("singular system: factorization broke down at pivot {pivot}")]
    SingularSystem { pivot: usize },

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("chart {chart} has an empty interior index set")]
    EmptyInterior { chart: usize },

    #[error("chart {chart} has an empty boundary ring")]
    EmptyBoundary { chart: usize },

    #[error("stretch energy became non-finite at iteration {iteration}")]
    NonFiniteEnergy { iteration: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("vanishing transfer denominator at boundary entry {index} (|value| = {value:e})")]
    SingularGamma { index: usize, value: f64 },

    #[error("eigenvalue computation failed: {0}")]
    EigenFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SemError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        SemError::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SemError::Io {
            path: path.into(),
            source,
        }
    }
}
