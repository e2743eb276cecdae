pub mod error;
pub mod mesh;
pub mod sphere;
pub mod synth;
pub mod laplacian;
pub mod solver;
pub mod conformal;
pub mod sem;
pub mod diagnostics;
