//! Error type shared across the solver.

use crate::grid::CellId;

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("seed point ({x}, {y}) lies outside the computational domain")]
    SeedOutsideDomain { x: f64, y: f64 },

    #[error("grid is not regularized; balance it before enumerating face segments")]
    NotRegularized,

    #[error("leaf cells do not tile the domain (overlap or gap detected)")]
    BrokenTiling,

    #[error("non-finite bathymetry sample at ({x}, {y})")]
    NonFiniteBathymetry { x: f64, y: f64 },

    #[error(
        "negative water depth in cell {cell:?} at t={t}: h={h} (w={w}, B={b}); \
         positivity of the update was violated"
    )]
    NegativeDepth { cell: CellId, t: f64, h: f64, w: f64, b: f64 },

    #[error("negative depth-weighted density in cell {cell:?} at t={t}: hrho={hrho}")]
    NegativeMass { cell: CellId, t: f64, hrho: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SolverError {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> SolverError {
        let path = path.into();
        move |source| SolverError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;
