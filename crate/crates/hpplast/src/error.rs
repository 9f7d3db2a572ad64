use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported spatial dimension {0}, expected 2 or 3")]
    UnsupportedDimension(usize),

    #[error("element {elem} is inverted or degenerate: det grad M = {det:.3e} at ({xi:.3}, {eta:.3})")]
    InvertedElement { elem: usize, det: f64, xi: f64, eta: f64 },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("mesh file parse error at line {line}: {msg}")]
    MeshParse { line: usize, msg: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("boundary condition error: {0}")]
    BoundaryCondition(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("linear solve residual too large: {residual:.3e} (limit {limit:.3e})")]
    ResidualTooLarge { residual: f64, limit: f64 },

    #[error("Newton did not converge after {iterations} iterations, |F| = {residual:.3e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("infeasible multiplier: |mu|_F = {norm:.6e} > sigma_y = {sigma_y:.6e} at quadrature point")]
    InfeasibleMultiplier { norm: f64, sigma_y: f64 },

    #[error("point ({0}, {1}) lies outside the mesh")]
    PointOutsideMesh(f64, f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("invalid material: {0}")]
    Material(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
