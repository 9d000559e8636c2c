use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular system incompatible: |sum(rhs)| = {sum:.3e} exceeds {limit:.3e}")]
    Incompatible { sum: f64, limit: f64 },

    #[error("linear solver stopped after {iterations} iterations with relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("fluid region is not connected across the periodic cell ({components} components)")]
    Disconnected { components: usize },

    #[error("effective permittivity inconsistent: {0}")]
    Inconsistent(String),

    #[error("tensor is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error(
        "fixed-point iteration did not converge in {iterations} iterations (last increment {increment:.3e}); reduce dt"
    )]
    PicardCap { iterations: usize, increment: f64 },

    #[error("negative density {value:.3e} at voxel {index}")]
    NegativeDensity { value: f64, index: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("memory budget exceeded: fine grid needs {required} voxels, budget is {budget}")]
    Budget { required: usize, budget: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
