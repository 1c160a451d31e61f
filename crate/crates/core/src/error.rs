use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({i}, {j}, {n}) out of range for clamped boundary")]
    BoundaryAccess { i: isize, j: isize, n: isize },

    #[error("grid spec invalid: {0}")]
    InvalidGrid(String),

    #[error("density floor violated: rho = {0}")]
    DensityFloor(f64),

    #[error("density spec not normalized; call normalize() first")]
    NotNormalized,

    #[error("negative density in divergence input: {0}")]
    InvalidDensity(f64),

    #[error("quadrature of the density underflows on this grid (mass = {0}); domain mismatch")]
    DomainMismatch(f64),

    #[error("operation requires a {expected}-dimensional state, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("newton did not converge in {iters} iterations; best residual {best_residual}")]
    NonConvergence { iters: usize, best_residual: f64 },

    #[error("jacobian is singular or near-singular: {0}")]
    RankDeficient(String),

    #[error("problem configuration incomplete: {0}")]
    Configuration(String),

    #[error("loop path is not closed on the grid")]
    InvalidLoop,

    #[error("vorticity sup-norm {0} below the degeneracy guard; stability criterion undefined for irrotational fields")]
    IrrotationalDegenerate(f64),

    #[error("stability norm weight is indefinite: c1^2/rho_max - |mu_e|^2/rho_min = {0} at its minimum")]
    IndefiniteWeight(f64),

    #[error("sample count {0} too small; need at least 100 for a density estimate")]
    InsufficientSamples(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
