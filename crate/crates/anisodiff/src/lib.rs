//! Numerical laboratory for anisotropic nonlocal diffusion-convection
//! equations
//!
//! ```text
//!     d/dt u + L u + d/dx_N (u^q) = eps * Lap u,    u(0) >= 0,
//! ```
//!
//! where `L` is an alpha-stable operator determined by a spectral measure
//! `mu` on the unit sphere,
//!
//! ```text
//!     (L phi)(x) = int_{S^{N-1}} int_0^inf
//!         (phi(x) - [phi(x + r theta) + phi(x - r theta)] / 2)
//!         r^{-1-alpha} dr dmu(theta).
//! ```
//!
//! The lab discretizes on a periodic torus surrogate of R^N with two
//! independent operator backends (exact Fourier multiplier, direct radial
//! quadrature), a monotone upwind convection scheme with exact multiplier
//! diffusion, and a rescaling harness for the three large-time regimes
//! separated by the critical exponent `q* = 1 + (alpha-1)/N`.
//!
//! Module map:
//! - [`spectral_measure`]: measures on the sphere, nondegeneracy, projection
//! - [`symbols`]: Fourier multipliers and the truncation constants
//! - [`operators`]: multiplier and quadrature backends, structural identities
//! - [`solver`]: splitting time integrator with diagnostics
//! - [`asymptotics`]: regimes, rescaling, decay-rate fits, profiles
//! - [`cli_io`]: config parsing, experiment orchestration, persistence

pub mod asymptotics;
pub mod cli_io;
pub mod operators;
pub mod solver;
pub mod spectral_measure;
pub mod symbols;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("alpha = {0} outside the stable range (0, 2)")]
    AlphaOutOfRange(f64),

    #[error("negative argument s = {0} for a radial truncation function")]
    NegativeArgument(f64),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error(
        "degenerate measure: sampled nondegeneracy constant {lambda1:.3e} \
         below threshold {threshold:.1e}"
    )]
    DegenerateMeasure { lambda1: f64, threshold: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported dimension N = {0}: {1}")]
    UnsupportedDimension(usize, &'static str),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bump width {w} under-resolved: needs at least {min_cells} cells, has {cells:.2}")]
    UnderResolved { w: f64, min_cells: f64, cells: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("dt = {dt:.3e} exceeds the CFL limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error(
        "blow-up detected at t = {t:.6}: sup norm {linf:.6e} exceeds twice \
         its initial value {linf0:.6e} (scheme bug: the equation cannot grow \
         the sup norm)"
    )]
    BlowUp {
        t: f64,
        linf: f64,
        linf0: f64,
        /// Diagnostics collected up to the abort, for post-mortem dumps.
        series: Box<solver::DiagnosticsSeries>,
    },

    #[error("too few samples in fit window: {got} < {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("config syntax error: {0}")]
    ConfigSyntax(String),

    #[error("config invalid:\n{}", .0.join("\n"))]
    ConfigInvalid(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
