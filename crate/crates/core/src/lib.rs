//! Simulation library for ultra-sensitive sensors built on higher-order
//! non-Hermitian topological skin effects.
//!
//! The crate is organised as a pipeline:
//!
//! * [`lattice`] — Bloch and open-boundary tight-binding models with
//!   non-reciprocal couplings, plus their analytic corner zero modes.
//! * [`spectral`] — dense non-Hermitian eigendecomposition with biorthogonal
//!   left/right pairing and a gauge-transformed solver for ill-conditioned
//!   skin-effect matrices.
//! * [`sensing`] — perturbation theory of a weak measurand: first-order shift
//!   formulas, the exact-diagonalization oracle, sensitivity curves and
//!   measurement-range estimation.
//! * [`circuit`] — mapping of a lattice onto a capacitor/inductor/buffer
//!   network and its frequency-dependent admittance matrix.
//! * [`measure`] — frequency sweeps, impedance scans, eigenfrequency-shift
//!   extraction, noise-floor handling and crosstalk robustness trials.
//! * [`xprec`] — a small arbitrary-mantissa software float used where the
//!   skin-effect conditioning exceeds what double precision can represent.

pub mod circuit;
pub mod lattice;
pub mod measure;
pub mod sensing;
pub mod spectral;
pub mod xprec;

pub use circuit::{AdmittanceMatrix, CircuitGraph, CircuitParams, EdgeKind, GroundScheme};
pub use lattice::{BlochHamiltonian, Boundary, LatticeSpec, RealSpaceMatrix, ZeroMode};
pub use measure::{calibrate_parasitic, DriveSpec, ExtractionMethod, SweepResult};
pub use sensing::{MeasurementRange, PerturbationSpec, ShiftEstimate};
pub use spectral::{ConditionFlag, SiteDensity, Spectrum};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid lattice specification: {0}")]
    InvalidLattice(String),
    #[error("no closed Bloch form for order {0}")]
    NoBlochForm(usize),
    #[error("site {0:?} outside lattice")]
    SiteOutOfRange(Vec<usize>),
    #[error("skin direction reversed: formulas assume lambda > lambda' (axis {0})")]
    SkinReversed(usize),
    #[error("eigensolver failed to converge")]
    NoConvergence,
    #[error("no mode within tolerance of target {0}")]
    NoModeNearTarget(num_complex::Complex64),
    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("extremum on grid boundary after widen-and-retry")]
    ExtremumOnBoundary,
    #[error("no clipped region in sweep; use the direct-minimum method")]
    NoClippedRegion,
    #[error("calibration failed: {0}")]
    CalibrationFailure(String),
    #[error("measurement range empty: lower {lower:.3e} exceeds upper {upper:.3e}")]
    EmptyRange { lower: f64, upper: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
