//! Model constructors: countable models for exact evolution, the Boole map,
//! and the two SL(2,ℝ) charts sampled by the Monte Carlo ensembles.

mod boole;
mod funnel;
mod lattice;
mod schottky;
mod sl2;

use thiserror::Error;

use crate::kernel::KernelError;

pub use boole::{
    boole_map, boole_orbit, preimage_jacobian_sum, BooleOrbitReport, BooleOrbitSpec, OrbitRecord,
    BOOLE_SINGULAR_RADIUS,
};
pub use funnel::{build_funnel_chain, FunnelChainSpec, TailRule, NECK_FLOOR};
pub use lattice::{
    build_cyclic_model, build_lattice_model, lattice_coords, lattice_state, simple_walk,
    translation_law,
};
pub use schottky::{
    default_schottky_generators, free_reduce, SchottkyChart, SchottkyLetter, SchottkyPoint,
};
pub use sl2::{rotation, sl2_reduce, sl2_step, spectral_radius, Mat2, Sl2LatticePoint, DET_TOL, MAX_SWAPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    SpecInvalid(String),
    #[error("orbit from {start} came within 1e-12 of 0 at step {step}")]
    OrbitSingular { start: f64, step: usize },
    #[error("determinant {0} is not 1")]
    NotUnimodular(f64),
    #[error("lattice reduction did not terminate")]
    DegenerateBasis,
    #[error("generators fail the ping-pong check: {0}")]
    PingPongViolation(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// What an escape proxy measures, and which direction means "escaped".
pub trait EscapeProxy {
    /// Lattice: shortest vector length (small = deep in the cusp).
    /// Schottky: distance from the core proxy (large = deep in a funnel).
    fn escape_proxy(&self) -> f64;
}
