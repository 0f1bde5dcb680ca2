//! Lindblad dynamics with self-adjoint Lindblad operators realized as
//! averaged random unitary evolution.
//!
//! Three independent routes through the same physics are implemented and
//! cross-validated everywhere: closed-form observables, direct
//! master-equation integration (fixed-step RK4 plus the vectorized-generator
//! exponential in the Markov case), and Monte Carlo averaging over random
//! unitary trajectories. Concrete models: the phase-damped and
//! stochastic-coupling multiphoton Jaynes-Cummings model, first-blue-sideband
//! ion-trap Rabi decay with level-dependent noise, intrinsic-decoherence
//! generators from spectral promotion, and collapse-model trajectories for
//! contrast with the unitary unraveling.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod intrinsic;
pub mod iontrap;
pub mod jcm;
pub mod lindblad;
pub mod linalg;
pub mod noise;
pub mod phasemc;
pub mod scenario;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, DensityMatrix, HermitianOperator, SpectralDecomposition};
pub use noise::{BrownianIncrementStream, CorrelationSpec, NoiseKernel, TimeGrid};
