//! Hamiltonian dynamics driven by vacuum-scale noise on unstable degrees of
//! freedom.
//!
//! - [`phase_core`]: catalog Hamiltonians, energies, derivatives, Hessians,
//!   minimal-uncertainty dispersions
//! - [`stability`]: variational matrices, mode classification, Lyapunov spectra
//! - [`sde_engine`]: stochastic Hamilton equations and reproducible noise streams
//! - [`ensemble_stats`]: Monte Carlo ensembles, variance-law fits, covariance oracle
//! - [`fokker_planck`]: phase-space master equation on a 2-D grid

pub mod ensemble_stats;
pub mod error;
pub mod fokker_planck;
pub mod phase_core;
pub mod sde_engine;
pub mod stability;

pub use error::{Error, Result};
pub use phase_core::{builtin_model, HamiltonianModel, PhaseState};
pub use sde_engine::{Gating, NoiseSpec, Scheme};
