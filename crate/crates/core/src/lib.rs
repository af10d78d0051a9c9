//! A numerical laboratory for deterministic DDIM sampling under simulated
//! efficiency-technique errors, with iterative error correction.
//!
//! The crate samples trajectories of the deterministic DDIM update
//! `x_{t-1} = A·x_t + B·ε_θ(x_t, t)` using closed-form noise-prediction
//! models (a single Gaussian and a Gaussian mixture) instead of trained
//! networks, so every theoretical quantity has an exact oracle. On top of the
//! clean sampler it provides:
//!
//! - **Perturbation injectors** ([`perturb`]) that corrupt each model
//!   evaluation the way deployment-efficiency techniques do: additive noise,
//!   uniform output quantization, and interval caching of stale predictions.
//! - **Iterative error correction** ([`sampler::iec_refine`]): a relaxed
//!   fixed-point refinement of each sampling step that contracts the
//!   accumulated state error whenever its contraction constant
//!   `L = ‖(1-λ)I + λ·B·J‖` stays below one.
//! - **Error-propagation diagnostics** ([`analysis`]): per-step amplification
//!   norms `‖A·I + B·J‖`, contraction constants, first-order error
//!   recursions and their cumulative form, and the steady-state correction
//!   bound `C/(1-L)`, all compared against measured paired trajectories.
//! - **Sample-quality metrics** ([`metrics`]): a Fréchet distance between
//!   generated and ground-truth populations fitted as Gaussians.
//! - **A batch harness** ([`runner`]) behind a small CLI that writes
//!   reproducible JSON reports and CSV tables.
//!
//! Everything is deterministic: trajectories, injector noise, and reference
//! populations are all driven by explicitly seeded counter-based generators,
//! so identical configurations reproduce byte-identical outputs.

pub mod analysis;
pub mod config;
pub mod error;
pub mod metrics;
pub mod models;
pub mod perturb;
pub mod report;
pub mod runner;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
