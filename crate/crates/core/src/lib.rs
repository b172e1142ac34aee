//! Complex residual graph-attention beamforming for MU-MISO downlink.
//!
//! The crate maps channel matrices to beamforming matrices with a
//! complex-valued residual graph attention network trained unsupervised
//! under a sum-power budget and per-user rate requirements. It ships with
//! everything needed to reproduce an experiment end to end:
//!
//! - [`tensor`] — dense complex tensors with reverse-mode differentiation
//!   and a finite-difference gradient checker;
//! - [`channel`] — Rayleigh channel dataset generation, perturbation, and
//!   a bit-exact binary dataset format;
//! - [`model`] — the graph attention network itself (attention-enabled
//!   aggregation, residual-assisted combination, complex batch norm, and
//!   a sum-power projection activation), plus checkpoint I/O;
//! - [`training`] — unsupervised training with penalty-method and
//!   Lagrangian-duality losses;
//! - [`baselines`] — successive convex approximation on a log-barrier
//!   Newton solver, MRT/ZF fixed-direction designs, and a multi-start
//!   projected-ascent oracle for tiny instances;
//! - [`evaluation`] — optimality/feasibility/inference-time metrics, the
//!   mean-average-distance oversmoothing gauge, and robustness /
//!   scalability / ablation protocols.
//!
//! Per-sample work (generation, solves, evaluation) is data-parallel via
//! rayon when the default `parallel` feature is enabled; outputs are
//! bit-identical with the sequential fallback.

pub mod baselines;
pub mod channel;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
