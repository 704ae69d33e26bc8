//! Learning probabilistic predictors for unknown optimization-problem
//! parameters and propagating their predictive samples into sample-average
//! stochastic programs solved by a differentiable interior-point QP solver.
//!
//! The crate is organized around the pipeline
//! `datagen → predictors → problems → qp → training → eval`:
//!
//! - [`autodiff`]: reverse-mode AD tape used by every differentiable path.
//! - [`qp`]: inequality-constrained QP solver with implicit KKT backward.
//! - [`problems`]: newsvendor / quadratic newsvendor / portfolio benchmarks
//!   and their sample-average-approximation builders.
//! - [`predictors`]: variational BNN, deterministic MLP and per-output GP,
//!   all behind one "draw M predictive samples" interface.
//! - [`training`]: Adam loops for decoupled (distribution-fit) and combined
//!   (end-to-end task-loss) learning.
//! - [`eval`]: regret metrics, the multi-seed experiment protocol, sweeps,
//!   configuration and result persistence.

pub mod autodiff;
pub mod datagen;
pub mod eval;
pub mod fdiff;
pub mod predictors;
pub mod problems;
pub mod qp;
pub mod rng;
pub mod tensor;
pub mod training;

pub use tensor::Tensor;
