//! Data-driven variational regularizers for linear inverse problems, trained
//! two ways: as deep equilibrium models (adjoint fixed-point differentiation,
//! untied weights) and as bilevel learning problems (gradient-descent fixed
//! point of the lower-level objective, tied weights `C = A`).
//!
//! The crate provides, bottom up:
//!
//! * [`linops`] — dense and convolutional operators with exact adjoints,
//!   power-iteration spectral norms, small dense solves;
//! * [`proxmap`] — activations as proximal maps of convex conjugates, with
//!   Moreau partners and envelope values;
//! * [`regnet`] — the two-layer regularizer `gamma C^T sigma(xi A u + b)` and
//!   its hand-derived vector-Jacobian products;
//! * [`equilibrium`] — DeGrad / DeProx fixed-point solvers, the adjoint
//!   backward pass, an implicit-function-theorem solve and an unrolled
//!   reverse sweep;
//! * [`forward_models`] — the denoising / inpainting / deblurring setups with
//!   keyed Gaussian noise streams;
//! * [`training`] — MSE loss, Adam, schedules, spectral normalization, tau
//!   backoff, the naive fixed-point baseline and grid sweeps;
//! * [`data_io`] / [`checkpoint`] / [`report`] — datasets, parameter files
//!   and CSV reports.

pub mod checkpoint;
pub mod data_io;
pub mod equilibrium;
pub mod error;
pub mod forward_models;
pub mod linops;
pub mod proxmap;
pub mod regnet;
pub mod report;
pub mod signal;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use equilibrium::{
    contraction_bound, degrad_step, deprox_step, ift_gradient, lower_level_objective,
    param_gradient, solve_adjoint, solve_forward, unrolled_gradient, EquilibriumProblem,
    FixedPointResult, MapKind, StoppingRule,
};
pub use forward_models::{build_operator, default_blur_kernel, default_mask, measure, NoiseSpec, ProblemKind};
pub use linops::{ConvKernelBank, DenseMatrix, LinearOperator};
pub use proxmap::Activation;
pub use regnet::{regnet_forward, regnet_vjp_input, regnet_vjp_params, ParamGrads, RegularizerParams};
pub use signal::ImageSignal;
pub use training::{
    grid_run, mse_loss, AdamState, ArchSpec, ConvInit, EpochRecord, GridOutcome, GridSpec,
    Schedule, SigmaChoice, TrainConfig, TrainMode, TrainOutcome, TrainRun,
};
