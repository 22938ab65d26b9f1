//! Multi-source aerodynamic data fusion.
//!
//! The crate fuses a dense low-fidelity data source (coarse CFD, engineering
//! codes) with a sparse high-fidelity one (fine CFD, wind tunnel, flight test)
//! by learning the residual between them:
//!
//! ```text
//! y_H(x) = y_L(x) + R_gap(x, y_L(x))
//! ```
//!
//! A U-shaped convolutional network with a self-attention bottleneck predicts
//! the residual over sliding windows of the co-located table `[x, y_L]`; the
//! fused estimate is `y_L + delta_pred`. Co-location of the two sources on a
//! shared state grid is done by per-fidelity ordinary kriging, and predictive
//! uncertainty of the fused surface is quantified with Gaussian process
//! regression (exact or FIC-approximate variance).
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors and reverse-mode autodiff over the fixed
//!   primitive set the network needs,
//! - [`kriging`]: ordinary kriging interpolation and dataset alignment,
//! - [`gpr`]: GP regression variance (exact and FIC) and the uncertainty metric,
//! - [`dataset`]: tables, CSV I/O, windowing, splits, synthetic benchmarks,
//! - [`lgfnet`]: the residual-learning network itself,
//! - [`training`]: Adam, plateau scheduler, the training loop, metrics.

pub mod dataset;
pub mod error;
pub mod gpr;
pub mod kriging;
pub mod lgfnet;
pub mod linalg;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
