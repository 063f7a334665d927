//! Emulating a hidden chaotic model from sparse, noisy observations.
//!
//! The pipeline mirrors a classical twin experiment on the 40-variable
//! Lorenz-96 system:
//!
//! 1. [`l96`] integrates the hidden truth.
//! 2. [`obs`] draws sparse noisy observations with a random sub-sampling operator.
//! 3. [`interp`] fills the observed field by cubic splines (baseline and warm start).
//! 4. [`net`] is the residual convolutional surrogate with hand-written gradients.
//! 5. [`enkf`] is the finite-size ensemble Kalman filter (EnKF-N).
//! 6. [`hybrid`] alternates assimilation and training.
//! 7. [`diagnostics`] scores forecasts, Lyapunov spectra and power spectra.
//! 8. [`experiment`] wires the stages together behind a config file and the CLI.

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod enkf;
pub mod error;
pub mod experiment;
pub mod hybrid;
pub mod interp;
pub mod io;
pub mod l96;
pub mod linalg;
pub mod net;
pub mod obs;
pub mod par;
pub mod rng;

pub use dynamics::{free_run, StepModel, TangentModel};
pub use error::{Error, Result};
pub use l96::{ModelParams, Trajectory};
