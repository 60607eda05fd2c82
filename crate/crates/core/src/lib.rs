//! Sparse phase retrieval by thresholded Wirtinger flow, with debiased
//! coordinate estimators and confidence intervals from a split-and-swap
//! scheme, plus a Monte-Carlo harness for simulation studies.
//!
//! The observation model is `y_j = (x_j' beta)^2 + eps_j` with a real
//! Gaussian design. A typical pipeline:
//!
//! ```
//! use phase_infer::model::{generate_instance, generate_signal, seeded_rng};
//! use phase_infer::inference::{coordinate_ci, swap_estimate};
//! use phase_infer::twf::TwfTuning;
//!
//! let mut rng = seeded_rng(3);
//! let beta = generate_signal(40, 3, &mut rng).unwrap();
//! let inst = generate_instance(&beta, 800, 0.1, &mut rng).unwrap();
//! let fit = swap_estimate(&inst, &TwfTuning::default(), Some(0.1), &mut rng).unwrap();
//! let ci = coordinate_ci(&fit.estimate, 0, 0.05).unwrap();
//! assert!(ci.lo <= ci.hi);
//! ```

pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod special;
pub mod twf;

pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Study};
pub use inference::{swap_estimate, DebiasedEstimate, Interval};
pub use model::{Instance, SignalVector};
pub use twf::{run_twf, SignalEstimate, TwfTuning};
