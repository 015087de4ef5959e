//! Manifold polynomial chaos expansion (m-PCE).
//!
//! High-dimensional stochastic inputs are compressed with one of thirteen
//! dimension-reduction methods and a total-degree polynomial chaos surrogate
//! is fitted on the reduced coordinates. The crate also ships the random
//! field generators and PDE forward models used to benchmark the approach.
//!
//! Matrices are row-per-sample [`DataMatrix`] values throughout.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field_gen;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pce;
pub mod pipeline;
pub mod reducers;
pub mod solvers;

pub use error::{Error, Result};
pub use field_gen::{CovarianceSpec, FieldEnsemble, GridSpec, KleBasis, SrmSpectrum};
pub use metrics::EvalReport;
pub use pce::{MultiIndexSet, PceSurrogate};
pub use pipeline::{ExperimentConfig, ExperimentResult, TrainedMpce};
pub use reducers::{Method, ReducerModel, ReducerParams};

/// N samples by D features, one row per sample.
pub type DataMatrix = nalgebra::DMatrix<f64>;
