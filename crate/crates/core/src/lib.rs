//! Spatial weights matrix selection and model averaging for multivariate
//! spatial autoregressive models.

pub mod averaging;
pub mod error;
pub mod harness;
pub mod msar_core;
pub(crate) mod profile;
pub mod selection;
pub mod solver;
pub mod tensor_ops;
pub mod weights;

pub use error::{MsarError, Result};
pub use msar_core::{
    build_s, fit, mean_and_cov, mu_tilde_of, objective_q, simulate, simulate_from_errors,
    CandidateFit, Dataset, ErrorKind, ErrorLaw, FitOptions, MsarParams,
};
pub use tensor_ops::{DenseMatrix, DenseVector};
pub use weights::SpatialWeights;
