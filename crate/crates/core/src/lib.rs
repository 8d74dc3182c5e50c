//! Natural-gradient variational inference for sparse Gaussian process models
//! with non-conjugate likelihoods.
//!
//! The natural gradient of an objective with respect to any parameterization
//! of a Gaussian is computed as a Jacobian-vector product of the map from
//! natural parameters to that parameterization, obtained from a reverse-mode
//! engine by differentiating twice.

pub mod ad;
pub mod error;
pub mod expfam;
pub mod linalg;
pub mod likelihoods;
pub mod natgrad;
pub mod optim;
pub mod quadrature;
pub mod special;
pub mod svgp;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
