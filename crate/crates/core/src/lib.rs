//! Separable factor analysis for multiway arrays.
//!
//! An array `Y` of dimension `m_1 × ... × m_K` is modeled as
//! `vec(Y) ~ N(vec(M), Σ_K ⊗ ... ⊗ Σ_1)` where each mode covariance is diagonal,
//! factor-analytic (`ΛΛᵀ + D²`) or unstructured. A rank vector `(k_1, ..., k_K)`
//! selects the structure of each mode: `0` is diagonal, `0 < k < m` is a
//! `k`-factor model and `k = m` is unstructured.
//!
//! The numerical core is generic over the scalar type ([`Scalar`]); the aliases
//! below fix it to `f64`, which is what the estimation tolerances assume.

pub mod bayes;
pub mod covariance;
pub mod cv;
pub mod diagnostics;
pub mod error;
pub mod famodel;
pub mod io;
pub mod meanmodel;
pub mod mle;
pub mod ranksel;
pub mod scalar;
pub mod simulate;
pub mod tensor;

pub use error::{Result, SfaError};
pub use scalar::Scalar;

pub type Tensor = tensor::DenseTensor<f64>;
pub type Tensor32 = tensor::DenseTensor<f32>;
pub type Masked = tensor::MaskedTensor<f64>;
pub type ModeCov = covariance::ModeCovariance<f64>;
pub type CovSet = covariance::CovarianceSet<f64>;
pub type Model = famodel::SfaModel<f64>;
pub type Design = meanmodel::Design<f64>;
pub type MleFit = mle::MleFitResult<f64>;
pub type Chain = bayes::PosteriorSamples<f64>;
