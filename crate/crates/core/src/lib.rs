//! Population-size estimation from a combined cluster and link-tracing
//! sample.
//!
//! A hidden population splits into a part covered by a frame of `N` sites
//! (size τ₁) and an uncovered part (size τ₂). An initial simple random sample
//! of `n` sites is enumerated, and every sampled person reports which other
//! sampled sites they are linked to. Persons outside the sampled sites are
//! observed through their links. This crate provides:
//!
//! * [`patterns`]: link patterns and observed count tables;
//! * [`link_model`]: homogeneous and mixed-logit (Rasch) link probabilities;
//! * [`simulator`]: seeded synthetic populations and samples;
//! * [`likelihood`]: log-likelihood components with analytic gradients;
//! * [`estimators`]: unconditional and conditional MLEs of τ₁, τ₂, τ;
//! * [`variance`]: asymptotic covariance matrices, V-vector estimates and
//!   Wald intervals;
//! * [`experiment`]: Monte Carlo runs with JSON/CSV/text reports.
//!
//! The numerical code is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); the aliases below fix it to `f64`.

// `!(a <= b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod likelihood;
pub mod linalg;
pub mod link_model;
pub mod optimize;
pub mod patterns;
pub mod quadrature;
pub mod scalar;
pub mod simulator;
pub mod variance;

pub use error::{Component, Error, Result};
pub use estimators::{FitOptions, Method};
pub use link_model::{LinkModel, ModelSpec, Scope};
pub use patterns::{load_sample, OutcomePattern, PatternCounts, SampleData};
pub use scalar::Real;

pub type HomogeneousModel = link_model::Homogeneous<f64>;
pub type RaschModel = link_model::Rasch<f64>;
pub type AnyModel = link_model::AnyLinkModel<f64>;
pub type Params = link_model::LinkParams<f64>;
pub type Fit = estimators::ComponentFit<f64>;
pub type EstimateReport = estimators::EstimateReport<f64>;
pub type VarianceReport = variance::VarianceReport<f64>;
pub type AsymptoticMatrices = variance::AsymptoticMatrices<f64>;
pub type Matrix = linalg::Matrix<f64>;
