//! Plate-amortized variational inference for hierarchical Bayesian models.
//!
//! A [`template::GraphTemplate`] describes a model with plates; grounding it at
//! given plate extents yields the full model. [`pavi::Architecture`] builds a
//! normalizing-flow variational family whose weights are shared across each
//! plate, trains it on stochastic reduced models and samples the full-model
//! posterior. [`models`] provides the Gaussian random effects model together
//! with its exact posterior and evidence.

pub mod autodiff;
pub mod checkpoint;
pub mod encodings;
pub mod flows;
pub mod models;
pub mod optim;
pub mod pavi;
pub mod template;
