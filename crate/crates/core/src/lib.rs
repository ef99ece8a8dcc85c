//! Poisson pseudo-maximum-likelihood regression with high-dimensional fixed
//! effects.
//!
//! The pipeline loads a delimited table ([`dataset`]), parses the absorbed
//! terms ([`absorb`]), drops singletons and separated observations
//! ([`projector`], [`separation`]), fits the model by IRLS on
//! within-transformed data ([`irls`]) and computes robust or clustered
//! standard errors ([`inference`]). [`pipeline::estimate`] runs all of it.

pub mod absorb;
pub mod dataset;
pub mod irls;
pub mod projector;
pub mod separation;
pub mod inference;
pub mod pipeline;
pub mod cli;
