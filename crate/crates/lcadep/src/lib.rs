//! Latent class models for binary data with loglinear local dependencies.
//!
//! The crate fits T-class mixture models to 2^J response-pattern tables by
//! maximum likelihood (EM plus Newton polishing), screens every fixed
//! pairwise dependence with expected-parameter-change diagnostics (EPC_L with
//! the efficient score test, EPC_GS with the generalized score test, and raw
//! bivariate residuals), checks local identifiability by Jacobian rank
//! probes, and reproduces the population (KL) and Monte Carlo study grids.

#![allow(clippy::needless_range_loop)]

pub mod design;
pub mod deriv;
pub mod epc;
pub mod error;
pub mod estim;
pub mod ident;
pub mod model;
pub mod patterns;
pub mod sim;

pub use design::{build_design, Coding, DesignMatrices, ModelSpec, ParamVector};
pub use epc::{scan, EpcReport};
pub use error::{LcaError, Result};
pub use estim::{
    bic, bootstrap_pvalue, deviance, fit, fit_population, marginal_log_odds, wald_test,
    FitDocument, FitOptions, FitResult,
};
pub use ident::{rank_probe, table_cell, theorem1_check, IdentReport};
pub use model::{evaluate, loglik, Probabilities};
pub use patterns::{enumerate_patterns, ingest, IngestMode, ObservedData, PatternTable};
pub use sim::{draw_sample, monte_carlo, population_study, StudyConfig};
