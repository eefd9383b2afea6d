//! Sequential causal inference in the point parametrization.
//!
//! The library estimates causal effects of treatment sequences from panel
//! data in which time-dependent covariates are simultaneously posttreatment
//! variables of earlier treatments and confounders of later ones. Instead of
//! placing a model on the full table of stratum means, the outcome
//! distribution is parametrized by *point effects*: the mean-outcome contrast
//! between a stratum and its reference-level sibling. Net (blip) effects of
//! treatments are linear in the point effects with combinatorial coefficients
//! computed from treatment-assignment proportions, which turns net-effect
//! estimation into a small generalized least squares problem. Sequential
//! causal effects of static and dynamic regimes then follow from the net
//! effects and regime-specific class proportions, with the G-formula
//! available as an independent cross-check.
//!
//! Module map:
//!
//! - [`panel`] — panel ingestion, stratum counting, conditional proportions.
//! - [`strata`] — stratum keys, cell tables, canonical key strings.
//! - [`point_params`] — point effects, grand mean, the two-way bridge between
//!   point parameters and stratum means.
//! - [`net_effects`] — net-effect patterns, constraint coefficients, GLS.
//! - [`gformula`] — treatment regimes, G-formula evaluation, q-coefficients,
//!   sequential causal effects.
//! - [`sim`] — synthetic designs, outcome generation, replicate experiments,
//!   coverage reports.
//! - [`oracle`] — brute-force counterfactual evaluation and identity checks,
//!   kept deliberately independent of the optimized paths.

pub mod error;
pub mod gformula;
mod linalg;
pub mod net_effects;
pub mod oracle;
pub mod panel;
pub mod point_params;
pub mod sim;
pub mod strata;

pub use error::{Error, ErrorKind, Result};
