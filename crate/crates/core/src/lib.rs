//! Causal collaborative filtering.
//!
//! Recommenders trained under counterfactual constraints: a base scoring model
//! `g(u, x)` is asked to give the same preference estimate for a target item
//! under the user's real history and under minimally edited (counterfactual)
//! histories that would still have led to the item being recommended.
//!
//! The crate is organised as:
//!
//! - [`dataset`]: rating-log ingestion, leave-one-out and randomized-trial splits,
//!   deterministic negative sampling.
//! - [`models`]: biased matrix factorization and an attention-pooling sequential
//!   model with analytic gradients.
//! - [`counterfactual`]: history editing rules, top-k selection, continuous
//!   perturbation and the do-expectation estimator.
//! - [`training`]: pairwise ranking loss plus the hinge-relaxed counterfactual
//!   constraint, and the clone-based procedure used for matching models.
//! - [`baselines`]: most-popular ranking and inverse propensity weights.
//! - [`eval`]: sampled-candidate ranking metrics.
//! - [`simulator`]: a synthetic world with a known preference oracle.
//! - [`sweep`]: grid search with validation-based model selection.

pub mod baselines;
pub mod counterfactual;
pub mod dataset;
mod error;
pub mod eval;
pub mod models;
pub mod seed;
pub mod simulator;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
