//! Factorization trees for explainable recommendation.
//!
//! Users and items are each organised in a ternary decision tree whose
//! predicates test feature-level review profiles (`mentions feature f at
//! least t` / `less than t` / `never mentioned f`). Every tree node carries a
//! latent-factor residual, so an entity's latent vector is the sum of the
//! residuals on its routed path, and the path itself is the explanation of
//! why that vector was chosen.
//!
//! The crate is organised along the pipeline:
//!
//! - [`ingest`]: JSON-lines review parsing, feature profiles, discretisation
//!   and recursive filtering.
//! - [`factorization`]: pointwise and BPR losses, the joint objective and the
//!   SGD solver used for every factor fit.
//! - [`tree`]: three-way partitions, optimal predicate selection and
//!   recursive tree growth.
//! - [`train`]: alternating optimisation of the two trees and the model type.
//! - [`persist`]: versioned, checksummed model files.
//! - [`recommend`]: scoring, top-K, rule-based explanations and the
//!   cold-start interview.
//! - [`eval`]: NDCG, cross validation, baselines, cold-start evaluation,
//!   sweeps and a planted-structure data generator.
//! - [`service`]: HTTP facade used by the interview UI.
//! - [`cli`]: the `fact` command line.

pub mod cli;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod ingest;
pub mod persist;
pub mod recommend;
pub mod seed;
pub mod service;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
pub use factorization::{FactorMatrix, Hyperparams};
pub use ingest::{Dataset, FeatureProfile, Review, SentimentMention, Side};
pub use recommend::{Explanation, InterviewSession};
pub use train::{FacTModel, TrainConfig};
pub use tree::{FactorTree, Predicate};
