//! Concept-level explanations for vision classifiers.
//!
//! The pipeline describes each latent channel from its top-activating
//! patches ([`acd`]), merges synonymous atoms ([`clustering`]), scores
//! polysemanticity with concept polysemanticity entropy ([`cpe`]), stores
//! the results ([`database`]), and turns a relevance profile into an
//! explanation chain and narrative ([`chain`]). [`evaluation`] scores the
//! narratives.

pub mod acd;
pub mod canonical;
pub mod chain;
pub mod clustering;
pub mod cpe;
pub mod database;
pub mod evaluation;
pub mod gateway;
pub mod manifest;
pub mod scalar;
pub mod template;

pub use scalar::Scalar;

pub type Distribution = cpe::ConceptDistribution<f64>;
pub type Distribution32 = cpe::ConceptDistribution<f32>;
pub type CpeScore = cpe::CpeScore<f64>;
pub type CpeScore32 = cpe::CpeScore<f32>;
pub type LayerCpe = cpe::LayerCpe<f64>;
pub type ModelCpe = cpe::ModelCpe<f64>;
pub type Selection = chain::Selection<f64>;
pub type Selection32 = chain::Selection<f32>;
/// Exact probability of one atom, `count / denominator`.
pub type ExactProbability = num_rational::Ratio<u64>;
