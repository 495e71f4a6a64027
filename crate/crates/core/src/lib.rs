//! Preference-pair construction for medical visual question answering.
//!
//! The pipeline triages a supervised model's answers by confidence, samples a
//! stratified seed set, retrieves visually and semantically similar neighbors,
//! and builds chosen/rejected pairs either from the model's own failures or
//! from counterfactual rationales. A small pairwise preference trainer and the
//! evaluation metrics live here too.

pub mod confidence;
pub mod config;
pub mod counterfactual;
pub mod dpo;
pub mod embed;
pub mod interchange;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod text;
pub mod types;
