//! Few-shot meta-learning competition harness on feature embeddings.
//!
//! Seeded episode generation over class-split pools, a three-level
//! meta-learner / learner / predictor API, baseline and transductive
//! classification heads, first-order MAML on a small MLP, episodic
//! evaluation with confidence intervals, and a budgeted ingestion/scoring
//! pipeline.

pub mod api;
pub mod dataset;
pub mod evaluation;
pub mod fomaml;
pub mod heads;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod selftest;
