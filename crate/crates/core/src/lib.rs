//! Caption-to-image retrieval over a consolidated scene-graph catalog.
//!
//! Images are ingested as attribute-labeled scene graphs and folded into one
//! catalog graph with inverted indices. A caption becomes a partially
//! specified query graph, and images are ranked by a soft subsumption score
//! whose parameters can be trained with a policy-gradient objective.

pub mod catalog;
pub mod cli;
pub mod embeddings;
pub mod eval;
pub mod error;
pub mod query;
pub mod scene_graph;
pub mod scoring;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
