//! Relation extraction through in-context learning.
//!
//! The pipeline retrieves demonstrations for each test instance (exact
//! cosine KNN over provider embeddings, or a contrastively trained linear
//! adapter on top of them), assembles a prompt constrained to the relations
//! permitted for the instance's entity-type pair, queries a completion
//! provider, parses the answer back into a label and scores the run.

pub mod corpus;
pub mod digest;
pub mod epr;
pub mod knn;
pub mod parallel;
pub mod promptkit;
pub mod providers;
pub mod retrieval;
pub mod runner;

pub use corpus::{Corpus, REInstance, RelationSchema, Split, TypePair, NO_RELATION};
pub use knn::{Neighbor, VectorIndex};
pub use providers::{EmbeddingVector, ProviderClient, ScoreResult};
