//! Conjunctive query answering over knowledge graphs with box embeddings.
//!
//! Queries and entities are both embedded as axis-aligned boxes. A query box
//! is produced by relational message passing over the query graph; an entity
//! is an answer when its box overlaps the query box.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod manifest;
pub mod ndmath;
mod ntriples;
pub mod query;
pub mod sampler;
pub mod synthetic;
pub mod trainer;

pub use config::RunConfig;
pub use dataset::{Dataset, QueryInstance, Split};
pub use encoder::{encode, Aggregation, EncoderConfig, ParameterStore};
pub use error::{Error, Result};
pub use eval::{evaluate, ConfusionMatrix, EvalReport};
pub use geometry::BoxEmbedding;
pub use graph::{
    Direction, EntityId, GraphBuilder, GraphFormat, GraphStats, KnowledgeGraph, RelationId, Triple,
    TypeId,
};
pub use query::{execute, execute_relaxed, QueryGraph, Role, Template};
pub use sampler::{generate_dataset, EdgeSplit, SamplerConfig};
pub use trainer::{train, TrainConfig, TrainState};
