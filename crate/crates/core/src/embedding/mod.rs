//! Embedding layer: grouped sparse fields to dense per-group representations.

mod schema;
mod tables;

pub use schema::{FieldKind, FieldSpec, Group, Schema, HEADER_MAGIC, HEADER_VERSION};
pub use tables::{embed_field, embed_instance, EmbeddedInstance, EmbeddedNodes, EmbeddingTables, FieldEmbedding};
