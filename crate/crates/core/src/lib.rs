//! Narration-aware text-video retrieval over precomputed embeddings.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod filtering;
pub mod inference;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod synthlab;

pub use error::{NarvidError, Result};
