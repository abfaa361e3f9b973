//! Two-pathway model for recognizing unseen attribute-object compositions.
//!
//! Images are encoded into a latent space and compacted by a batch-level
//! self-representation operator; attribute and object word embeddings are
//! propagated by a graph convolutional network into the same space. A
//! composition is recognized by the nearest sum of its node embeddings.

pub mod composition;
pub mod config;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod linguistic;
pub mod numerics;
pub mod objectives;
pub mod visual;

pub use composition::Composition;
pub use config::{Overrides, RunConfig};
pub use error::{Error, Result};
