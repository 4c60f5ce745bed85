//! Multi-component tag recommendation for programming Q&A posts.
//!
//! A post is split into title, description and code. Each component is
//! encoded by its own transformer backbone, the pooled vectors are
//! concatenated, and a linear head scores every tag in the vocabulary.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
