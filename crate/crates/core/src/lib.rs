//! Two-stage multi-teacher knowledge distillation for out-of-context news
//! detection, built around a tiny multimodal language model.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod prompt;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
