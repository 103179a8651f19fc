//! Two-stage source-free domain adaptation toolkit.

pub mod checkpoint;
pub mod compositor;
pub mod corpus;
pub mod deployment;
pub mod error;
pub mod evaluation;
pub mod label_space;
pub mod model;
pub mod nn;
pub mod priors;
pub mod procurement;
pub mod synth;

pub use error::{Error, Result};
