//! Retrieval-based text-to-SQL parsing.
//!
//! A question is encoded into a retrieval vector and a grounding seed. The
//! retrieval vector finds the nearest training questions, whose delexicalized
//! SQL pattern is adopted; a pointer decoder then fills the pattern's column
//! and value slots from the question and table headers.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod grounder;
pub mod model;
pub mod nn;
pub mod retriever;
pub mod sql_logic;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
