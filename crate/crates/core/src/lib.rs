//! Batch peer review of paper corpora with an LLM reviewer/chair hierarchy.

pub mod backend;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod util;
