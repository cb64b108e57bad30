//! Schema-aware natural-language-to-SQL pipeline.
//!
//! A question flows through schema extraction, decomposition into a plan,
//! SQL generation with a bounded fallback ladder, and sandboxed validation.

pub mod app;
pub mod decomposer;
pub mod extractor;
pub mod fixtures;
pub mod gateway;
pub mod generator;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod validator;
