//! Multi-agent LLM pipeline for qualitative thematic analysis.
//!
//! The crate is organised along the stages of the analysis:
//!
//! - [`domain`]: transcripts, clues, topic records, prompt pairs, codebooks.
//! - [`gateway`]: chat and embedding access with retries and record/replay fixtures.
//! - [`protocol`]: prompt templates and the parsers for every structured model output.
//! - [`instructor`]: the iterative instruction-refinement loop.
//! - [`thematizer`]: per-transcript theme identification, multi-run union, feedback regeneration.
//! - [`codebook`]: cross-transcript clustering into mutually exclusive codes.
//! - [`eval`]: comparison against a reference standard.
//! - [`pipeline`]: corpus-level drivers and run artifact layout.
//! - [`synthetic`]: a deterministic offline stand-in for an OpenAI-compatible endpoint.

pub mod codebook;
pub mod domain;
pub mod eval;
pub mod gateway;
pub mod instructor;
pub mod pipeline;
pub mod protocol;
pub mod synthetic;
pub mod thematizer;

mod persist;

pub use persist::{read_json, write_json};
