//! Session service, HTTP API and command line for the thematic analysis
//! pipeline.
//!
//! - [`session`]: event-sourced review sessions and their on-disk logs
//! - [`http`]: the JSON API over [`session::SessionManager`]
//! - [`cli`]: every pipeline stage as a subcommand
//! - [`scenario`]: regeneration of the bundled fixture pack and artifacts

pub mod cli;
pub mod http;
pub mod scenario;
pub mod session;
