//! IO, configuration, backends and the end-to-end annotation pipeline around
//! `agentvote-core`.

pub mod backend;
pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod prefilter;
pub mod review;
pub mod runtime;
pub mod server;
pub mod tables;
