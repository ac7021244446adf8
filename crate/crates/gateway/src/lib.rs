//! Service shell for the cfagent runtime: configuration, HTTP API, PNG
//! rendering, the bench harness and the command line.

pub mod bench;
pub mod cli;
pub mod config;
pub mod render;
pub mod server;
