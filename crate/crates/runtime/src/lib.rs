//! Async runtime: tool transport, tool registry, the counterfactual engine
//! and the session driver.

pub mod wire;
pub mod toolwire;
pub mod stub_server;
pub mod head;
pub mod engine;
pub mod agent;
pub mod suite;
