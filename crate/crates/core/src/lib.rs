//! Domain core of the cfagent runtime.
//!
//! Everything here is synchronous and free of I/O beyond the optional
//! on-disk artifact store and event logs, so it also builds for
//! `wasm32-unknown-unknown`.

pub mod action;
pub mod cf;
pub mod colormap;
pub mod error;
pub mod events;
pub mod image;
pub mod metrics;
pub mod schema;
pub mod store;
pub mod stubs;
pub mod types;

pub use action::{parse_action, render_action, render_arg, Action, ArgValue, ParseError};
pub use error::{ArtifactError, StoreError};
pub use events::{Clock, EventKind, EventRecord, EventStore, FixedClock, SessionLog, SystemClock};
pub use image::{ArtifactId, ImageArtifact};
pub use metrics::{MetricBundle, Plane};
pub use schema::{ArgSpec, ArgType, ToolSchema};
pub use store::ArtifactStore;
pub use types::{AgentState, MemoryEntry, Query, ToolError, ToolResult};
