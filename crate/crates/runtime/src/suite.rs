//! Assembles a tool registry from descriptors, with in-process stubs
//! available for `inproc` endpoints.

use std::collections::BTreeMap;
use std::sync::Arc;

use cfagent_core::{ArtifactStore, Clock};

use crate::stub_server::{stub_schema, StubHandler, EDIT_A, EDIT_B, STUB_TOOLS};
use crate::toolwire::{Endpoint, EndpointSpec, RegistryError, ToolDescriptor, Toolwire};
use crate::wire::{FaultPlan, ServerOptions, ServerStats};

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

pub fn default_capacities() -> BTreeMap<String, usize> {
    BTreeMap::from([("gpu".into(), 2), ("cpu".into(), 4)])
}

/// The stub suite: editors on `gpu` slots with `edit_a` falling back to
/// `edit_b`, everything else on `cpu`.
pub fn default_descriptors() -> Vec<ToolDescriptor> {
    STUB_TOOLS
        .iter()
        .map(|&tool| {
            let editor = matches!(tool, EDIT_A | EDIT_B);
            ToolDescriptor {
                name: tool.into(),
                schema: stub_schema(tool).expect("stub schema"),
                endpoint: EndpointSpec::Inproc { stub: tool.into() },
                capacity_class: if editor { "gpu" } else { "cpu" }.into(),
                timeout_ms: DEFAULT_TIMEOUT_MS,
                fallbacks: if tool == EDIT_A { vec![EDIT_B.into()] } else { vec![] },
                instances: 2,
            }
        })
        .collect()
}

/// Test and bench hooks applied to in-process stubs only.
#[derive(Clone, Default)]
pub struct SuiteHooks {
    /// Fault schedule per tool name.
    pub faults: BTreeMap<String, FaultPlan>,
    /// Server-side counters per capacity class.
    pub stats: BTreeMap<String, Arc<ServerStats>>,
}

impl SuiteHooks {
    pub fn fault(mut self, tool: &str, plan: FaultPlan) -> Self {
        self.faults.insert(tool.into(), plan);
        self
    }

    pub fn count_class(mut self, class: &str) -> (Self, Arc<ServerStats>) {
        let stats = Arc::new(ServerStats::default());
        self.stats.insert(class.into(), stats.clone());
        (self, stats)
    }
}

pub fn resolve_endpoint(
    descriptor: &ToolDescriptor,
    store: &Arc<ArtifactStore>,
    hooks: &SuiteHooks,
) -> Result<Endpoint, RegistryError> {
    Ok(match &descriptor.endpoint {
        EndpointSpec::Subprocess { command } => {
            let (program, args) = command.split_first().ok_or_else(|| RegistryError::Spawn {
                tool: descriptor.name.clone(),
                message: "empty command".into(),
            })?;
            Endpoint::Subprocess { program: program.clone(), args: args.to_vec() }
        }
        EndpointSpec::Tcp { addr } => Endpoint::Tcp { addr: addr.clone() },
        EndpointSpec::Inproc { stub } => {
            if !STUB_TOOLS.contains(&stub.as_str()) {
                return Err(RegistryError::Spawn { tool: descriptor.name.clone(), message: format!("no stub named {stub}") });
            }
            let mut options = ServerOptions::with_faults(hooks.faults.get(&descriptor.name).cloned().unwrap_or_default());
            options.stats = hooks.stats.get(&descriptor.capacity_class).cloned();
            Endpoint::Local { handler: Arc::new(StubHandler::single(store.clone(), stub)), options }
        }
    })
}

pub fn build_toolwire(
    descriptors: &[ToolDescriptor],
    capacities: BTreeMap<String, usize>,
    store: &Arc<ArtifactStore>,
    clock: Arc<dyn Clock>,
    hooks: &SuiteHooks,
) -> Result<Toolwire, RegistryError> {
    let mut tw = Toolwire::new(capacities, clock);
    for d in descriptors {
        let endpoint = resolve_endpoint(d, store, hooks)?;
        tw.register(d.clone(), endpoint)?;
    }
    tw.seal()?;
    Ok(tw)
}

/// Default stub suite over `store`.
pub fn stub_toolwire(store: &Arc<ArtifactStore>, clock: Arc<dyn Clock>, hooks: &SuiteHooks) -> Toolwire {
    build_toolwire(&default_descriptors(), default_capacities(), store, clock, hooks).expect("default suite is valid")
}

