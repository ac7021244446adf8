//! Service configuration: one JSON document plus two environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cfagent_runtime::agent::LoopConfig;
use cfagent_runtime::engine::EngineConfig;
use cfagent_runtime::head::{builtin_scenario, ScenarioError, ScriptedScenario};
use cfagent_runtime::suite::{default_capacities, default_descriptors};
use cfagent_runtime::toolwire::{EndpointSpec, ToolDescriptor};

pub const ENV_LISTEN: &str = "CFAGENT_LISTEN";
pub const ENV_DATA_DIR: &str = "CFAGENT_DATA_DIR";
pub const STUB_BINARY: &str = "cfagent-stub";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("capacity class {0} must have at least one slot")]
    BadCapacity(String),
    #[error("scenario directory {0} does not exist")]
    MissingScenarioDir(PathBuf),
    #[error("scenario {0}: {1}")]
    Scenario(String, ScenarioError),
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("t_max must be at least 1")]
    BadLoop,
}

/// Remote decision head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub url: String,
    #[serde(default = "default_head_timeout")]
    pub timeout_ms: u64,
}

fn default_head_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Empty means the stub suite, each tool in its own `cfagent-stub`
    /// subprocess.
    pub tools: Vec<ToolDescriptor>,
    pub capacities: BTreeMap<String, usize>,
    pub head: Option<HeadConfig>,
    pub scenario_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    #[serde(rename = "loop")]
    pub loop_defaults: LoopConfig,
    pub engine: EngineConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            tools: Vec::new(),
            capacities: default_capacities(),
            head: None,
            scenario_dir: None,
            data_dir: PathBuf::from("cfagent-data"),
            loop_defaults: LoopConfig::default(),
            engine: EngineConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        Self::from_json(&text)
    }

    /// Applies `CFAGENT_LISTEN` and `CFAGENT_DATA_DIR` from `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(listen) = lookup(ENV_LISTEN) {
            self.listen = listen;
        }
        if let Some(dir) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.data_dir.join("artifacts")
    }

    pub fn session_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (class, &slots) in &self.capacities {
            if slots == 0 {
                return Err(ConfigError::BadCapacity(class.clone()));
            }
        }
        if self.loop_defaults.t_max == 0 {
            return Err(ConfigError::BadLoop);
        }
        if let Some(dir) = &self.scenario_dir {
            if !dir.is_dir() {
                return Err(ConfigError::MissingScenarioDir(dir.clone()));
            }
            for entry in std::fs::read_dir(dir).map_err(|e| ConfigError::Read(dir.clone(), e))? {
                let path = entry.map_err(|e| ConfigError::Read(dir.clone(), e))?.path();
                if path.extension().is_some_and(|x| x == "json") {
                    load_scenario_file(&path)?;
                }
            }
        }
        Ok(())
    }

    /// Tool descriptors with the stub suite filled in when none are
    /// configured. `stub_program` is the `cfagent-stub` executable.
    pub fn resolved_tools(&self, stub_program: &Path) -> Vec<ToolDescriptor> {
        if !self.tools.is_empty() {
            return self.tools.clone();
        }
        stub_suite(stub_program, &self.artifact_dir(), &[])
    }

    /// A scenario from the scenario directory, else a built-in one.
    pub fn scenario(&self, name: &str) -> Result<ScriptedScenario, ConfigError> {
        if let Some(dir) = &self.scenario_dir {
            let path = dir.join(format!("{name}.json"));
            if path.is_file() {
                return load_scenario_file(&path);
            }
        }
        builtin_scenario(name).ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))
    }
}

fn load_scenario_file(path: &Path) -> Result<ScriptedScenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    let name = path.display().to_string();
    ScriptedScenario::from_json(&text).map_err(|e| ConfigError::Scenario(name, e))
}

/// The default descriptors with every tool served by a `cfagent-stub`
/// subprocess over the shared artifact directory. `extra` is appended to
/// each command line.
pub fn stub_suite(stub_program: &Path, artifact_dir: &Path, extra: &[String]) -> Vec<ToolDescriptor> {
    default_descriptors()
        .into_iter()
        .map(|mut d| {
            let mut command = vec![
                stub_program.display().to_string(),
                "--store".into(),
                artifact_dir.display().to_string(),
                "--tool".into(),
                d.name.clone(),
            ];
            command.extend(extra.iter().cloned());
            d.endpoint = EndpointSpec::Subprocess { command };
            d
        })
        .collect()
}

/// `cfagent-stub` next to the running executable, falling back to `PATH`.
pub fn sibling_stub_binary() -> PathBuf {
    std::env::current_exe()
        .ok()
        .and_then(|exe| {
            let dir = exe.parent()?;
            [dir.join(STUB_BINARY), dir.parent()?.join(STUB_BINARY)].into_iter().find(|p| p.is_file())
        })
        .unwrap_or_else(|| PathBuf::from(STUB_BINARY))
}
