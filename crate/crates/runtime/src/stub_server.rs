//! Frame handler exposing the synthetic stub tools over a shared store.

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use serde_json::{json, Map, Value};

use cfagent_core::stubs::{self, Lesion, Region, StubError, SyntheticScene};
use cfagent_core::{ArgType, ArtifactId, ArtifactStore, ImageArtifact, ToolError, ToolSchema};

use crate::wire::FrameHandler;

pub const GEN_IMAGE: &str = "gen_image";
pub const CLASSIFY: &str = "classify";
pub const EDIT_A: &str = "edit_a";
pub const EDIT_B: &str = "edit_b";
pub const REPORT: &str = "report";
pub const SEGMENT: &str = "segment";

pub const STUB_TOOLS: [&str; 6] = [GEN_IMAGE, CLASSIFY, EDIT_A, EDIT_B, REPORT, SEGMENT];

pub fn is_editor(tool: &str) -> bool {
    matches!(tool, EDIT_A | EDIT_B)
}

/// Both editors share one schema so either can stand in for the other.
pub fn editor_schema() -> ToolSchema {
    ToolSchema::new("{image: artifact}")
        .required("image", ArgType::Artifact)
        .required("strength", ArgType::Real)
        .optional("cx", ArgType::Real)
        .optional("cy", ArgType::Real)
        .optional("r", ArgType::Real)
}

pub fn stub_schema(tool: &str) -> Option<ToolSchema> {
    Some(match tool {
        GEN_IMAGE => ToolSchema::new("{image: artifact}")
            .required("seed", ArgType::Int)
            .required("width", ArgType::Int)
            .required("height", ArgType::Int)
            .optional("lesion_cx", ArgType::Real)
            .optional("lesion_cy", ArgType::Real)
            .optional("lesion_r", ArgType::Real)
            .optional("lesion_a", ArgType::Real),
        CLASSIFY => ToolSchema::new("{score: real}").required("image", ArgType::Artifact),
        EDIT_A | EDIT_B => editor_schema(),
        REPORT => ToolSchema::new("{findings: string, region?: {cx, cy, r}}").required("image", ArgType::Artifact),
        SEGMENT => ToolSchema::new("{mask: artifact}").required("image", ArgType::Artifact),
        _ => return None,
    })
}

fn err(code: &str, message: impl Into<String>) -> ToolError {
    ToolError { code: code.into(), message: message.into() }
}

fn stub_err(e: StubError) -> ToolError {
    err(e.code(), e.to_string())
}

fn obj(args: &Value) -> Result<&Map<String, Value>, ToolError> {
    args.as_object().ok_or_else(|| err("bad_args", "args must be an object"))
}

fn num(args: &Map<String, Value>, key: &str) -> Result<Option<f64>, ToolError> {
    match args.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| err("bad_args", format!("{key} must be a number"))),
    }
}

fn req_num(args: &Map<String, Value>, key: &str) -> Result<f64, ToolError> {
    num(args, key)?.ok_or_else(|| err("bad_args", format!("missing {key}")))
}

fn req_u64(args: &Map<String, Value>, key: &str) -> Result<u64, ToolError> {
    args.get(key).and_then(Value::as_u64).ok_or_else(|| err("bad_args", format!("{key} must be a non-negative integer")))
}

fn req_u32(args: &Map<String, Value>, key: &str) -> Result<u32, ToolError> {
    u32::try_from(req_u64(args, key)?).map_err(|_| err("bad_dimensions", format!("{key} too large")))
}

/// Optional disk given as `cx`/`cy`/`r` (all or none).
pub fn region_arg(args: &Map<String, Value>, prefix: &str) -> Result<Option<Region>, ToolError> {
    let parts = [
        num(args, &format!("{prefix}cx"))?,
        num(args, &format!("{prefix}cy"))?,
        num(args, &format!("{prefix}r"))?,
    ];
    match parts {
        [None, None, None] => Ok(None),
        [Some(cx), Some(cy), Some(r)] => Ok(Some(Region { cx, cy, r })),
        _ => Err(err("bad_region", format!("{prefix}cx, {prefix}cy and {prefix}r go together"))),
    }
}

pub fn artifact_payload(id: &ArtifactId) -> Value {
    Value::String(id.to_ref())
}

/// Serves the stub suite, optionally restricted to a subset of tools.
pub struct StubHandler {
    store: Arc<ArtifactStore>,
    tools: Vec<String>,
    single: Option<String>,
}

impl StubHandler {
    pub fn new(store: Arc<ArtifactStore>) -> Self {
        Self { store, tools: STUB_TOOLS.iter().map(|s| s.to_string()).collect(), single: None }
    }

    pub fn only(store: Arc<ArtifactStore>, tools: &[&str]) -> Self {
        Self { store, tools: tools.iter().map(|s| s.to_string()).collect(), single: None }
    }

    /// Answers every request with `stub`, whatever name the registry gave
    /// the tool.
    pub fn single(store: Arc<ArtifactStore>, stub: &str) -> Self {
        Self { store, tools: vec![stub.to_string()], single: Some(stub.to_string()) }
    }

    fn image(&self, args: &Map<String, Value>) -> Result<Arc<ImageArtifact>, ToolError> {
        let raw = args.get("image").and_then(Value::as_str).ok_or_else(|| err("bad_args", "missing image"))?;
        let id = ArtifactId::from_ref(raw).map_err(|e| err("bad_args", e.to_string()))?;
        self.store.get(&id).map_err(|e| err("unknown_artifact", e.to_string()))
    }

    fn put(&self, image: ImageArtifact) -> Result<ArtifactId, ToolError> {
        self.store.put(image).map_err(|e| err("storage", e.to_string()))
    }

    /// Synchronous dispatch; the async handler wraps this.
    pub fn call(&self, tool: &str, args: &Value) -> Result<Value, ToolError> {
        let tool = self.single.as_deref().unwrap_or(tool);
        if !self.tools.iter().any(|t| t == tool) {
            return Err(err("unknown_tool", format!("this server does not provide {tool}")));
        }
        let args = obj(args)?;
        match tool {
            GEN_IMAGE => {
                let lesion = region_arg(args, "lesion_")?
                    .map(|r| -> Result<Lesion, ToolError> {
                        Ok(Lesion { cx: r.cx, cy: r.cy, r: r.r, a: req_num(args, "lesion_a")? })
                    })
                    .transpose()?;
                let scene = SyntheticScene::new(req_u64(args, "seed")?, req_u32(args, "width")?, req_u32(args, "height")?, lesion)
                    .map_err(stub_err)?;
                let id = self.put(scene.to_artifact())?;
                Ok(json!({ "image": artifact_payload(&id) }))
            }
            CLASSIFY => {
                let img = self.image(args)?;
                Ok(json!({ "score": stubs::classify(&img.pixels) }))
            }
            EDIT_A | EDIT_B => {
                let img = self.image(args)?;
                let strength = req_num(args, "strength")?;
                let edited = if tool == EDIT_A {
                    stubs::edit_region(&img, region_arg(args, "")?, strength)
                } else {
                    stubs::edit_global(&img, strength)
                }
                .map_err(stub_err)?;
                let id = match edited {
                    Some(out) => self.put(out)?,
                    None => img.id.clone(),
                };
                Ok(json!({ "image": artifact_payload(&id) }))
            }
            REPORT => {
                let img = self.image(args)?;
                let report = stubs::report(&img).map_err(stub_err)?;
                Ok(serde_json::to_value(report).expect("report serializes"))
            }
            SEGMENT => {
                let img = self.image(args)?;
                let id = self.put(stubs::segment(&img))?;
                Ok(json!({ "mask": artifact_payload(&id) }))
            }
            other => Err(err("unknown_tool", format!("no stub named {other}"))),
        }
    }
}

#[async_trait]
impl FrameHandler for StubHandler {
    async fn handle(&self, tool: &str, args: &Value) -> Result<Value, ToolError> {
        self.call(tool, args)
    }

    fn tools(&self) -> Vec<String> {
        self.tools.clone()
    }
}

/// Schemas of the whole stub suite keyed by tool name.
pub fn stub_schemas() -> BTreeMap<String, ToolSchema> {
    STUB_TOOLS.iter().map(|t| (t.to_string(), stub_schema(t).expect("known stub"))).collect()
}
