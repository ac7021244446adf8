//! Tool argument schemas and the closed-schema validator.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ArgValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgType {
    Int,
    Real,
    Bool,
    String,
    Artifact,
    List,
}

impl ArgType {
    /// Whether a value is acceptable for this declared type. Integers are
    /// accepted where reals are expected.
    pub fn accepts(self, value: &ArgValue) -> bool {
        matches!(
            (self, value),
            (ArgType::Int, ArgValue::Int(_))
                | (ArgType::Real, ArgValue::Real(_) | ArgValue::Int(_))
                | (ArgType::Bool, ArgValue::Bool(_))
                | (ArgType::String, ArgValue::Str(_))
                | (ArgType::Artifact, ArgValue::Artifact(_))
                | (ArgType::List, ArgValue::List(_))
        )
    }
}

impl fmt::Display for ArgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArgType::Int => "int",
            ArgType::Real => "real",
            ArgType::Bool => "bool",
            ArgType::String => "string",
            ArgType::Artifact => "artifact",
            ArgType::List => "list",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    #[serde(rename = "type")]
    pub ty: ArgType,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ToolSchema {
    pub args: BTreeMap<String, ArgSpec>,
    #[serde(default)]
    pub returns: String,
}

impl ToolSchema {
    pub fn new(returns: impl Into<String>) -> Self {
        Self {
            args: BTreeMap::new(),
            returns: returns.into(),
        }
    }

    pub fn required(mut self, name: &str, ty: ArgType) -> Self {
        self.args.insert(name.to_string(), ArgSpec { ty, required: true });
        self
    }

    pub fn optional(mut self, name: &str, ty: ArgType) -> Self {
        self.args.insert(name.to_string(), ArgSpec { ty, required: false });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingRequired(String),
    UnknownArg(String),
    WrongType { arg: String, expected: ArgType, found: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingRequired(name) => write!(f, "missing required arg {name}"),
            Violation::UnknownArg(name) => write!(f, "unknown arg {name}"),
            Violation::WrongType { arg, expected, found } => {
                write!(f, "arg {arg}: expected {expected}, got {found}")
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown tool {0}")]
pub struct UnknownTool(pub String);

/// Checks a call against its schema. Final answers always validate.
pub fn validate_against_schema(action: &Action, schema: &ToolSchema) -> Result<(), Vec<Violation>> {
    let Action::Call { args, .. } = action else {
        return Ok(());
    };
    let mut violations = Vec::new();
    for (name, spec) in &schema.args {
        match args.get(name) {
            None if spec.required => violations.push(Violation::MissingRequired(name.clone())),
            Some(value) if !spec.ty.accepts(value) => violations.push(Violation::WrongType {
                arg: name.clone(),
                expected: spec.ty,
                found: value.type_name(),
            }),
            _ => {}
        }
    }
    for name in args.keys() {
        if !schema.args.contains_key(name) {
            violations.push(Violation::UnknownArg(name.clone()));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Looks the tool up in `schemas` first.
pub fn validate_with(
    action: &Action,
    schemas: &BTreeMap<String, ToolSchema>,
) -> Result<Result<(), Vec<Violation>>, UnknownTool> {
    match action {
        Action::Final { .. } => Ok(Ok(())),
        Action::Call { tool, .. } => {
            let schema = schemas.get(tool).ok_or_else(|| UnknownTool(tool.clone()))?;
            Ok(validate_against_schema(action, schema))
        }
    }
}
