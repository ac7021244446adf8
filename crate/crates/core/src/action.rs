//! The code-action language.
//!
//! The head emits exactly one action per step: a single tool call or the
//! reserved `final_answer(...)`. The grammar is closed, so nothing the head
//! writes is ever evaluated as code.
//!
//! ```text
//! action   := call | final
//! final    := "final_answer" "(" args ")"
//! call     := ident "(" args? ")"
//! args     := arg ("," arg)*
//! arg      := ident "=" value
//! value    := int | real | bool | string | artifact | list
//! artifact := "@" hex+
//! list     := "[" (value ("," value)*)? "]"
//! ident    := [a-z_][a-z0-9_]*
//! ```
//!
//! Numbers are plain integers or decimals (`-`? digits, optionally `.`
//! digits); there is no exponent form. Strings are double-quoted with the
//! escapes `\"`, `\\` and `\n`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ArtifactId;

pub const FINAL_ANSWER: &str = "final_answer";

#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
    Artifact(ArtifactId),
    List(Vec<ArgValue>),
}

impl ArgValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            ArgValue::Int(_) => "int",
            ArgValue::Real(_) => "real",
            ArgValue::Bool(_) => "bool",
            ArgValue::Str(_) => "string",
            ArgValue::Artifact(_) => "artifact",
            ArgValue::List(_) => "list",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ArgValue::Int(i) => Some(*i as f64),
            ArgValue::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ArgValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_artifact(&self) -> Option<&ArtifactId> {
        match self {
            ArgValue::Artifact(id) => Some(id),
            _ => None,
        }
    }

    /// Wire form: artifacts become `"@<hex>"` strings.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            ArgValue::Int(i) => Value::from(*i),
            ArgValue::Real(r) => Value::from(*r),
            ArgValue::Bool(b) => Value::from(*b),
            ArgValue::Str(s) => Value::from(s.clone()),
            ArgValue::Artifact(id) => Value::from(id.to_ref()),
            ArgValue::List(items) => Value::Array(items.iter().map(ArgValue::to_json).collect()),
        }
    }

    /// Inverse of [`ArgValue::to_json`]. Strings of the form `@<hex>` are
    /// read back as artifact references.
    pub fn from_json(value: &serde_json::Value) -> Option<ArgValue> {
        use serde_json::Value;
        Some(match value {
            Value::Bool(b) => ArgValue::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) if !n.is_f64() => ArgValue::Int(i),
                _ => ArgValue::Real(n.as_f64()?),
            },
            Value::String(s) => match ArtifactId::from_ref(s) {
                Ok(id) if s.starts_with('@') => ArgValue::Artifact(id),
                _ => ArgValue::Str(s.clone()),
            },
            Value::Array(items) => {
                ArgValue::List(items.iter().map(ArgValue::from_json).collect::<Option<_>>()?)
            }
            Value::Null | Value::Object(_) => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Call {
        tool: String,
        args: BTreeMap<String, ArgValue>,
    },
    Final {
        answer: String,
        artifacts: Vec<ArtifactId>,
    },
}

impl Action {
    pub fn call(tool: impl Into<String>, args: impl IntoIterator<Item = (&'static str, ArgValue)>) -> Self {
        Action::Call {
            tool: tool.into(),
            args: args.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn final_answer(answer: impl Into<String>) -> Self {
        Action::Final {
            answer: answer.into(),
            artifacts: Vec::new(),
        }
    }

    pub fn tool_name(&self) -> &str {
        match self {
            Action::Call { tool, .. } => tool,
            Action::Final { .. } => FINAL_ANSWER,
        }
    }

    pub fn is_final(&self) -> bool {
        matches!(self, Action::Final { .. })
    }

    pub fn render(&self) -> String {
        render_action(self)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_action(self))
    }
}

// Actions travel through JSON (event log, scenario files) in rendered form.
impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&render_action(self))
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_action(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at byte {position}: expected {expected}")]
    SyntaxError { position: usize, expected: &'static str },
    #[error("duplicate argument {name} at byte {position}")]
    DuplicateArg { name: String, position: usize },
    #[error("unknown escape at byte {position}")]
    UnknownEscape { position: usize },
    #[error("invalid final_answer at byte {position}: {message}")]
    InvalidFinal { position: usize, message: String },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::SyntaxError { position, .. }
            | ParseError::DuplicateArg { position, .. }
            | ParseError::UnknownEscape { position }
            | ParseError::InvalidFinal { position, .. } => *position,
        }
    }
}

pub fn parse_action(text: &str) -> Result<Action, ParseError> {
    let mut p = Parser { src: text.as_bytes(), text, pos: 0 };
    p.skip_ws();
    let action = p.action()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("end of input"));
    }
    Ok(action)
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn error(&self, expected: &'static str) -> ParseError {
        ParseError::SyntaxError { position: self.pos, expected }
    }

    fn expect(&mut self, byte: u8, expected: &'static str) -> Result<(), ParseError> {
        self.skip_ws();
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn ident(&mut self) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'a'..=b'z' | b'_') => self.pos += 1,
            _ => return Err(self.error("identifier")),
        }
        while matches!(self.peek(), Some(b'a'..=b'z' | b'0'..=b'9' | b'_')) {
            self.pos += 1;
        }
        Ok(&self.text[start..self.pos])
    }

    fn action(&mut self) -> Result<Action, ParseError> {
        let tool = self.ident()?;
        self.expect(b'(', "'('")?;
        if tool == FINAL_ANSWER {
            let open = self.pos;
            let args = self.args()?;
            self.expect(b')', "',' or ')'")?;
            return final_from_args(args, open);
        }
        self.skip_ws();
        let args = if self.peek() == Some(b')') {
            Vec::new()
        } else {
            self.args()?
        };
        self.expect(b')', "',' or ')'")?;
        Ok(Action::Call {
            tool: tool.to_string(),
            args: args.into_iter().map(|(name, _, v)| (name, v)).collect(),
        })
    }

    fn args(&mut self) -> Result<Vec<(String, usize, ArgValue)>, ParseError> {
        let mut out: Vec<(String, usize, ArgValue)> = Vec::new();
        loop {
            self.skip_ws();
            let at = self.pos;
            let name = self.ident()?;
            if out.iter().any(|(n, _, _)| n == name) {
                return Err(ParseError::DuplicateArg { name: name.to_string(), position: at });
            }
            self.expect(b'=', "'='")?;
            let value = self.value()?;
            out.push((name.to_string(), at, value));
            self.skip_ws();
            if self.peek() == Some(b',') {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn value(&mut self) -> Result<ArgValue, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'"') => self.string().map(ArgValue::Str),
            Some(b'@') => {
                self.pos += 1;
                let start = self.pos;
                while self.peek().is_some_and(|b| b.is_ascii_hexdigit()) {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(self.error("hex digit"));
                }
                let id = ArtifactId::new(&self.text[start..self.pos]).expect("hex checked");
                Ok(ArgValue::Artifact(id))
            }
            Some(b'[') => {
                self.pos += 1;
                let mut items = Vec::new();
                self.skip_ws();
                if self.peek() == Some(b']') {
                    self.pos += 1;
                    return Ok(ArgValue::List(items));
                }
                loop {
                    items.push(self.value()?);
                    self.skip_ws();
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {
                            self.pos += 1;
                            return Ok(ArgValue::List(items));
                        }
                        _ => return Err(self.error("',' or ']'")),
                    }
                }
            }
            Some(b'-' | b'0'..=b'9') => self.number(),
            Some(b't') if self.src[self.pos..].starts_with(b"true") => {
                self.pos += 4;
                Ok(ArgValue::Bool(true))
            }
            Some(b'f') if self.src[self.pos..].starts_with(b"false") => {
                self.pos += 5;
                Ok(ArgValue::Bool(false))
            }
            _ => Err(self.error("value")),
        }
    }

    fn digits(&mut self) -> Result<(), ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            Err(self.error("digit"))
        } else {
            Ok(())
        }
    }

    fn number(&mut self) -> Result<ArgValue, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        self.digits()?;
        if self.peek() == Some(b'.') {
            self.pos += 1;
            self.digits()?;
            let real: f64 = self.text[start..self.pos].parse().expect("decimal literal");
            if !real.is_finite() {
                return Err(ParseError::SyntaxError { position: start, expected: "finite real" });
            }
            return Ok(ArgValue::Real(real));
        }
        self.text[start..self.pos]
            .parse()
            .map(ArgValue::Int)
            .map_err(|_| ParseError::SyntaxError { position: start, expected: "integer in i64 range" })
    }

    fn string(&mut self) -> Result<String, ParseError> {
        self.pos += 1; // opening quote
        let mut out = String::new();
        let mut run_start = self.pos;
        loop {
            match self.peek() {
                None => return Err(self.error("closing '\"'")),
                Some(b'"') => {
                    out.push_str(&self.text[run_start..self.pos]);
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'\\') => {
                    out.push_str(&self.text[run_start..self.pos]);
                    let at = self.pos;
                    let escaped = match self.src.get(self.pos + 1) {
                        Some(b'"') => '"',
                        Some(b'\\') => '\\',
                        Some(b'n') => '\n',
                        None => {
                            self.pos += 1;
                            return Err(self.error("escape character"));
                        }
                        Some(_) => return Err(ParseError::UnknownEscape { position: at }),
                    };
                    out.push(escaped);
                    self.pos += 2;
                    run_start = self.pos;
                }
                // Multi-byte UTF-8 sequences never contain '"' or '\\'.
                Some(_) => self.pos += 1,
            }
        }
    }
}

fn final_from_args(args: Vec<(String, usize, ArgValue)>, open: usize) -> Result<Action, ParseError> {
    let mut answer = None;
    let mut artifacts = Vec::new();
    for (name, position, value) in args {
        match (name.as_str(), value) {
            ("text", ArgValue::Str(s)) => answer = Some(s),
            ("artifacts", ArgValue::List(items)) => {
                for item in items {
                    match item {
                        ArgValue::Artifact(id) => artifacts.push(id),
                        other => {
                            return Err(ParseError::InvalidFinal {
                                position,
                                message: format!("artifacts must hold artifact refs, got {}", other.type_name()),
                            })
                        }
                    }
                }
            }
            (other, value) => {
                return Err(ParseError::InvalidFinal {
                    position,
                    message: format!("unexpected arg {other} of type {}", value.type_name()),
                })
            }
        }
    }
    match answer {
        Some(answer) => Ok(Action::Final { answer, artifacts }),
        None => Err(ParseError::InvalidFinal {
            position: open,
            message: "missing text".into(),
        }),
    }
}

pub fn render_action(action: &Action) -> String {
    let mut out = String::new();
    match action {
        Action::Call { tool, args } => {
            out.push_str(tool);
            out.push('(');
            for (i, (name, value)) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(name);
                out.push('=');
                render_value(value, &mut out);
            }
            out.push(')');
        }
        Action::Final { answer, artifacts } => {
            out.push_str(FINAL_ANSWER);
            out.push('(');
            if !artifacts.is_empty() {
                out.push_str("artifacts=[");
                for (i, id) in artifacts.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    out.push_str(&id.to_ref());
                }
                out.push_str("], ");
            }
            out.push_str("text=");
            render_string(answer, &mut out);
            out.push(')');
        }
    }
    out
}

/// Canonical text of a single argument value.
pub fn render_arg(value: &ArgValue) -> String {
    let mut out = String::new();
    render_value(value, &mut out);
    out
}

fn render_value(value: &ArgValue, out: &mut String) {
    match value {
        ArgValue::Int(i) => write!(out, "{i}").expect("string write"),
        ArgValue::Real(r) => out.push_str(&render_real(*r)),
        ArgValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        ArgValue::Str(s) => render_string(s, out),
        ArgValue::Artifact(id) => out.push_str(&id.to_ref()),
        ArgValue::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_value(item, out);
            }
            out.push(']');
        }
    }
}

/// Shortest round-tripping decimal, always with a fractional part.
pub fn render_real(r: f64) -> String {
    let s = format!("{r}");
    if s.contains('.') {
        s
    } else {
        s + ".0"
    }
}

fn render_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
}

#[cfg(test)]
mod tests {
    use super::*;

    fn art(hex: &str) -> ArgValue {
        ArgValue::Artifact(ArtifactId::new(hex).unwrap())
    }

    #[test]
    fn grammar_exemplar() {
        let a = parse_action(r#"classify(image=@ab12, target="lesion")"#).unwrap();
        assert_eq!(
            a,
            Action::call("classify", [("image", art("ab12")), ("target", ArgValue::Str("lesion".into()))])
        );
    }

    #[test]
    fn final_variant() {
        assert_eq!(
            parse_action(r#"final_answer(text="No finding")"#).unwrap(),
            Action::final_answer("No finding")
        );
        assert_eq!(render_action(&Action::final_answer("x")), r#"final_answer(text="x")"#);
        let with = Action::Final {
            answer: "done".into(),
            artifacts: vec![ArtifactId::new("ab").unwrap()],
        };
        assert_eq!(render_action(&with), r#"final_answer(artifacts=[@ab], text="done")"#);
        assert_eq!(parse_action(&render_action(&with)).unwrap(), with);
    }

    #[test]
    fn canonical_ordering() {
        let a = Action::call("edit", [("strength", ArgValue::Real(0.7)), ("image", art("ab12"))]);
        assert_eq!(render_action(&a), "edit(image=@ab12, strength=0.7)");
    }

    #[test]
    fn numbers_and_strings() {
        let a = parse_action(r#" t ( a = -3 , b = 1.0 , c = [ ] , d = "q\"\\\n" , e = false ) "#).unwrap();
        let Action::Call { args, .. } = &a else { panic!() };
        assert_eq!(args["a"], ArgValue::Int(-3));
        assert_eq!(args["b"], ArgValue::Real(1.0));
        assert_eq!(args["c"], ArgValue::List(vec![]));
        assert_eq!(args["d"], ArgValue::Str("q\"\\\n".into()));
        assert_eq!(args["e"], ArgValue::Bool(false));
        assert_eq!(render_action(&a), r#"t(a=-3, b=1.0, c=[], d="q\"\\\n", e=false)"#);
        assert_eq!(render_real(1e21), "1000000000000000000000.0");
        assert_eq!(render_real(0.1 + 0.2), "0.30000000000000004");
    }

    #[test]
    fn empty_call() {
        assert_eq!(parse_action("ping()").unwrap(), Action::call("ping", []));
        assert_eq!(render_action(&Action::call("ping", [])), "ping()");
    }

    #[test]
    fn malformed_positions() {
        let table: &[(&str, usize)] = &[
            ("", 0),
            ("Classify()", 0),
            ("classify", 8),
            ("classify(", 9),
            ("classify(image)", 14),
            ("classify(image=)", 15),
            ("classify(image=@)", 16),
            ("classify(image=@zz)", 16),
            ("classify(a=1,)", 13),
            ("classify(a=1 b=2)", 13),
            ("classify(a=1) x", 14),
            ("classify(a=1.)", 13),
            ("classify(a=-)", 12),
            ("classify(a=[1,])", 14),
            ("classify(a=[1 2])", 14),
            ("classify(a=\"abc)", 16),
            ("classify(a=tru)", 11),
            ("classify(a=1e5)", 12),
            ("final_answer()", 13),
            ("f(a=99999999999999999999)", 4),
        ];
        for (input, position) in table {
            let err = parse_action(input).unwrap_err();
            assert_eq!(err.position(), *position, "{input:?} -> {err}");
            assert!(matches!(err, ParseError::SyntaxError { .. }), "{input:?} -> {err:?}");
        }
    }

    #[test]
    fn other_errors() {
        assert_eq!(
            parse_action("f(a=1, b=2, a=3)").unwrap_err(),
            ParseError::DuplicateArg { name: "a".into(), position: 12 }
        );
        assert_eq!(parse_action(r#"f(s="a\tb")"#).unwrap_err(), ParseError::UnknownEscape { position: 6 });
        assert!(matches!(
            parse_action("final_answer(text=1)").unwrap_err(),
            ParseError::InvalidFinal { position: 13, .. }
        ));
        assert!(matches!(
            parse_action("final_answer(artifacts=[])").unwrap_err(),
            ParseError::InvalidFinal { .. }
        ));
    }

    #[test]
    fn json_value_bridge() {
        let v = ArgValue::List(vec![art("ab"), ArgValue::Int(2), ArgValue::Real(0.5), ArgValue::Str("x".into())]);
        assert_eq!(ArgValue::from_json(&v.to_json()).unwrap(), v);
        let j = serde_json::to_string(&Action::final_answer("ok")).unwrap();
        assert_eq!(j, r#""final_answer(text=\"ok\")""#);
    }
}
