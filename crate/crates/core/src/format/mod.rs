//! The two XML wire formats: the `NCPVops` control message exchanged between
//! daemons and the `NCPVData` common data document.
//!
//! Both decoders collect every schema violation before rejecting a document.
//! Attributes and child elements a decoder does not recognise are kept in
//! [`Extras`] and written back out on encode.

mod data;
mod ops;
pub mod xml;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub use data::{
    decode_data_document, encode_data_document, Aggregate, DataDocument, DataSeries, Descriptor,
    parse_decimal, DocRole, FileLink, MetaDatum, NamedRef,
};
pub use ops::{
    decode_ops_message, encode_ops_message, OpsMessage, OpsRole, OpsStatus, Target,
};
use xml::Element;

/// Reconstructed XSD for the control message, shipped as documentation of the contract.
pub const OPS_SCHEMA: &str = include_str!("../../schemas/NCPVops_Schema.xsd");
/// Reconstructed XSD for the common data document.
pub const DATA_SCHEMA: &str = include_str!("../../schemas/NCPVData_Schema.xsd");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("schema violation: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// ISO-8601 instant, kept in the lexical form it was written in.
///
/// Both offset-qualified (`2001-12-17T09:30:47Z`) and local
/// (`2012-09-25T12:45:03`) forms are accepted; local forms are read as UTC.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Timestamp(String);

impl Timestamp {
    pub fn parse(s: &str) -> Result<Self, String> {
        parse_instant(s).map(|_| Timestamp(s.to_string()))
    }

    pub fn now() -> Self {
        Self::from_utc(Utc::now())
    }

    pub fn from_utc(t: DateTime<Utc>) -> Self {
        Timestamp(t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_utc(&self) -> DateTime<Utc> {
        parse_instant(&self.0).expect("validated on construction")
    }
}

fn parse_instant(s: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(format!("'{s}' is not an ISO-8601 timestamp"))
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Timestamp {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Timestamp::parse(&s)
    }
}

impl From<Timestamp> for String {
    fn from(t: Timestamp) -> String {
        t.0
    }
}

/// Whether a tool (and the events it records) characterizes or processes samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToolKind {
    Characterization,
    Processing,
}

impl ToolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::Characterization => "Characterization",
            ToolKind::Processing => "Processing",
        }
    }
}

impl FromStr for ToolKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "Characterization" => Ok(ToolKind::Characterization),
            "Processing" => Ok(ToolKind::Processing),
            other => Err(format!("unknown tool type '{other}'")),
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub kind: ToolKind,
    pub id: Option<i64>,
}

impl ToolInfo {
    pub fn new(name: impl Into<String>, kind: ToolKind) -> Self {
        ToolInfo {
            name: name.into(),
            kind,
            id: None,
        }
    }
}

/// Unrecognised attributes and child elements, preserved for re-emission.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Extras {
    pub attrs: Vec<(String, String)>,
    pub elements: Vec<Element>,
}

impl Extras {
    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty() && self.elements.is_empty()
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_attr(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.attrs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.attrs.push((key.to_string(), value)),
        }
    }

    fn apply(&self, mut el: Element) -> Element {
        el.attrs.extend(self.attrs.iter().cloned());
        el.children
            .extend(self.elements.iter().cloned().map(xml::Node::Element));
        el
    }
}

/// Walks one element during decoding, consuming the attributes and children
/// the schema knows about. Whatever remains becomes [`Extras`].
struct Walker<'a> {
    el: &'a Element,
    path: String,
    used_attrs: Vec<bool>,
    used_children: Vec<bool>,
}

impl<'a> Walker<'a> {
    fn new(el: &'a Element, path: String) -> Self {
        let child_count = el.elements().count();
        Walker {
            el,
            path,
            used_attrs: vec![false; el.attrs.len()],
            used_children: vec![false; child_count],
        }
    }

    fn attr(&mut self, key: &str) -> Option<&'a str> {
        let idx = self.el.attrs.iter().position(|(k, _)| k == key)?;
        self.used_attrs[idx] = true;
        Some(self.el.attrs[idx].1.as_str())
    }

    fn required_attr(&mut self, key: &str, errors: &mut Vec<String>) -> Option<&'a str> {
        let v = self.attr(key);
        if v.is_none() {
            errors.push(format!("{key} required on {}", self.path));
        }
        v
    }

    fn nonempty_attr(&mut self, key: &str, errors: &mut Vec<String>) -> Option<&'a str> {
        match self.required_attr(key, errors) {
            Some("") => {
                errors.push(format!("{key} must be nonempty on {}", self.path));
                None
            }
            other => other,
        }
    }

    fn int_attr(&mut self, key: &str, errors: &mut Vec<String>) -> Option<i64> {
        let raw = self.attr(key)?;
        match raw.trim().parse::<i64>() {
            Ok(v) => Some(v),
            Err(_) => {
                errors.push(format!("{key}='{raw}' on {} is not an integer", self.path));
                None
            }
        }
    }

    fn timestamp_attr(&mut self, key: &str, errors: &mut Vec<String>) -> Option<Timestamp> {
        let raw = self.required_attr(key, errors)?;
        match Timestamp::parse(raw) {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("{key} on {}: {e}", self.path));
                None
            }
        }
    }

    /// All direct children with `name`, marked used.
    fn children(&mut self, name: &str) -> Vec<&'a Element> {
        let mut out = Vec::new();
        for (i, child) in self.el.elements().enumerate() {
            if child.name == name {
                self.used_children[i] = true;
                out.push(child);
            }
        }
        out
    }

    fn optional_child(&mut self, name: &str, errors: &mut Vec<String>) -> Option<&'a Element> {
        let found = self.children(name);
        if found.len() > 1 {
            errors.push(format!("at most one <{name}> allowed in {}", self.path));
        }
        found.into_iter().next()
    }

    fn required_child(&mut self, name: &str, errors: &mut Vec<String>) -> Option<&'a Element> {
        let found = self.optional_child(name, errors);
        if found.is_none() {
            errors.push(format!("<{name}> required in {}", self.path));
        }
        found
    }

    fn child_path(&self, name: &str) -> String {
        format!("{}/{name}", self.path)
    }

    fn finish(self) -> Extras {
        let attrs = self
            .el
            .attrs
            .iter()
            .zip(&self.used_attrs)
            .filter(|(_, used)| !**used)
            .map(|(a, _)| a.clone())
            .collect();
        let elements = self
            .el
            .elements()
            .zip(&self.used_children)
            .filter(|(_, used)| !**used)
            .map(|(e, _)| e.clone())
            .collect();
        Extras { attrs, elements }
    }
}

fn check_errors(errors: Vec<String>) -> Result<(), FormatError> {
    if errors.is_empty() {
        Ok(())
    } else {
        Err(FormatError::SchemaViolation(errors))
    }
}
