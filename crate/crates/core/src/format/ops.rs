use std::fmt;
use std::str::FromStr;

use super::xml::{self, Element};
use super::{check_errors, Extras, FormatError, Timestamp, ToolInfo, ToolKind, Walker};

const ROOT: &str = "NCPVops";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpsRole {
    Transfer,
    Update,
    Readback,
    Test,
    Ack,
    Error,
}

impl OpsRole {
    pub const ALL: [OpsRole; 6] = [
        OpsRole::Transfer,
        OpsRole::Update,
        OpsRole::Readback,
        OpsRole::Test,
        OpsRole::Ack,
        OpsRole::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpsRole::Transfer => "transfer",
            OpsRole::Update => "update",
            OpsRole::Readback => "readback",
            OpsRole::Test => "test",
            OpsRole::Ack => "ack",
            OpsRole::Error => "error",
        }
    }

    /// Roles that ask the receiver to do something and therefore name a target.
    pub fn is_command(self) -> bool {
        matches!(
            self,
            OpsRole::Transfer | OpsRole::Update | OpsRole::Readback | OpsRole::Test
        )
    }

    pub fn is_reply(self) -> bool {
        matches!(self, OpsRole::Ack | OpsRole::Error)
    }
}

impl FromStr for OpsRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        OpsRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role '{s}'"))
    }
}

impl fmt::Display for OpsRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a command message refers to: a file on an instrument share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub source_path: String,
    pub source_host: String,
    /// Archive-relative path, set once the file has been harvested.
    pub archive_path: Option<String>,
    pub tool: ToolInfo,
    pub sample_id: Option<String>,
    pub operator_username: Option<String>,
    pub extras: Extras,
    pub source_extras: Extras,
    pub tool_extras: Extras,
}

impl Target {
    pub fn new(source_path: impl Into<String>, source_host: impl Into<String>, tool: ToolInfo) -> Self {
        Target {
            source_path: source_path.into(),
            source_host: source_host.into(),
            archive_path: None,
            tool,
            sample_id: None,
            operator_username: None,
            extras: Extras::default(),
            source_extras: Extras::default(),
            tool_extras: Extras::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsStatus {
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsMessage {
    pub role: OpsRole,
    pub timestamp: Timestamp,
    pub target: Option<Target>,
    pub status: Option<OpsStatus>,
    pub extras: Extras,
}

impl OpsMessage {
    pub fn command(role: OpsRole, target: Target) -> Self {
        OpsMessage {
            role,
            timestamp: Timestamp::now(),
            target: Some(target),
            status: None,
            extras: Extras::default(),
        }
    }

    pub fn ack(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::reply(OpsRole::Ack, code, detail)
    }

    pub fn error(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::reply(OpsRole::Error, code, detail)
    }

    fn reply(role: OpsRole, code: impl Into<String>, detail: impl Into<String>) -> Self {
        OpsMessage {
            role,
            timestamp: Timestamp::now(),
            target: None,
            status: Some(OpsStatus {
                code: code.into(),
                detail: detail.into(),
            }),
            extras: Extras::default(),
        }
    }

    /// Liveness ping. The target names the sending component.
    pub fn ping(component: &str, host: &str) -> Self {
        Self::command(
            OpsRole::Test,
            Target::new("", host, ToolInfo::new(component, ToolKind::Processing)),
        )
    }

    pub fn status_code(&self) -> Option<&str> {
        self.status.as_ref().map(|s| s.code.as_str())
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let mut errors = Vec::new();
        if self.role.is_command() && self.target.is_none() {
            errors.push(format!("role={} requires <Target>", self.role));
        }
        if self.role.is_reply() != self.status.is_some() {
            errors.push(format!(
                "<Status> must be present exactly when role is ack or error (role={})",
                self.role
            ));
        }
        if let Some(t) = &self.target {
            if t.tool.name.is_empty() {
                errors.push("ToolInfo name must be nonempty".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(FormatError::InvariantViolation(errors.join("; ")))
        }
    }
}

pub fn decode_ops_message(bytes: &[u8]) -> Result<OpsMessage, FormatError> {
    let root = xml::parse(bytes)?;
    let mut errors = Vec::new();
    if root.name != ROOT {
        return Err(FormatError::SchemaViolation(vec![format!(
            "root element must be <{ROOT}>, found <{}>",
            root.name
        )]));
    }
    let mut w = Walker::new(&root, ROOT.to_string());

    let role = match w.attr("role") {
        None => {
            errors.push("role required".to_string());
            None
        }
        Some(raw) => match raw.parse::<OpsRole>() {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(e);
                None
            }
        },
    };
    let timestamp = w.timestamp_attr("timestamp", &mut errors);

    let target = w
        .optional_child("Target", &mut errors)
        .and_then(|el| decode_target(el, w.child_path("Target"), &mut errors));

    let status = w.optional_child("Status", &mut errors).and_then(|el| {
        let mut sw = Walker::new(el, w.child_path("Status"));
        let code = sw.nonempty_attr("code", &mut errors)?.to_string();
        let detail = sw.attr("detail").unwrap_or_default().to_string();
        Some(OpsStatus { code, detail })
    });

    if let Some(role) = role {
        if role.is_command() && target.is_none() && !errors.iter().any(|e| e.contains("Target")) {
            errors.push(format!("<Target> required for role={role}"));
        }
        if role.is_reply() && status.is_none() {
            errors.push(format!("<Status> required for role={role}"));
        }
        if !role.is_reply() && status.is_some() {
            errors.push(format!("<Status> not allowed for role={role}"));
        }
    }

    let extras = w.finish();
    check_errors(errors)?;
    Ok(OpsMessage {
        role: role.expect("checked"),
        timestamp: timestamp.expect("checked"),
        target,
        status,
        extras,
    })
}

fn decode_target(el: &Element, path: String, errors: &mut Vec<String>) -> Option<Target> {
    let mut w = Walker::new(el, path);
    let before = errors.len();

    let source = w.required_child("Source", errors);
    let (source_path, source_host, archive_path, source_extras) = match source {
        Some(s) => {
            let mut sw = Walker::new(s, w.child_path("Source"));
            let p = sw.required_attr("path", errors).map(str::to_string);
            let h = sw.required_attr("host", errors).map(str::to_string);
            let a = sw.attr("archive").map(str::to_string);
            (p, h, a, sw.finish())
        }
        None => (None, None, None, Extras::default()),
    };

    let tool = w.required_child("ToolInfo", errors).and_then(|t| {
        let mut tw = Walker::new(t, w.child_path("ToolInfo"));
        let name = tw.nonempty_attr("name", errors).map(str::to_string);
        let kind = match tw.required_attr("type", errors) {
            Some(raw) => match raw.parse::<ToolKind>() {
                Ok(k) => Some(k),
                Err(e) => {
                    errors.push(e);
                    None
                }
            },
            None => None,
        };
        let id = tw.int_attr("id", errors);
        let extras = tw.finish();
        Some((
            ToolInfo {
                name: name?,
                kind: kind?,
                id,
            },
            extras,
        ))
    });

    let sample_id = w
        .optional_child("SampleID", errors)
        .map(|s| s.text_content());

    let operator_username = w.optional_child("Operator", errors).and_then(|op| {
        let mut ow = Walker::new(op, w.child_path("Operator"));
        let user = ow.optional_child("Username", errors).map(|u| u.text_content());
        let leftover = ow.finish();
        if !leftover.is_empty() {
            errors.push(format!("unexpected content in {}/Operator", w.path));
        }
        user
    });

    let extras = w.finish();
    if errors.len() > before {
        return None;
    }
    let (tool, tool_extras) = tool?;
    Some(Target {
        source_path: source_path?,
        source_host: source_host?,
        archive_path,
        tool,
        sample_id,
        operator_username,
        extras,
        source_extras,
        tool_extras,
    })
}

pub fn encode_ops_message(msg: &OpsMessage) -> Result<Vec<u8>, FormatError> {
    msg.validate()?;
    let mut root = Element::new(ROOT)
        .attr("role", msg.role.as_str())
        .attr("timestamp", msg.timestamp.as_str());
    if let Some(t) = &msg.target {
        let mut source = Element::new("Source")
            .attr("path", &t.source_path)
            .attr("host", &t.source_host);
        if let Some(a) = &t.archive_path {
            source = source.attr("archive", a);
        }
        let mut tool = Element::new("ToolInfo")
            .attr("name", &t.tool.name)
            .attr("type", t.tool.kind.as_str());
        if let Some(id) = t.tool.id {
            tool = tool.attr("id", id.to_string());
        }
        let mut target = Element::new("Target")
            .child(t.source_extras.apply(source))
            .child(t.tool_extras.apply(tool));
        if let Some(s) = &t.sample_id {
            target = target.child(Element::new("SampleID").text(s));
        }
        if let Some(u) = &t.operator_username {
            target = target.child(Element::new("Operator").child(Element::new("Username").text(u)));
        }
        root = root.child(t.extras.apply(target));
    }
    if let Some(s) = &msg.status {
        let mut status = Element::new("Status").attr("code", &s.code);
        if !s.detail.is_empty() {
            status = status.attr("detail", &s.detail);
        }
        root = root.child(status);
    }
    Ok(xml::write_document(&msg.extras.apply(root)))
}
