use std::fmt;
use std::str::FromStr;

use super::xml::{self, Element};
use super::{check_errors, Extras, FormatError, Timestamp, ToolKind, Walker};

const ROOT: &str = "NCPVData";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DocRole {
    Archive,
    Readback,
}

impl DocRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DocRole::Archive => "archive",
            DocRole::Readback => "readback",
        }
    }
}

impl FromStr for DocRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "archive" => Ok(DocRole::Archive),
            "readback" => Ok(DocRole::Readback),
            other => Err(format!("unknown document role '{other}'")),
        }
    }
}

impl fmt::Display for DocRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An `id`/`name` pair as used by `<Type>`, `<Recipe>` and `<Tool>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NamedRef {
    pub id: Option<i64>,
    pub name: String,
}

impl NamedRef {
    pub fn new(id: Option<i64>, name: impl Into<String>) -> Self {
        NamedRef {
            id,
            name: name.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLink {
    pub timestamp: Timestamp,
    /// Archive-relative path.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetaDatum {
    pub name: String,
    /// Lexical value as written. Empty means the attribute is absent.
    pub value: String,
    pub units: String,
    pub comments: Option<String>,
    pub extras: Extras,
}

impl MetaDatum {
    pub fn new(name: impl Into<String>, value: impl Into<String>, units: impl Into<String>) -> Self {
        MetaDatum {
            name: name.into(),
            value: value.into(),
            units: units.into(),
            comments: None,
            extras: Extras::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Descriptor {
    pub name: String,
    pub units: String,
}

impl Descriptor {
    pub fn new(name: impl Into<String>, units: impl Into<String>) -> Self {
        Descriptor {
            name: name.into(),
            units: units.into(),
        }
    }
}

/// One self-described series. Datum values stay lexical; [`DataSeries::numeric`]
/// gives the parsed view.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataSeries {
    pub descriptor: Descriptor,
    pub data: Vec<String>,
    pub extras: Extras,
}

impl DataSeries {
    pub fn new(descriptor: Descriptor, data: Vec<String>) -> Self {
        DataSeries {
            descriptor,
            data,
            extras: Extras::default(),
        }
    }

    pub fn numeric(&self) -> Vec<Option<f64>> {
        self.data.iter().map(|s| parse_decimal(s)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parses a decimal lexeme (optional sign, digits, fraction, exponent).
/// Rejects `inf`, `nan` and other forms `f64::from_str` would otherwise accept.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    let first = body.chars().next()?;
    if !(first.is_ascii_digit() || first == '.') {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Aggregate {
    pub metadata: Vec<MetaDatum>,
    pub series: Vec<DataSeries>,
    pub extras: Extras,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDocument {
    pub role: DocRole,
    pub timestamp: Timestamp,
    pub doc_id: String,
    pub kind: ToolKind,
    /// Measurement type for characterization, recipe for processing.
    pub measurement_type: NamedRef,
    pub tool: NamedRef,
    pub operator_id: Option<i64>,
    pub data_file_link: FileLink,
    pub comments: String,
    pub aggregates: Vec<Aggregate>,
    pub extras: Extras,
    pub body_extras: Extras,
}

impl DataDocument {
    pub fn validate(&self) -> Result<(), FormatError> {
        let mut errors = Vec::new();
        if let Err(e) = check_relative_path(&self.data_file_link.file) {
            errors.push(e);
        }
        if self.tool.name.is_empty() {
            errors.push("Tool name must be nonempty".into());
        }
        for (i, agg) in self.aggregates.iter().enumerate() {
            for m in &agg.metadata {
                if m.name.is_empty() {
                    errors.push(format!("aggregate {i}: MetaData name must be nonempty"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(FormatError::InvariantViolation(errors.join("; ")))
        }
    }

    pub fn series(&self) -> impl Iterator<Item = &DataSeries> {
        self.aggregates.iter().flat_map(|a| a.series.iter())
    }
}

pub(crate) fn check_relative_path(p: &str) -> Result<(), String> {
    if p.is_empty() {
        return Err("DataFileLink file must be nonempty".into());
    }
    if p.starts_with('/') || p.starts_with('\\') {
        return Err(format!("DataFileLink file '{p}' must be archive-relative"));
    }
    if p.split(['/', '\\']).any(|c| c == "..") {
        return Err(format!("DataFileLink file '{p}' must not contain '..'"));
    }
    Ok(())
}

fn body_names(kind: ToolKind) -> (&'static str, &'static str) {
    match kind {
        ToolKind::Characterization => ("Characterization", "Type"),
        ToolKind::Processing => ("Processing", "Recipe"),
    }
}

pub fn decode_data_document(bytes: &[u8]) -> Result<DataDocument, FormatError> {
    let root = xml::parse(bytes)?;
    if root.name != ROOT {
        return Err(FormatError::SchemaViolation(vec![format!(
            "root element must be <{ROOT}>, found <{}>",
            root.name
        )]));
    }
    let mut errors = Vec::new();
    let mut w = Walker::new(&root, ROOT.to_string());

    let role = w
        .required_attr("role", &mut errors)
        .and_then(|r| r.parse::<DocRole>().map_err(|e| errors.push(e)).ok());
    let timestamp = w.timestamp_attr("timestamp", &mut errors);
    let doc_id = w.attr("id").unwrap_or_default().to_string();

    let chars = w.children("Characterization");
    let procs = w.children("Processing");
    let body = match (chars.as_slice(), procs.as_slice()) {
        ([c], []) => Some((ToolKind::Characterization, *c)),
        ([], [p]) => Some((ToolKind::Processing, *p)),
        _ => {
            errors.push(format!(
                "exactly one <Characterization> or <Processing> required in {ROOT}"
            ));
            None
        }
    };

    let decoded_body = body.and_then(|(kind, el)| decode_body(kind, el, &mut errors));
    let extras = w.finish();
    check_errors(errors)?;
    let body = decoded_body.expect("no errors implies body");

    Ok(DataDocument {
        role: role.expect("checked"),
        timestamp: timestamp.expect("checked"),
        doc_id,
        kind: body.kind,
        measurement_type: body.measurement_type,
        tool: body.tool,
        operator_id: body.operator_id,
        data_file_link: body.link,
        comments: body.comments,
        aggregates: body.aggregates,
        extras,
        body_extras: body.extras,
    })
}

struct Body {
    kind: ToolKind,
    measurement_type: NamedRef,
    tool: NamedRef,
    operator_id: Option<i64>,
    link: FileLink,
    comments: String,
    aggregates: Vec<Aggregate>,
    extras: Extras,
}

fn named_ref(w: &mut Walker<'_>, name: &str, errors: &mut Vec<String>) -> Option<NamedRef> {
    let el = w.required_child(name, errors)?;
    let mut rw = Walker::new(el, w.child_path(name));
    let id = rw.int_attr("id", errors);
    let label = rw.required_attr("name", errors)?.to_string();
    Some(NamedRef { id, name: label })
}

fn decode_body(kind: ToolKind, el: &Element, errors: &mut Vec<String>) -> Option<Body> {
    let (body_name, type_name) = body_names(kind);
    let before = errors.len();
    let mut w = Walker::new(el, format!("{ROOT}/{body_name}"));

    let measurement_type = named_ref(&mut w, type_name, errors);
    let tool = named_ref(&mut w, "Tool", errors);
    if matches!(&tool, Some(t) if t.name.is_empty()) {
        errors.push("Tool name must be nonempty".into());
    }
    let operator_id = w.optional_child("Operator", errors).and_then(|op| {
        let mut ow = Walker::new(op, w.child_path("Operator"));
        ow.int_attr("id", errors)
    });
    let link = w.required_child("DataFileLink", errors).and_then(|l| {
        let mut lw = Walker::new(l, w.child_path("DataFileLink"));
        let ts = lw.timestamp_attr("timestamp", errors);
        let file = lw.required_attr("file", errors)?.to_string();
        if let Err(e) = check_relative_path(&file) {
            errors.push(e);
        }
        Some(FileLink {
            timestamp: ts?,
            file,
        })
    });
    let comments = w
        .optional_child("Comments", errors)
        .map(|c| c.text_content())
        .unwrap_or_default();

    let agg_path = w.child_path("Aggregate");
    let aggregates: Vec<Aggregate> = w
        .children("Aggregate")
        .into_iter()
        .enumerate()
        .filter_map(|(i, a)| decode_aggregate(a, format!("{agg_path}[{i}]"), errors))
        .collect();

    let extras = w.finish();
    if errors.len() > before {
        return None;
    }
    Some(Body {
        kind,
        measurement_type: measurement_type?,
        tool: tool?,
        operator_id,
        link: link?,
        comments,
        aggregates,
        extras,
    })
}

fn decode_aggregate(el: &Element, path: String, errors: &mut Vec<String>) -> Option<Aggregate> {
    let before = errors.len();
    let mut w = Walker::new(el, path);
    let meta_path = w.child_path("MetaData");
    let metadata: Vec<MetaDatum> = w
        .children("MetaData")
        .into_iter()
        .filter_map(|m| {
            let mut mw = Walker::new(m, meta_path.clone());
            let name = mw.nonempty_attr("name", errors).map(str::to_string);
            let units = mw.required_attr("units", errors).map(str::to_string);
            let value = mw.attr("value").unwrap_or_default().to_string();
            let comments = mw.attr("comments").map(str::to_string);
            let extras = mw.finish();
            Some(MetaDatum {
                name: name?,
                value,
                units: units?,
                comments,
                extras,
            })
        })
        .collect();

    let data_path = w.child_path("Data");
    let series: Vec<DataSeries> = w
        .children("Data")
        .into_iter()
        .filter_map(|d| {
            let mut dw = Walker::new(d, data_path.clone());
            let desc_el = dw.required_child("descriptor", errors)?;
            let leftover = dw.finish();
            if !leftover.is_empty() {
                errors.push(format!("unexpected content in {data_path}"));
            }
            let mut sw = Walker::new(desc_el, format!("{data_path}/descriptor"));
            let name = sw.required_attr("name", errors).map(str::to_string);
            let units = sw.required_attr("units", errors).map(str::to_string);
            let datum_path = sw.child_path("datum");
            let data: Vec<String> = sw
                .children("datum")
                .into_iter()
                .filter_map(|dt| {
                    let mut tw = Walker::new(dt, datum_path.clone());
                    tw.required_attr("value", errors).map(str::to_string)
                })
                .collect();
            let extras = sw.finish();
            Some(DataSeries {
                descriptor: Descriptor {
                    name: name?,
                    units: units?,
                },
                data,
                extras,
            })
        })
        .collect();

    let extras = w.finish();
    if errors.len() > before {
        return None;
    }
    Some(Aggregate {
        metadata,
        series,
        extras,
    })
}

pub fn encode_data_document(doc: &DataDocument) -> Result<Vec<u8>, FormatError> {
    doc.validate()?;
    let (body_name, type_name) = body_names(doc.kind);

    let mut body = Element::new(body_name)
        .child(named_element(type_name, &doc.measurement_type))
        .child(named_element("Tool", &doc.tool));
    if let Some(op) = doc.operator_id {
        body = body.child(Element::new("Operator").attr("id", op.to_string()));
    }
    body = body
        .child(
            Element::new("DataFileLink")
                .attr("timestamp", doc.data_file_link.timestamp.as_str())
                .attr("file", &doc.data_file_link.file),
        )
        .child(Element::new("Comments").text(&doc.comments));
    for agg in &doc.aggregates {
        body = body.child(encode_aggregate(agg));
    }

    let root = Element::new(ROOT)
        .attr("role", doc.role.as_str())
        .attr("timestamp", doc.timestamp.as_str())
        .attr("id", &doc.doc_id)
        .child(doc.body_extras.apply(body));
    Ok(xml::write_document(&doc.extras.apply(root)))
}

fn named_element(name: &str, r: &NamedRef) -> Element {
    let mut el = Element::new(name);
    if let Some(id) = r.id {
        el = el.attr("id", id.to_string());
    }
    el.attr("name", &r.name)
}

fn encode_aggregate(agg: &Aggregate) -> Element {
    let mut el = Element::new("Aggregate");
    for m in &agg.metadata {
        let mut me = Element::new("MetaData");
        if let Some(c) = &m.comments {
            me = me.attr("comments", c);
        }
        me = me.attr("units", &m.units);
        if !m.value.is_empty() {
            me = me.attr("value", &m.value);
        }
        me = me.attr("name", &m.name);
        el = el.child(m.extras.apply(me));
    }
    for s in &agg.series {
        let mut desc = Element::new("descriptor")
            .attr("units", &s.descriptor.units)
            .attr("name", &s.descriptor.name);
        for v in &s.data {
            desc = desc.child(Element::new("datum").attr("value", v));
        }
        el = el.child(Element::new("Data").child(s.extras.apply(desc)));
    }
    agg.extras.apply(el)
}
