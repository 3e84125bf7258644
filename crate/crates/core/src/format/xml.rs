//! Minimal owned XML element tree used by the wire formats.
//!
//! Parsing is delegated to `quick-xml`; serialization is done by hand so the
//! output layout (two-space indentation, attribute order) stays stable.

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::FormatError;

/// Node inside an [`Element`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Element {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<Node>,
}

impl Element {
    pub fn new(name: impl Into<String>) -> Self {
        Element {
            name: name.into(),
            attrs: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attrs.push((key.to_string(), value.into()));
        self
    }

    pub fn child(mut self, child: Element) -> Self {
        self.children.push(Node::Element(child));
        self
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        let text = text.into();
        if !text.is_empty() {
            self.children.push(Node::Text(text));
        }
        self
    }

    pub fn get_attr(&self, key: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    /// Concatenated direct text content.
    pub fn text_content(&self) -> String {
        self.children
            .iter()
            .filter_map(|n| match n {
                Node::Text(t) => Some(t.as_str()),
                Node::Element(_) => None,
            })
            .collect()
    }
}

/// Parses a UTF-8 document into its root element.
///
/// Whitespace-only text between elements is discarded, comments and
/// processing instructions are dropped.
pub fn parse(bytes: &[u8]) -> Result<Element, FormatError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| FormatError::MalformedXml(format!("input is not UTF-8: {e}")))?;
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(false);

    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| malformed(&reader, e.to_string()))?;
        match event {
            Event::Start(start) => {
                if root.is_some() {
                    return Err(malformed(&reader, "content after root element".into()));
                }
                stack.push(start_element(&reader, &start)?);
            }
            Event::Empty(start) => {
                if root.is_some() {
                    return Err(malformed(&reader, "content after root element".into()));
                }
                let el = start_element(&reader, &start)?;
                push_child(&mut stack, &mut root, el);
            }
            Event::End(_) => {
                let mut el = stack
                    .pop()
                    .ok_or_else(|| malformed(&reader, "unbalanced end tag".into()))?;
                drop_blank_text(&mut el);
                push_child(&mut stack, &mut root, el);
            }
            Event::Text(t) => {
                let s = t
                    .decode()
                    .map_err(|e| malformed(&reader, e.to_string()))?
                    .into_owned();
                let s = quick_xml::escape::unescape(&s)
                    .map_err(|e| malformed(&reader, e.to_string()))?
                    .into_owned();
                push_text(&mut stack, &reader, s)?;
            }
            Event::CData(c) => {
                let s = c
                    .decode()
                    .map_err(|e| malformed(&reader, e.to_string()))?
                    .into_owned();
                push_text(&mut stack, &reader, s)?;
            }
            Event::GeneralRef(r) => {
                let resolved = match r
                    .resolve_char_ref()
                    .map_err(|e| malformed(&reader, e.to_string()))?
                {
                    Some(c) => c.to_string(),
                    None => {
                        let name = r
                            .decode()
                            .map_err(|e| malformed(&reader, e.to_string()))?;
                        quick_xml::escape::resolve_predefined_entity(&name)
                            .ok_or_else(|| {
                                malformed(&reader, format!("unknown entity &{name};"))
                            })?
                            .to_string()
                    }
                };
                push_text(&mut stack, &reader, resolved)?;
            }
            Event::Eof => break,
            Event::Decl(_) | Event::PI(_) | Event::Comment(_) => {}
            Event::DocType(_) => {
                return Err(malformed(&reader, "DOCTYPE is not supported".into()));
            }
        }
    }

    if !stack.is_empty() {
        return Err(FormatError::MalformedXml(format!(
            "unexpected end of input inside <{}>",
            stack.last().map(|e| e.name.as_str()).unwrap_or("")
        )));
    }
    root.ok_or_else(|| FormatError::MalformedXml("no root element".into()))
}

fn malformed(reader: &Reader<&[u8]>, msg: String) -> FormatError {
    FormatError::MalformedXml(format!("at byte {}: {msg}", reader.buffer_position()))
}

fn start_element(reader: &Reader<&[u8]>, start: &BytesStart<'_>) -> Result<Element, FormatError> {
    let name = std::str::from_utf8(start.name().as_ref())
        .map_err(|e| malformed(reader, e.to_string()))?
        .to_string();
    let mut el = Element::new(name);
    for attr in start.attributes() {
        let attr = attr.map_err(|e| malformed(reader, e.to_string()))?;
        let key = std::str::from_utf8(attr.key.as_ref())
            .map_err(|e| malformed(reader, e.to_string()))?
            .to_string();
        let value = attr
            .unescape_value()
            .map_err(|e| malformed(reader, e.to_string()))?
            .into_owned();
        el.attrs.push((key, value));
    }
    Ok(el)
}

fn push_child(stack: &mut [Element], root: &mut Option<Element>, el: Element) {
    match stack.last_mut() {
        Some(parent) => parent.children.push(Node::Element(el)),
        None => *root = Some(el),
    }
}

fn push_text(stack: &mut [Element], reader: &Reader<&[u8]>, s: String) -> Result<(), FormatError> {
    match stack.last_mut() {
        Some(parent) => {
            if let Some(Node::Text(prev)) = parent.children.last_mut() {
                prev.push_str(&s);
            } else {
                parent.children.push(Node::Text(s));
            }
            Ok(())
        }
        None if s.trim().is_empty() => Ok(()),
        None => Err(malformed(reader, "text outside root element".into())),
    }
}

/// Mixed content is not part of either format: when an element has child
/// elements, whitespace runs between them are layout only.
fn drop_blank_text(el: &mut Element) {
    let has_elements = el.children.iter().any(|n| matches!(n, Node::Element(_)));
    if has_elements {
        el.children
            .retain(|n| !matches!(n, Node::Text(t) if t.trim().is_empty()));
    }
}

/// Serializes `root` with an XML declaration and two-space indentation.
pub fn write_document(root: &Element) -> Vec<u8> {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    write_element(&mut out, root, 0);
    out.into_bytes()
}

fn write_element(out: &mut String, el: &Element, depth: usize) {
    indent(out, depth);
    out.push('<');
    out.push_str(&el.name);
    for (k, v) in &el.attrs {
        out.push(' ');
        out.push_str(k);
        out.push_str("=\"");
        escape_into(out, v, true);
        out.push('"');
    }
    if el.children.is_empty() {
        out.push_str("/>\n");
        return;
    }
    out.push('>');
    let only_text = el.children.iter().all(|n| matches!(n, Node::Text(_)));
    if only_text {
        for n in &el.children {
            if let Node::Text(t) = n {
                escape_into(out, t, false);
            }
        }
    } else {
        out.push('\n');
        for n in &el.children {
            match n {
                Node::Element(child) => write_element(out, child, depth + 1),
                Node::Text(t) => {
                    indent(out, depth + 1);
                    escape_into(out, t, false);
                    out.push('\n');
                }
            }
        }
        indent(out, depth);
    }
    out.push_str("</");
    out.push_str(&el.name);
    out.push_str(">\n");
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn escape_into(out: &mut String, s: &str, attr: bool) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attr => out.push_str("&quot;"),
            '\n' if attr => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' if attr => out.push_str("&#9;"),
            c => out.push(c),
        }
    }
}
