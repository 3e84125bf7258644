//! File ⇄ document translation driven by a [`TranslationConfig`].

use super::config::{AggregateRule, CompiledConfig, FileFormat, TranslationConfig};
use crate::format::{
    Aggregate, DataDocument, DataSeries, Descriptor, DocRole, Extras, FileLink, MetaDatum, NamedRef,
    Timestamp, ToolInfo,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TranslateError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("regeneration is not supported for {0:?} files")]
    UnsupportedFormat(FileFormat),
    #[error("aggregate {aggregate}: series lengths differ ({lengths:?})")]
    UnequalLengths { aggregate: usize, lengths: Vec<usize> },
}

/// Facts about a file that are not in its bytes.
#[derive(Debug, Clone)]
pub struct TranslateContext {
    pub tool: ToolInfo,
    pub operator_id: Option<i64>,
    /// Archive-relative path.
    pub archive_path: String,
    /// Source modification time.
    pub file_timestamp: Timestamp,
    /// Time of translation.
    pub now: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub document: DataDocument,
    /// Malformed rows dropped in lenient mode.
    pub skipped_rows: usize,
}

fn split_fields<'a>(line: &'a str, delimiter: &str) -> Vec<&'a str> {
    if delimiter == "whitespace" {
        line.split_whitespace().collect()
    } else {
        line.split(|c| delimiter.contains(c)).map(str::trim).collect()
    }
}

/// `key: value` or `key = value`; a bare line is all key.
fn split_header(line: &str) -> (&str, &str) {
    match line.find([':', '=']) {
        Some(i) => (line[..i].trim(), line[i + 1..].trim()),
        None => (line.trim(), ""),
    }
}

struct Block {
    metadata: Vec<MetaDatum>,
    columns: Vec<Vec<String>>,
    rows: usize,
}

impl Block {
    fn new(width: usize) -> Self {
        Block {
            metadata: Vec::new(),
            columns: vec![Vec::new(); width],
            rows: 0,
        }
    }

    fn is_empty(&self) -> bool {
        self.metadata.is_empty() && self.rows == 0
    }
}

pub fn translate(bytes: &[u8], cc: &CompiledConfig, ctx: &TranslateContext) -> Result<Translation, TranslateError> {
    let cfg = &cc.cfg;
    let (aggregates, skipped_rows) = match cfg.format {
        FileFormat::BinaryOpaque => (vec![opaque_metadata(bytes.len(), ctx)], 0),
        FileFormat::DelimitedColumns | FileFormat::HeaderPlusColumns => parse_text(bytes, cc)?,
    };
    let document = DataDocument {
        role: DocRole::Archive,
        timestamp: ctx.now.clone(),
        doc_id: String::new(),
        kind: ctx.tool.kind,
        measurement_type: NamedRef::new(None, cfg.measurement_type.clone().unwrap_or_else(|| cfg.tool_name.clone())),
        tool: NamedRef::new(None, ctx.tool.name.clone()),
        operator_id: ctx.operator_id,
        data_file_link: FileLink {
            timestamp: ctx.file_timestamp.clone(),
            file: ctx.archive_path.clone(),
        },
        comments: String::new(),
        aggregates,
        extras: Extras::default(),
        body_extras: Extras::default(),
    };
    Ok(Translation { document, skipped_rows })
}

fn opaque_metadata(size: usize, ctx: &TranslateContext) -> Aggregate {
    let filename = ctx.archive_path.rsplit('/').next().unwrap_or(&ctx.archive_path);
    Aggregate {
        metadata: vec![
            MetaDatum::new("filename", filename, "-"),
            MetaDatum::new("size_bytes", size.to_string(), "bytes"),
            MetaDatum::new("source_mtime", ctx.file_timestamp.as_str(), "-"),
        ],
        series: Vec::new(),
        extras: Extras::default(),
    }
}

fn parse_text(bytes: &[u8], cc: &CompiledConfig) -> Result<(Vec<Aggregate>, usize), TranslateError> {
    let cfg = &cc.cfg;
    let text = String::from_utf8_lossy(bytes);
    let width = cfg.columns.len();
    let with_header = cfg.format == FileFormat::HeaderPlusColumns;
    let split = cfg.aggregate_rule == AggregateRule::SplitOnBlankLine;

    let mut blocks = vec![Block::new(width)];
    let mut skipped = 0;
    for (idx, raw) in text.lines().enumerate().skip(cfg.skip_lines) {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if split && !blocks.last().expect("one block").is_empty() {
                blocks.push(Block::new(width));
            }
            continue;
        }
        let block = blocks.last_mut().expect("one block");
        let fields = split_fields(line, &cfg.delimiter);
        // header lines precede the data rows of their block
        if with_header && block.rows == 0 && !looks_like_row(&fields, width) {
            let (key, value) = split_header(line);
            if let Some((_, rule)) = cc.header_rules.iter().find(|(re, _)| re.is_match(key)) {
                block
                    .metadata
                    .push(MetaDatum::new(rule.metadata_name.clone(), value, rule.units.clone()));
            }
            continue;
        }
        if fields.len() != width {
            if cfg.lenient {
                skipped += 1;
                continue;
            }
            return Err(TranslateError::Parse {
                line: line_no,
                detail: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        for (col, f) in block.columns.iter_mut().zip(fields) {
            col.push(f.to_string());
        }
        block.rows += 1;
    }
    if blocks.len() > 1 && blocks.last().is_some_and(Block::is_empty) {
        blocks.pop();
    }

    let aggregates = blocks
        .into_iter()
        .map(|b| Aggregate {
            metadata: b.metadata,
            series: if b.rows == 0 {
                Vec::new()
            } else {
                cfg.columns
                    .iter()
                    .zip(b.columns)
                    .map(|(c, data)| DataSeries::new(Descriptor::new(c.name.clone(), c.units.clone()), data))
                    .collect()
            },
            extras: Extras::default(),
        })
        .collect();
    Ok((aggregates, skipped))
}

/// Moves values of `figure_comments` header rules into `comments`.
pub fn figure_form(doc: &mut DataDocument, cfg: &TranslationConfig) {
    for agg in &mut doc.aggregates {
        for m in &mut agg.metadata {
            let flagged = cfg
                .header_rules
                .iter()
                .any(|r| r.figure_comments && r.metadata_name == m.name);
            if flagged && m.comments.is_none() && !m.value.is_empty() {
                m.comments = Some(std::mem::take(&mut m.value));
            }
        }
    }
}

fn looks_like_row(fields: &[&str], width: usize) -> bool {
    fields.len() == width && fields.first().and_then(|f| crate::format::parse_decimal(f)).is_some()
}

/// Hard copy of a document: the data region as delimited rows. Header
/// metadata is written back as `name: value` lines for header formats, and
/// aggregates are separated by blank lines.
pub fn regenerate(doc: &DataDocument, cfg: &TranslationConfig) -> Result<Vec<u8>, TranslateError> {
    if cfg.format == FileFormat::BinaryOpaque {
        return Err(TranslateError::UnsupportedFormat(cfg.format));
    }
    let sep = if cfg.delimiter == "whitespace" {
        ' '
    } else {
        cfg.delimiter.chars().next().unwrap_or(',')
    };
    let mut out = String::new();
    for (i, agg) in doc.aggregates.iter().enumerate() {
        let lengths: Vec<usize> = agg.series.iter().map(DataSeries::len).collect();
        if lengths.windows(2).any(|w| w[0] != w[1]) {
            return Err(TranslateError::UnequalLengths { aggregate: i, lengths });
        }
        if i > 0 {
            out.push('\n');
        }
        if cfg.format == FileFormat::HeaderPlusColumns {
            for m in &agg.metadata {
                let value = if m.value.is_empty() {
                    m.comments.as_deref().unwrap_or("")
                } else {
                    &m.value
                };
                out.push_str(&format!("{}: {}\n", m.name, value));
            }
        }
        for row in 0..lengths.first().copied().unwrap_or(0) {
            let mut first = true;
            for s in &agg.series {
                if !first {
                    out.push(sep);
                }
                first = false;
                out.push_str(&s.data[row]);
            }
            out.push('\n');
        }
    }
    Ok(out.into_bytes())
}
