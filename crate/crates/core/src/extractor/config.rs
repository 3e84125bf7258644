use globset::GlobSet;
use regex::Regex;
use serde::Deserialize;

use crate::datastore::SemanticMapping;
use crate::harvester::tool_slug;
use crate::monitor::build_globset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum FileFormat {
    DelimitedColumns,
    HeaderPlusColumns,
    BinaryOpaque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum AggregateRule {
    #[default]
    SingleAggregate,
    SplitOnBlankLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Deserialize)]
pub enum StorageTarget {
    #[default]
    Generic,
    Semantic(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderRule {
    /// Regex matched against the header key.
    pub key_pattern: String,
    pub metadata_name: String,
    #[serde(default = "dash")]
    pub units: String,
    /// Emit hits in the `comments` attribute (no `value`) when documents
    /// are encoded for readback, as in the published data-format example.
    #[serde(default)]
    pub figure_comments: bool,
}

fn dash() -> String {
    "-".into()
}

fn whitespace() -> String {
    "whitespace".into()
}

/// How one tool's files are turned into documents.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationConfig {
    pub tool_name: String,
    pub match_patterns: Vec<String>,
    pub format: FileFormat,
    /// `"whitespace"` for runs of blanks, otherwise the set of delimiter
    /// characters (the first one is used when regenerating).
    #[serde(default = "whitespace")]
    pub delimiter: String,
    #[serde(default)]
    pub skip_lines: usize,
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub header_rules: Vec<HeaderRule>,
    #[serde(default)]
    pub aggregate_rule: AggregateRule,
    #[serde(default)]
    pub storage_target: StorageTarget,
    #[serde(default)]
    pub semantic_mapping: Option<SemanticMapping>,
    #[serde(default)]
    pub priority: i64,
    /// Skip malformed rows (counted in the receipt) instead of failing.
    #[serde(default)]
    pub lenient: bool,
    /// Name of the measurement type / recipe; defaults to the tool name.
    #[serde(default)]
    pub measurement_type: Option<String>,
    /// Archive directory name; defaults to the slug of the tool name.
    #[serde(default)]
    pub archive_slug: Option<String>,
    /// Regex on the file name whose first capture group is the sample code.
    #[serde(default)]
    pub sample_pattern: Option<String>,
}

impl TranslationConfig {
    pub fn new(tool_name: impl Into<String>, patterns: &[&str], format: FileFormat, columns: &[(&str, &str)]) -> Self {
        TranslationConfig {
            tool_name: tool_name.into(),
            match_patterns: patterns.iter().map(|s| s.to_string()).collect(),
            format,
            delimiter: whitespace(),
            skip_lines: 0,
            columns: columns
                .iter()
                .map(|(n, u)| ColumnSpec {
                    name: n.to_string(),
                    units: u.to_string(),
                })
                .collect(),
            header_rules: Vec::new(),
            aggregate_rule: AggregateRule::SingleAggregate,
            storage_target: StorageTarget::Generic,
            semantic_mapping: None,
            priority: 0,
            lenient: false,
            measurement_type: None,
            archive_slug: None,
            sample_pattern: None,
        }
    }

    pub fn slug(&self) -> String {
        self.archive_slug.clone().unwrap_or_else(|| tool_slug(&self.tool_name))
    }

    pub fn validate(&self) -> Result<(), String> {
        let who = &self.tool_name;
        if self.tool_name.is_empty() {
            return Err("tool_name must be nonempty".into());
        }
        if self.match_patterns.is_empty() {
            return Err(format!("{who}: match_patterns must be nonempty"));
        }
        match self.format {
            FileFormat::DelimitedColumns | FileFormat::HeaderPlusColumns if self.columns.is_empty() => {
                return Err(format!("{who}: {:?} requires columns", self.format));
            }
            FileFormat::BinaryOpaque if !self.columns.is_empty() => {
                return Err(format!("{who}: BinaryOpaque takes no columns"));
            }
            _ => {}
        }
        if self.delimiter.is_empty() {
            return Err(format!("{who}: delimiter must be nonempty"));
        }
        if let StorageTarget::Semantic(model) = &self.storage_target {
            if model != crate::datastore::JV_MODEL {
                return Err(format!("{who}: unknown semantic model '{model}'"));
            }
        }
        CompiledConfig::compile(self.clone()).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct CompiledConfig {
    pub cfg: TranslationConfig,
    globs: GlobSet,
    pub(crate) header_rules: Vec<(Regex, HeaderRule)>,
    sample: Option<Regex>,
}

impl CompiledConfig {
    pub fn compile(cfg: TranslationConfig) -> Result<Self, String> {
        let globs = build_globset(&cfg.match_patterns).map_err(|e| format!("{}: {e}", cfg.tool_name))?;
        let header_rules = cfg
            .header_rules
            .iter()
            .map(|r| {
                Regex::new(&r.key_pattern)
                    .map(|re| (re, r.clone()))
                    .map_err(|e| format!("{}: key_pattern '{}': {e}", cfg.tool_name, r.key_pattern))
            })
            .collect::<Result<_, _>>()?;
        let sample = cfg
            .sample_pattern
            .as_deref()
            .map(|p| Regex::new(p).map_err(|e| format!("{}: sample_pattern: {e}", cfg.tool_name)))
            .transpose()?;
        Ok(CompiledConfig {
            cfg,
            globs,
            header_rules,
            sample,
        })
    }

    pub fn matches(&self, file_name: &str) -> bool {
        self.globs.is_match(file_name)
    }

    pub fn sample_code(&self, file_name: &str) -> Option<String> {
        let caps = self.sample.as_ref()?.captures(file_name)?;
        caps.get(1).or(caps.get(0)).map(|m| m.as_str().to_string())
    }
}

/// Picks the config for a file: same tool, first pattern match.
pub fn find_config<'a>(configs: &'a [CompiledConfig], tool: Option<&str>, file_name: &str) -> Option<&'a CompiledConfig> {
    configs
        .iter()
        .filter(|c| tool.is_none_or(|t| c.cfg.tool_name == t))
        .find(|c| c.matches(file_name))
}
