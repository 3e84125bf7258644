//! The single configuration file covering every daemon.
//!
//! ```toml
//! store_path = "lims.db"
//!
//! [harvester]
//! archive_root = "archive"
//! backup_root = "backup"
//!
//! [[instrument]]
//! instrument_name = "nk-1"
//! host_label = "nk-pc"
//! root_path = "mounts/nk"
//! patterns = ["*_output.*"]
//! tool_name = "N and K"
//!
//! [[translation]]
//! tool_name = "N and K"
//! match_patterns = ["*_output.*"]
//! format = "DelimitedColumns"
//! columns = [{ name = "Wavelength", units = "nm" }, { name = "Reflectance", units = "exp" }]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::extractor::{ExtractorSettings, ProjectRule, TranslationConfig};
use crate::harvester::{HarvesterSettings, ToolPolicy};
use crate::messaging::{Endpoint, EndpointRole};
use crate::monitor::{InstrumentMount, MonitorSettings, MountConfig};
use crate::service::ServiceSettings;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    /// 1-based position of the offending text, when known.
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn semantic(message: impl Into<String>) -> Self {
        ConfigError {
            path: None,
            line: None,
            column: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}", p.display())?;
            if let (Some(l), Some(c)) = (self.line, self.column) {
                write!(f, ":{l}:{c}")?;
            }
            write!(f, ": ")?;
        } else if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, "line {l}, column {c}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    #[serde(default = "d_staleness")]
    pub staleness_secs: u64,
    #[serde(default = "d_reconcile")]
    pub reconcile_interval_secs: u64,
    #[serde(default = "d_backoff")]
    pub backoff_initial_ms: u64,
    #[serde(default = "d_backoff_max")]
    pub backoff_max_ms: u64,
}

fn d_staleness() -> u64 {
    120
}
fn d_reconcile() -> u64 {
    60
}
fn d_backoff() -> u64 {
    1000
}
fn d_backoff_max() -> u64 {
    60_000
}

impl Default for MonitorSection {
    fn default() -> Self {
        MonitorSection {
            staleness_secs: d_staleness(),
            reconcile_interval_secs: d_reconcile(),
            backoff_initial_ms: d_backoff(),
            backoff_max_ms: d_backoff_max(),
        }
    }
}

impl MonitorSection {
    pub fn settings(&self) -> MonitorSettings {
        MonitorSettings {
            staleness: Duration::from_secs(self.staleness_secs),
            reconcile_interval: Duration::from_secs(self.reconcile_interval_secs.max(1)),
            backoff_initial: Duration::from_millis(self.backoff_initial_ms.max(1)),
            backoff_max: Duration::from_millis(self.backoff_max_ms.max(self.backoff_initial_ms)),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub store_path: PathBuf,
    pub harvester: HarvesterSettings,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub extractor: ExtractorSettings,
    #[serde(default)]
    pub service: ServiceSettings,
    #[serde(default, rename = "instrument")]
    pub instruments: Vec<MountConfig>,
    #[serde(default, rename = "translation")]
    pub translations: Vec<TranslationConfig>,
    #[serde(default, rename = "project")]
    pub projects: Vec<ProjectRule>,
}

fn position(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl Config {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn parse(src: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map(|s| position(src, s.start)).unzip();
            ConfigError {
                path: None,
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            column: None,
            message: format!("cannot read: {e}"),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&src, base).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            ..e
        })
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.store_path);
        abs(&mut self.harvester.archive_root);
        abs(&mut self.harvester.backup_root);
        for m in &mut self.instruments {
            abs(&mut m.root_path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.harvester
            .validate()
            .map_err(|e| ConfigError::semantic(format!("[harvester] {e}")))?;
        self.service
            .validate()
            .map_err(|e| ConfigError::semantic(format!("[service] {e}")))?;
        if self.extractor.channels == 0 {
            return Err(ConfigError::semantic("[extractor] channels must be at least 1"));
        }
        // a tool may have several configs (one per file kind) sharing a slug
        let mut slugs: HashMap<&str, String> = HashMap::new();
        for t in &self.translations {
            t.validate().map_err(|e| ConfigError::semantic(format!("[[translation]] {e}")))?;
            let slug = t.slug();
            match slugs.get(t.tool_name.as_str()) {
                Some(s) if *s != slug => {
                    return Err(ConfigError::semantic(format!(
                        "[[translation]] tool_name '{}' has conflicting archive slugs '{s}' and '{slug}'",
                        t.tool_name
                    )));
                }
                _ => {
                    slugs.insert(&t.tool_name, slug);
                }
            }
        }
        let names: HashSet<&str> = slugs.keys().copied().collect();
        let mut instruments = HashSet::new();
        for m in &self.instruments {
            InstrumentMount::from_config(m)
                .map_err(|e| ConfigError::semantic(format!("[[instrument]] {}: {e}", m.instrument_name)))?;
            if !instruments.insert(m.instrument_name.as_str()) {
                return Err(ConfigError::semantic(format!(
                    "[[instrument]] instrument_name '{}' is configured twice",
                    m.instrument_name
                )));
            }
            if !names.contains(m.tool_name.as_str()) {
                return Err(ConfigError::semantic(format!(
                    "[[instrument]] {}: no [[translation]] for tool_name '{}'",
                    m.instrument_name, m.tool_name
                )));
            }
        }
        for p in &self.projects {
            regex::Regex::new(&p.sample_pattern)
                .map_err(|e| ConfigError::semantic(format!("[[project]] {}: {e}", p.name)))?;
        }
        let known: HashSet<&str> = self.projects.iter().map(|p| p.name.as_str()).collect();
        for (user, projects) in &self.service.grants {
            if let Some(p) = projects
                .iter()
                .find(|p| p.as_str() != crate::service::ALL_PROJECTS && !known.contains(p.as_str()))
            {
                return Err(ConfigError::semantic(format!(
                    "[service.grants] {user}: unknown project '{p}'"
                )));
            }
        }
        Ok(())
    }

    pub fn harvester_endpoint(&self) -> Endpoint {
        Endpoint {
            host: self.harvester.host.clone(),
            port: self.harvester.port,
            role: EndpointRole::Client,
        }
    }

    pub fn tool_policies(&self) -> HashMap<String, ToolPolicy> {
        let mut out: HashMap<String, ToolPolicy> = HashMap::new();
        for t in &self.translations {
            let p = out.entry(t.tool_name.clone()).or_insert_with(|| ToolPolicy {
                priority: t.priority,
                slug: t.slug(),
            });
            p.priority = p.priority.max(t.priority);
        }
        out
    }

    pub fn mounts(&self) -> Vec<InstrumentMount> {
        self.instruments
            .iter()
            .map(|m| InstrumentMount::from_config(m).expect("validated"))
            .collect()
    }

    /// Project names per user, from `[service.grants]`.
    pub fn grants(&self) -> &BTreeMap<String, Vec<String>> {
        &self.service.grants
    }
}
