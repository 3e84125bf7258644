//! The translator: parses harvested files into documents, loads them into
//! the datastore, and serves readbacks.
//!
//! The extractor never listens. It dials the harvester, subscribes with a
//! `test` ping and then answers the commands pushed down that connection.

mod config;
mod translate;

pub use config::{
    find_config, AggregateRule, ColumnSpec, CompiledConfig, FileFormat, HeaderRule, StorageTarget, TranslationConfig,
};
pub use translate::{figure_form, regenerate, translate, TranslateContext, TranslateError, Translation};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::Deserialize;
use tokio::net::TcpStream;
use tokio::sync::watch;

use crate::datastore::{Datastore, DatastoreError, FileFacts, LogStatus, StorageReceipt};
use crate::format::{
    decode_ops_message, encode_data_document, encode_ops_message, DataDocument, OpsMessage, OpsRole, Target,
    Timestamp,
};
use crate::harvester::{SUBSCRIBE_ATTR, SUBSCRIBE_EXTRACT};
use crate::messaging::{read_frame, write_frame, Endpoint, FrameConfig, MessagingError};

pub const E_NOCONFIG: &str = "E_NOCONFIG";
pub const E_PARSE: &str = "E_PARSE";
pub const E_STORE: &str = "E_STORE";

/// Assigns samples to projects by sample-code pattern.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectRule {
    pub name: String,
    pub sample_pattern: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSettings {
    /// Concurrent channels to the harvester.
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_reconnect_ms")]
    pub reconnect_initial_ms: u64,
    #[serde(default = "default_reconnect_max_ms")]
    pub reconnect_max_ms: u64,
}

fn default_channels() -> usize {
    2
}
fn default_reconnect_ms() -> u64 {
    500
}
fn default_reconnect_max_ms() -> u64 {
    30_000
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        ExtractorSettings {
            channels: default_channels(),
            reconnect_initial_ms: default_reconnect_ms(),
            reconnect_max_ms: default_reconnect_max_ms(),
        }
    }
}

/// Stores a translated document. Entities are registered and the file,
/// arrays and semantic rows are written in one transaction.
pub fn extract(
    store: &Datastore,
    doc: &mut DataDocument,
    cfg: &TranslationConfig,
    facts: &FileFacts,
    sample: Option<&str>,
    project: Option<&str>,
    operator: Option<&str>,
) -> Result<StorageReceipt, DatastoreError> {
    let tool = crate::format::ToolInfo::new(doc.tool.name.clone(), doc.kind);
    let ids = store.register_entities(&tool, sample, project, operator)?;
    if ids.operator_id.is_some() {
        doc.operator_id = ids.operator_id;
    }
    let semantic = match &cfg.storage_target {
        StorageTarget::Generic => None,
        StorageTarget::Semantic(model) => Some((model.as_str(), cfg.semantic_mapping.clone().unwrap_or_default())),
    };
    store.store_extraction(doc, facts, &ids, semantic.as_ref().map(|(m, s)| (*m, s)))
}

struct Failure {
    code: &'static str,
    detail: String,
    permanent: bool,
}

impl Failure {
    fn new(code: &'static str, detail: impl Into<String>, permanent: bool) -> Self {
        Failure {
            code,
            detail: detail.into(),
            permanent,
        }
    }

    fn store(e: DatastoreError) -> Self {
        let permanent = matches!(
            e,
            DatastoreError::MissingDescriptor(_)
                | DatastoreError::UnequalLengths { .. }
                | DatastoreError::NonNumeric(_)
                | DatastoreError::UnknownModel(_)
        );
        Failure::new(E_STORE, e.to_string(), permanent)
    }
}

struct Inner {
    store: Arc<Datastore>,
    archive_root: PathBuf,
    configs: Vec<CompiledConfig>,
    projects: Vec<(Regex, String)>,
    // one lock per archive path serializes work on the same file
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

#[derive(Clone)]
pub struct Extractor {
    inner: Arc<Inner>,
}

impl Extractor {
    pub fn new(
        store: Arc<Datastore>,
        archive_root: impl Into<PathBuf>,
        configs: Vec<TranslationConfig>,
        projects: Vec<ProjectRule>,
    ) -> Result<Self, String> {
        let configs = configs
            .into_iter()
            .map(|c| {
                c.validate()?;
                CompiledConfig::compile(c)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let projects = projects
            .into_iter()
            .map(|p| {
                Regex::new(&p.sample_pattern)
                    .map(|re| (re, p.name.clone()))
                    .map_err(|e| format!("project {}: {e}", p.name))
            })
            .collect::<Result<_, _>>()?;
        Ok(Extractor {
            inner: Arc::new(Inner {
                store,
                archive_root: archive_root.into(),
                configs,
                projects,
                locks: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn store(&self) -> &Arc<Datastore> {
        &self.inner.store
    }

    pub fn configs(&self) -> &[CompiledConfig] {
        &self.inner.configs
    }

    pub fn project_for(&self, sample: &str) -> Option<&str> {
        self.inner
            .projects
            .iter()
            .find(|(re, _)| re.is_match(sample))
            .map(|(_, name)| name.as_str())
    }

    fn config_for(&self, tool: &str, archive_path: &str) -> Option<&CompiledConfig> {
        let name = archive_path.rsplit('/').next().unwrap_or(archive_path);
        find_config(&self.inner.configs, Some(tool), name)
    }

    fn path_lock(&self, archive_path: &str) -> Arc<Mutex<()>> {
        let mut locks = self.inner.locks.lock().expect("locks");
        locks.retain(|_, l| Arc::strong_count(l) > 1);
        locks.entry(archive_path.to_string()).or_default().clone()
    }

    /// Dispatches on the message role. Blocking: file and database work run
    /// on the calling thread.
    pub fn handle_blocking(&self, msg: &OpsMessage) -> (OpsMessage, Option<Vec<u8>>) {
        match msg.role {
            OpsRole::Test => (OpsMessage::ack("OK", "extractor"), None),
            OpsRole::Ack | OpsRole::Error => (
                OpsMessage::error("E_SCHEMA", format!("role={} is a reply, not a command", msg.role)),
                None,
            ),
            OpsRole::Readback => match msg.target.as_ref().map(|t| self.readback(t)) {
                Some(Ok(bytes)) => (OpsMessage::ack("OK", "readback"), Some(bytes)),
                Some(Err(f)) => (OpsMessage::error(f.code, f.detail), None),
                None => (OpsMessage::error("E_SCHEMA", "readback needs a target"), None),
            },
            OpsRole::Transfer | OpsRole::Update => {
                let Some(target) = msg.target.as_ref() else {
                    return (OpsMessage::error("E_SCHEMA", "command needs a target"), None);
                };
                let entry = target.extras.attr("log_entry").and_then(|v| v.parse::<i64>().ok());
                match self.process(target, msg.role == OpsRole::Update) {
                    Ok(detail) => {
                        if let Some(id) = entry {
                            if let Err(e) = self.inner.store.mark_extracted(id) {
                                tracing::warn!(error = %e, "could not record extraction");
                            }
                        }
                        (OpsMessage::ack("OK", detail), None)
                    }
                    Err(f) => {
                        if let Some(id) = entry {
                            let detail = format!("{}: {}", f.code, f.detail);
                            let marked = if f.permanent {
                                self.inner.store.mark_failed_permanently(id, LogStatus::Extracted, &detail)
                            } else {
                                self.inner.store.mark_failed(id, LogStatus::Extracted, &detail)
                            };
                            if let Err(e) = marked {
                                tracing::warn!(error = %e, "could not record failure");
                            }
                        }
                        tracing::warn!(code = f.code, detail = %f.detail, "extraction failed");
                        (OpsMessage::error(f.code, f.detail), None)
                    }
                }
            }
        }
    }

    pub async fn handle(&self, msg: OpsMessage) -> (OpsMessage, Option<Vec<u8>>) {
        let this = self.clone();
        match tokio::task::spawn_blocking(move || this.handle_blocking(&msg)).await {
            Ok(r) => r,
            Err(e) => (OpsMessage::error(E_STORE, format!("worker failed: {e}")), None),
        }
    }

    fn process(&self, target: &Target, is_update: bool) -> Result<String, Failure> {
        let archive_path = target
            .archive_path
            .as_deref()
            .ok_or_else(|| Failure::new(E_STORE, "target has no archive path", true))?;
        let cc = self.config_for(&target.tool.name, archive_path).ok_or_else(|| {
            Failure::new(
                E_NOCONFIG,
                format!("no translation config for tool '{}' matches {archive_path}", target.tool.name),
                true,
            )
        })?;
        let _guard = self.path_lock(archive_path);
        let _held = _guard.lock().expect("path lock");
        let store = &self.inner.store;

        let existing = store.file_by_archive_path(archive_path).map_err(Failure::store)?;
        let announced = target.extras.attr("version").and_then(|v| v.parse::<i64>().ok());
        let version = match (announced, &existing, is_update) {
            (Some(v), _, _) => v,
            (None, Some(f), true) => f.version + 1,
            (None, Some(f), false) => f.version,
            (None, None, _) => 1,
        };
        if let Some(f) = existing.as_ref().filter(|f| f.version >= version) {
            return Ok(format!("file_id={} version={} already stored", f.id, f.version));
        }

        let full = self.inner.archive_root.join(archive_path);
        let (bytes, modified) = read_archived(&full)
            .map_err(|e| Failure::new(E_STORE, format!("cannot read {archive_path}: {e}"), false))?;
        let ctx = TranslateContext {
            tool: target.tool.clone(),
            operator_id: None,
            archive_path: archive_path.to_string(),
            file_timestamp: Timestamp::from_utc(modified),
            now: Timestamp::now(),
        };
        let Translation {
            mut document,
            skipped_rows,
        } = translate(&bytes, cc, &ctx).map_err(|e| Failure::new(E_PARSE, e.to_string(), true))?;

        let file_name = archive_path.rsplit('/').next().unwrap_or(archive_path);
        let sample = target
            .sample_id
            .clone()
            .filter(|s| !s.is_empty())
            .or_else(|| cc.sample_code(file_name));
        let project = sample.as_deref().and_then(|s| self.project_for(s));
        let facts = FileFacts {
            archive_path: archive_path.to_string(),
            original_path: target.source_path.clone(),
            file_timestamp: modified,
            size: bytes.len() as u64,
            version,
        };
        let mut receipt = extract(
            store,
            &mut document,
            &cc.cfg,
            &facts,
            sample.as_deref(),
            project,
            target.operator_username.as_deref(),
        )
        .map_err(Failure::store)?;
        receipt.skipped_rows = skipped_rows;
        tracing::info!(
            archive = archive_path,
            file_id = receipt.file_id,
            version,
            arrays = receipt.array_ids.len(),
            skipped_rows,
            "extracted"
        );
        Ok(format!(
            "file_id={} version={} arrays={} semantic={} skipped_rows={}",
            receipt.file_id,
            receipt.version,
            receipt.array_ids.len(),
            receipt.semantic_ids.len(),
            receipt.skipped_rows
        ))
    }

    /// Loads a stored file (by `file_id` extra or archive path) as an
    /// encoded `role=readback` document.
    fn readback(&self, target: &Target) -> Result<Vec<u8>, Failure> {
        let doc = self.readback_document(target)?;
        encode_data_document(&doc).map_err(|e| Failure::new(E_STORE, e.to_string(), false))
    }

    fn readback_document(&self, target: &Target) -> Result<DataDocument, Failure> {
        let store = &self.inner.store;
        let file_id = match target.extras.attr("file_id") {
            Some(id) => id
                .parse::<i64>()
                .map_err(|_| Failure::new(E_STORE, format!("bad file_id '{id}'"), false))?,
            None => {
                let path = target.archive_path.as_deref().unwrap_or(&target.source_path);
                store
                    .file_by_archive_path(path)
                    .map_err(Failure::store)?
                    .ok_or_else(|| Failure::new(E_STORE, format!("not found: {path}"), false))?
                    .id
            }
        };
        let mut doc = store.load_document(file_id).map_err(|e| match e {
            DatastoreError::NotFound(_) => Failure::new(E_STORE, format!("not found: file {file_id}"), false),
            other => Failure::store(other),
        })?;
        if let Some(cc) = self.config_for(&doc.tool.name, &doc.data_file_link.file) {
            figure_form(&mut doc, &cc.cfg);
        }
        Ok(doc)
    }

    /// Convenience for in-process callers: the readback document itself.
    pub fn readback_file(&self, file_id: i64) -> Result<DataDocument, String> {
        let mut target = Target::new("", "", crate::format::ToolInfo::new("-", crate::format::ToolKind::Characterization));
        target.extras.set_attr("file_id", file_id.to_string());
        self.readback_document(&target).map_err(|f| format!("{}: {}", f.code, f.detail))
    }

    /// Runs `channels` subscriptions against the harvester until shutdown.
    pub async fn run_channels(
        self,
        harvester: Endpoint,
        settings: ExtractorSettings,
        shutdown: watch::Receiver<bool>,
    ) {
        let mut tasks = Vec::new();
        for n in 0..settings.channels.max(1) {
            let this = self.clone();
            let endpoint = harvester.clone();
            let settings = settings.clone();
            let shutdown = shutdown.clone();
            tasks.push(tokio::spawn(async move { this.channel(n, endpoint, settings, shutdown).await }));
        }
        for t in tasks {
            let _ = t.await;
        }
    }

    async fn channel(self, n: usize, endpoint: Endpoint, settings: ExtractorSettings, mut shutdown: watch::Receiver<bool>) {
        let initial = Duration::from_millis(settings.reconnect_initial_ms.max(1));
        let max = Duration::from_millis(settings.reconnect_max_ms.max(settings.reconnect_initial_ms));
        let mut backoff = initial;
        loop {
            if *shutdown.borrow() {
                return;
            }
            let session = self.session(n, &endpoint);
            let result = tokio::select! {
                r = session => r,
                _ = shutdown.changed() => return,
            };
            match result {
                Ok(()) => backoff = initial,
                Err(e) => tracing::debug!(channel = n, error = %e, "extractor channel down"),
            }
            tokio::select! {
                _ = tokio::time::sleep(backoff) => {}
                _ = shutdown.changed() => return,
            }
            backoff = (backoff * 2).min(max);
        }
    }

    /// One subscription: returns when the harvester goes away.
    async fn session(&self, n: usize, endpoint: &Endpoint) -> Result<(), MessagingError> {
        let short = FrameConfig::default();
        let mut stream = TcpStream::connect(endpoint.address())
            .await
            .map_err(|e| MessagingError::ConnectionRefused(format!("{endpoint}: {e}")))?;
        let mut ping = OpsMessage::ping("extractor", &hostname());
        ping.extras.set_attr(SUBSCRIBE_ATTR, SUBSCRIBE_EXTRACT);
        write_frame(&mut stream, &encode_ops_message(&ping)?, &short).await?;
        let reply = decode_ops_message(&read_frame(&mut stream, &short).await?)?;
        if reply.role != OpsRole::Ack {
            return Err(MessagingError::ProtocolError(format!("subscription refused: {:?}", reply.status)));
        }
        tracing::info!(channel = n, harvester = %endpoint, "extractor subscribed");
        let idle = FrameConfig {
            header_timeout: Duration::from_secs(3600),
            ..short
        };
        loop {
            let bytes = match read_frame(&mut stream, &idle).await {
                Err(MessagingError::Timeout) => continue,
                other => other?,
            };
            let (reply, doc) = match decode_ops_message(&bytes) {
                Ok(msg) => self.handle(msg).await,
                Err(e) => (OpsMessage::error("E_SCHEMA", e.to_string()), None),
            };
            write_frame(&mut stream, &encode_ops_message(&reply)?, &short).await?;
            if let Some(doc) = doc {
                write_frame(&mut stream, &doc, &short).await?;
            }
        }
    }
}

fn hostname() -> String {
    std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into())
}

fn read_archived(path: &Path) -> std::io::Result<(Vec<u8>, DateTime<Utc>)> {
    let bytes = std::fs::read(path)?;
    let modified = std::fs::metadata(path)?.modified()?;
    Ok((bytes, DateTime::<Utc>::from(modified)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{decode_data_document, ToolInfo, ToolKind};

    fn setup() -> (tempfile::TempDir, Extractor) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Datastore::open_in_memory().unwrap());
        let mut cfg = TranslationConfig::new(
            "N and K",
            &["*_output.*"],
            FileFormat::DelimitedColumns,
            &[("Wavelength", "nm"), ("Reflectance", "exp")],
        );
        cfg.sample_pattern = Some(r"^([a-z]+_[a-z]+_[a-z0-9]+)_output".into());
        let projects = vec![ProjectRule {
            name: "AZO".into(),
            sample_pattern: "^azo_".into(),
        }];
        let ex = Extractor::new(store, dir.path(), vec![cfg], projects).unwrap();
        (dir, ex)
    }

    fn place(dir: &Path, rel: &str, body: &str) {
        let p = dir.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, body).unwrap();
    }

    fn command(role: OpsRole, tool: &str, rel: &str, version: Option<i64>) -> OpsMessage {
        let mut t = Target::new(format!("/share/{rel}"), "nk-pc", ToolInfo::new(tool, ToolKind::Characterization));
        t.archive_path = Some(rel.into());
        if let Some(v) = version {
            t.extras.set_attr("version", v.to_string());
        }
        OpsMessage::command(role, t)
    }

    const REL: &str = "nandk/data/20130108/azo_azo_a239_output.1";

    #[test]
    fn transfer_stores_and_repeats_are_idempotent() {
        let (dir, ex) = setup();
        place(dir.path(), REL, "1000.00 0.096500\n999.00 0.096100\n");
        let (reply, _) = ex.handle_blocking(&command(OpsRole::Transfer, "N and K", REL, Some(1)));
        assert_eq!(reply.role, OpsRole::Ack, "{reply:?}");
        let (again, _) = ex.handle_blocking(&command(OpsRole::Transfer, "N and K", REL, Some(1)));
        assert_eq!(again.role, OpsRole::Ack);
        assert_eq!(ex.store().file_count().unwrap(), 1);
        let sample = ex.store().sample_by_code("azo_azo_a239").unwrap().unwrap();
        assert_eq!(sample.project_id, ex.store().project_id("AZO").unwrap());
    }

    #[test]
    fn update_replaces_and_failed_update_leaves_data() {
        let (dir, ex) = setup();
        place(dir.path(), REL, "1000.00 0.096500\n999.00 0.096100\n");
        ex.handle_blocking(&command(OpsRole::Transfer, "N and K", REL, Some(1)));
        place(dir.path(), REL, "1000.00 0.1\n");
        let (reply, _) = ex.handle_blocking(&command(OpsRole::Update, "N and K", REL, Some(2)));
        assert_eq!(reply.role, OpsRole::Ack);
        let f = ex.store().file_by_archive_path(REL).unwrap().unwrap();
        assert_eq!(f.version, 2);
        assert_eq!(ex.store().file_arrays(f.id).unwrap()[1].lexemes, ["0.1"]);

        place(dir.path(), REL, "garbage\n");
        let (reply, _) = ex.handle_blocking(&command(OpsRole::Update, "N and K", REL, Some(3)));
        assert_eq!(reply.status_code(), Some(E_PARSE));
        assert_eq!(ex.store().file_arrays(f.id).unwrap()[1].lexemes, ["0.1"]);
    }

    #[test]
    fn unknown_tool_and_missing_file() {
        let (_dir, ex) = setup();
        let (reply, _) = ex.handle_blocking(&command(OpsRole::Transfer, "Mystery", REL, None));
        assert_eq!(reply.status_code(), Some(E_NOCONFIG));
        let mut rb = command(OpsRole::Readback, "N and K", REL, None);
        rb.target.as_mut().unwrap().extras.set_attr("file_id", "99");
        let (reply, doc) = ex.handle_blocking(&rb);
        assert_eq!(reply.status_code(), Some(E_STORE));
        assert!(reply.status.unwrap().detail.contains("not found"));
        assert!(doc.is_none());
    }

    #[test]
    fn readback_regenerates_the_source() {
        let (dir, ex) = setup();
        let body = "1000.00 0.096500\n999.00 0.096100\n";
        place(dir.path(), REL, body);
        ex.handle_blocking(&command(OpsRole::Transfer, "N and K", REL, None));
        let (reply, doc) = ex.handle_blocking(&command(OpsRole::Readback, "N and K", REL, None));
        assert_eq!(reply.role, OpsRole::Ack);
        let doc = decode_data_document(&doc.unwrap()).unwrap();
        assert_eq!(doc.role, crate::format::DocRole::Readback);
        assert_eq!(regenerate(&doc, &ex.configs()[0].cfg).unwrap(), body.as_bytes());
    }
}
