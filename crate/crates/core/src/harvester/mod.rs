//! The harvesting daemon: receives transfer/update announcements, copies
//! files into the tool/date archive under a bandwidth budget, keeps a
//! secondary backup, and tells the extractor about each archived file.

mod hub;
mod layout;
mod queue;
mod transfer;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::Deserialize;
use tokio::sync::{watch, Notify};

pub use hub::{ExtractorHub, SUBSCRIBE_ATTR, SUBSCRIBE_EXTRACT};
pub use layout::{
    archive_path, canonical_path, file_date, tool_slug, ArchiveLayout, BackupCodec, ChaChaCodec, CodecError,
    PlainCodec, Slot,
};
pub use queue::{TokenBucket, TransferQueue, TransferTask};
pub use transfer::{execute_transfer, TransferContext, TransferError, TransferMeter, TransferOutcome, TransferPlan};

use crate::datastore::{Datastore, HarvestLogEntry, LogStatus};
use crate::format::{OpsMessage, OpsRole};
use crate::messaging::{serve, Endpoint, FrameConfig, Handler, MessagingError, Response, ServerHandle};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvesterSettings {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub archive_root: PathBuf,
    pub backup_root: PathBuf,
    #[serde(default)]
    pub rate_limit_bytes_per_sec: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub encrypt: bool,
    /// 64 hex digits; required when `encrypt` is set.
    #[serde(default)]
    pub encryption_key: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_initial_ms: u64,
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    crate::messaging::DEFAULT_HARVESTER_PORT
}
fn default_workers() -> usize {
    4
}
fn default_max_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    1000
}

impl HarvesterSettings {
    pub fn new(archive_root: impl Into<PathBuf>, backup_root: impl Into<PathBuf>) -> Self {
        HarvesterSettings {
            host: default_host(),
            port: default_port(),
            archive_root: archive_root.into(),
            backup_root: backup_root.into(),
            rate_limit_bytes_per_sec: None,
            workers: default_workers(),
            encrypt: false,
            encryption_key: None,
            max_attempts: default_max_attempts(),
            backoff_initial_ms: default_backoff_ms(),
        }
    }

    pub fn layout(&self) -> ArchiveLayout {
        ArchiveLayout {
            archive_root: self.archive_root.clone(),
            backup_root: self.backup_root.clone(),
            encrypt: self.encrypt,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.archive_root == self.backup_root {
            return Err("archive_root and backup_root must differ".into());
        }
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.rate_limit_bytes_per_sec == Some(0) {
            return Err("rate_limit_bytes_per_sec must be positive (omit it for no limit)".into());
        }
        if self.encrypt {
            match &self.encryption_key {
                None => return Err("encrypt = true requires encryption_key".into()),
                Some(k) => {
                    ChaChaCodec::from_hex(k).map_err(|e| format!("encryption_key: {e}"))?;
                }
            }
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<Arc<dyn BackupCodec>, String> {
        if !self.encrypt {
            return Ok(Arc::new(PlainCodec));
        }
        let key = self.encryption_key.as_deref().ok_or("encrypt = true requires encryption_key")?;
        Ok(Arc::new(ChaChaCodec::from_hex(key).map_err(|e| e.to_string())?))
    }
}

/// Per-tool harvesting policy taken from the translation configs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolPolicy {
    pub priority: i64,
    pub slug: String,
}

#[derive(Debug, thiserror::Error)]
pub enum HarvestError {
    #[error("invalid harvester settings: {0}")]
    Settings(String),
    #[error("archive setup: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default)]
pub struct HarvestStats {
    pub copied: AtomicU64,
    pub unchanged: AtomicU64,
    pub failed: AtomicU64,
    pub abandoned: AtomicU64,
}

struct Inner {
    settings: HarvesterSettings,
    store: Arc<Datastore>,
    policies: HashMap<String, ToolPolicy>,
    ctx: TransferContext,
    queue: Mutex<TransferQueue>,
    wake: Notify,
    hub: Arc<ExtractorHub>,
    stats: HarvestStats,
}

/// Copy machinery for `settings` without touching a running harvester's
/// staging area; used directly by in-process backfills.
pub fn transfer_context(settings: &HarvesterSettings) -> Result<TransferContext, HarvestError> {
    settings.validate().map_err(HarvestError::Settings)?;
    let layout = settings.layout();
    for dir in [layout.staging_dir(), layout.backup_staging_dir()] {
        std::fs::create_dir_all(&dir)?;
    }
    let codec = settings.codec().map_err(HarvestError::Settings)?;
    Ok(TransferContext {
        layout,
        codec,
        bucket: Arc::new(Mutex::new(TokenBucket::new(settings.rate_limit_bytes_per_sec))),
        meter: Some(Arc::new(TransferMeter::default())),
        placement: Arc::new(Mutex::new(())),
    })
}

#[derive(Clone)]
pub struct Harvester {
    inner: Arc<Inner>,
}

impl Harvester {
    /// Validates settings, creates the archive and backup roots and clears
    /// leftovers from an interrupted run out of the staging areas.
    pub fn new(
        settings: HarvesterSettings,
        store: Arc<Datastore>,
        policies: HashMap<String, ToolPolicy>,
    ) -> Result<Self, HarvestError> {
        settings.validate().map_err(HarvestError::Settings)?;
        let layout = settings.layout();
        for dir in [layout.staging_dir(), layout.backup_staging_dir()] {
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
        }
        let ctx = transfer_context(&settings)?;
        Ok(Harvester {
            inner: Arc::new(Inner {
                ctx,
                settings,
                store,
                policies,
                queue: Mutex::new(TransferQueue::default()),
                wake: Notify::new(),
                hub: ExtractorHub::new(4096, Duration::from_secs(300)),
                stats: HarvestStats::default(),
            }),
        })
    }

    pub fn hub(&self) -> Arc<ExtractorHub> {
        self.inner.hub.clone()
    }

    pub fn meter(&self) -> Arc<TransferMeter> {
        self.inner.ctx.meter.clone().expect("meter enabled")
    }

    pub fn stats(&self) -> &HarvestStats {
        &self.inner.stats
    }

    pub fn layout(&self) -> &ArchiveLayout {
        &self.inner.ctx.layout
    }

    pub fn queue_len(&self) -> usize {
        self.inner.queue.lock().expect("queue").len()
    }

    pub fn is_idle(&self) -> bool {
        self.inner.queue.lock().expect("queue").is_idle()
    }

    /// Queues a transfer/update and returns the immediate reply. Unknown
    /// tools are queued at priority 0 with an `E_UNKNOWN_TOOL` warning ack.
    pub fn enqueue(&self, ops: OpsMessage) -> OpsMessage {
        if !matches!(ops.role, OpsRole::Transfer | OpsRole::Update) {
            return OpsMessage::error("E_SCHEMA", format!("cannot enqueue role={}", ops.role));
        }
        if let Err(e) = ops.validate() {
            return OpsMessage::error("E_SCHEMA", e.to_string());
        }
        let target = ops.target.as_ref().expect("validated");
        let policy = self.inner.policies.get(&target.tool.name);
        let priority = policy.map_or(0, |p| p.priority);
        let size = std::fs::metadata(&target.source_path).map(|m| m.len()).unwrap_or(0);
        let tool = target.tool.name.clone();
        let coalesced = self
            .inner
            .queue
            .lock()
            .expect("queue")
            .push(TransferTask::new(ops, priority, size));
        self.inner.wake.notify_one();
        match (policy, coalesced) {
            (None, _) => OpsMessage::ack(
                "E_UNKNOWN_TOOL",
                format!("no configuration for tool '{tool}'; queued at priority 0"),
            ),
            (Some(_), true) => OpsMessage::ack("OK", "already queued"),
            (Some(_), false) => OpsMessage::ack("OK", "queued"),
        }
    }

    /// Starts the scheduler and the TCP server.
    pub async fn start(self, endpoint: &Endpoint) -> Result<HarvesterHandle, MessagingError> {
        let (tx, rx) = watch::channel(false);
        let scheduler = tokio::spawn(self.clone().schedule(rx));
        let server = serve(endpoint, Arc::new(self.clone()), FrameConfig::default()).await;
        let server = match server {
            Ok(s) => s,
            Err(e) => {
                scheduler.abort();
                return Err(e);
            }
        };
        Ok(HarvesterHandle {
            harvester: self,
            server: Some(server),
            scheduler: Some(scheduler),
            shutdown: tx,
        })
    }

    async fn schedule(self, mut shutdown: watch::Receiver<bool>) {
        let inner = &self.inner;
        loop {
            loop {
                let task = {
                    let mut q = inner.queue.lock().expect("queue");
                    if q.running() >= inner.settings.workers {
                        None
                    } else {
                        let mut b = inner.ctx.bucket.lock().expect("bucket");
                        q.next_task(&mut b, Instant::now())
                    }
                };
                match task {
                    Some(t) => {
                        tokio::spawn(self.clone().run_task(t));
                    }
                    None => break,
                }
            }
            let pending = !inner.queue.lock().expect("queue").is_empty();
            // nothing fits right now; look again once tokens may have refilled
            let idle = if pending {
                Duration::from_millis(20)
            } else {
                Duration::from_secs(3600)
            };
            tokio::select! {
                _ = inner.wake.notified() => {}
                _ = tokio::time::sleep(idle) => {}
                _ = shutdown.changed() => return,
            }
        }
    }

    fn plan_for(&self, task: &TransferTask) -> (TransferPlan, Option<HarvestLogEntry>) {
        let target = task.ops.target.as_ref().expect("transfer tasks carry a target");
        let slug = self
            .inner
            .policies
            .get(&target.tool.name)
            .map_or_else(|| tool_slug(&target.tool.name), |p| p.slug.clone());
        plan_transfer(&self.inner.store, &slug, &target.source_host, &target.source_path, task.version())
    }

    /// A re-announcement of a version the log already records as harvested
    /// (reconcile racing a finishing copy) must not read the source again.
    fn already_archived(&self, source: &str, entry: Option<&HarvestLogEntry>) -> Option<TransferOutcome> {
        let e = entry?;
        if e.progress() < LogStatus::Harvested {
            return None;
        }
        let rel = e.archive_path.clone()?;
        let archived = self.inner.ctx.layout.archive_root.join(&rel);
        let meta = std::fs::metadata(&archived).ok()?;
        let sha256 = transfer::sha256_file(&archived).ok()?;
        let source_mtime = std::fs::metadata(source).and_then(|m| m.modified()).ok()?;
        Some(TransferOutcome {
            archive_path: rel,
            copied: false,
            displaced: None,
            sha256,
            bytes: meta.len(),
            source_mtime,
        })
    }

    async fn run_task(self, mut task: TransferTask) {
        let inner = &self.inner;
        let key = task.key();
        let (plan, entry) = self.plan_for(&task);
        let is_update = task.ops.role == OpsRole::Update;
        let result = match self.already_archived(&key.1, entry.as_ref()) {
            Some(done) => Ok(done),
            None => execute_transfer(&key.1, is_update, &plan, &inner.ctx).await,
        };
        match result {
            Ok(outcome) => {
                let counter = if outcome.copied {
                    &inner.stats.copied
                } else {
                    &inner.stats.unchanged
                };
                counter.fetch_add(1, Ordering::Relaxed);
                let entry = match &entry {
                    Some(e) => match inner.store.mark_harvested(e.entry_id, &outcome.archive_path) {
                        Ok(updated) => Some(updated),
                        Err(err) => {
                            tracing::warn!(error = %err, "could not record harvest");
                            Some(e.clone())
                        }
                    },
                    None => None,
                };
                tracing::info!(source = %key.1, archive = %outcome.archive_path, copied = outcome.copied, "harvested");
                if entry.as_ref().is_none_or(|e| e.progress() < LogStatus::Extracted) {
                    self.announce_to_extractor(&task, &outcome, entry.as_ref());
                }
                let mut q = inner.queue.lock().expect("queue");
                q.finish(&key);
            }
            Err(err) => {
                task.attempts += 1;
                inner.stats.failed.fetch_add(1, Ordering::Relaxed);
                let last = task.attempts >= inner.settings.max_attempts;
                if let Some(e) = &entry {
                    let detail = err.to_string();
                    let marked = if last {
                        inner.store.mark_failed_permanently(
                            e.entry_id,
                            LogStatus::Harvested,
                            &format!("{detail} (gave up after {} attempts)", task.attempts),
                        )
                    } else {
                        inner.store.mark_failed(e.entry_id, LogStatus::Harvested, &detail)
                    };
                    if let Err(e) = marked {
                        tracing::warn!(error = %e, "could not record failure");
                    }
                }
                let mut q = inner.queue.lock().expect("queue");
                q.finish(&key);
                if last {
                    inner.stats.abandoned.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(source = %key.1, error = %err, attempts = task.attempts, "transfer abandoned");
                } else {
                    let backoff = Duration::from_millis(inner.settings.backoff_initial_ms)
                        .saturating_mul(1 << (task.attempts - 1).min(16));
                    tracing::info!(source = %key.1, error = %err, ?backoff, "transfer will be retried");
                    task.not_before = Some(Instant::now() + backoff);
                    q.push(task);
                }
            }
        }
        inner.wake.notify_one();
    }

    fn announce_to_extractor(&self, task: &TransferTask, outcome: &TransferOutcome, entry: Option<&HarvestLogEntry>) {
        let mut target = task.ops.target.clone().expect("transfer tasks carry a target");
        target.archive_path = Some(outcome.archive_path.clone());
        if let Some(e) = entry {
            target.extras.set_attr("version", e.version.to_string());
            target.extras.set_attr("log_entry", e.entry_id.to_string());
        }
        let msg = OpsMessage::command(task.ops.role, target);
        let hub = self.inner.hub.clone();
        tokio::spawn(async move {
            match hub.request(msg, Duration::from_secs(300)).await {
                Ok((reply, _)) if reply.role == OpsRole::Ack => {}
                Ok((reply, _)) => tracing::warn!(status = ?reply.status, "extractor reported an error"),
                Err(e) => tracing::debug!(error = %e, "extractor not reached; reconcile will re-announce"),
            }
        });
    }
}

/// Works out where a source's content goes from its log history: the entry
/// for the announced version (else the latest), the archive path of the
/// newest earlier version, and any path this version already occupies.
pub fn plan_transfer(
    store: &Datastore,
    slug: &str,
    source_host: &str,
    source_path: &str,
    version: Option<i64>,
) -> (TransferPlan, Option<HarvestLogEntry>) {
    let history = store.log_history(source_host, source_path).unwrap_or_default();
    let entry = version
        .and_then(|v| history.iter().find(|e| e.version == v))
        .or(history.last())
        .cloned();
    let version = entry.as_ref().map(|e| e.version).or(version).unwrap_or(1);
    let prior = history
        .iter()
        .rev()
        .filter(|e| e.version < version)
        .find_map(|e| e.archive_path.clone());
    let plan = TransferPlan {
        tool_slug: slug.to_string(),
        prior_archive_path: prior,
        known_archive_path: entry.as_ref().and_then(|e| e.archive_path.clone()),
    };
    (plan, entry)
}

#[async_trait]
impl Handler for Harvester {
    async fn handle(&self, msg: OpsMessage, _peer: SocketAddr) -> Response {
        match msg.role {
            OpsRole::Test if ExtractorHub::is_subscription(&msg) => {
                Response::Takeover(OpsMessage::ack("OK", "extractor channel open"), self.inner.hub.attach())
            }
            OpsRole::Test => Response::Reply(OpsMessage::ack("OK", "harvester")),
            OpsRole::Transfer | OpsRole::Update => Response::Reply(self.enqueue(msg)),
            OpsRole::Readback => match self.inner.hub.request(msg, Duration::from_secs(60)).await {
                Ok((reply, Some(doc))) => Response::WithDocument(reply, doc),
                Ok((reply, None)) => Response::Reply(reply),
                Err(e) => Response::Reply(OpsMessage::error("E_UNAVAILABLE", e.to_string())),
            },
            OpsRole::Ack | OpsRole::Error => Response::Reply(OpsMessage::error(
                "E_SCHEMA",
                format!("role={} is a reply, not a command", msg.role),
            )),
        }
    }
}

pub struct HarvesterHandle {
    harvester: Harvester,
    server: Option<ServerHandle>,
    scheduler: Option<tokio::task::JoinHandle<()>>,
    shutdown: watch::Sender<bool>,
}

impl HarvesterHandle {
    pub fn harvester(&self) -> &Harvester {
        &self.harvester
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.as_ref().expect("running").local_addr()
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::client(self.local_addr())
    }

    /// Stops accepting work and waits for in-flight copies to finish.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(s) = self.server.take() {
            s.shutdown().await;
        }
        if let Some(t) = self.scheduler.take() {
            let _ = t.await;
        }
        let deadline = Instant::now() + Duration::from_secs(30);
        while self.harvester.inner.queue.lock().expect("queue").running() > 0 && Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

impl Drop for HarvesterHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.scheduler.take() {
            t.abort();
        }
    }
}
