//! Instrument share monitoring.
//!
//! Each mount is polled; files matching the mount's patterns are compared
//! against the transaction log. New and changed files are announced to the
//! harvester once their size has been stable for two consecutive scans.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::Deserialize;
use tokio::sync::watch;

use crate::datastore::{Datastore, DatastoreError, HarvestLogEntry, LogStatus, NewLogEntry};
use crate::format::{OpsMessage, OpsRole, Target, ToolInfo, ToolKind};
use crate::messaging::{Client, Endpoint, FrameConfig, MessagingError};

#[derive(Debug, thiserror::Error)]
pub enum MonitorError {
    #[error("mount {0} is unavailable")]
    MountUnavailable(PathBuf),
    #[error("invalid pattern '{pattern}': {detail}")]
    BadPattern { pattern: String, detail: String },
    #[error("invalid mount: {0}")]
    InvalidMount(String),
    #[error(transparent)]
    Store(#[from] DatastoreError),
}

pub type Result<T> = std::result::Result<T, MonitorError>;

/// One instrument share as configured.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountConfig {
    pub instrument_name: String,
    pub host_label: String,
    pub root_path: PathBuf,
    pub patterns: Vec<String>,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    pub tool_name: String,
    #[serde(default = "default_kind")]
    pub tool_kind: ToolKind,
}

fn default_poll_ms() -> u64 {
    5000
}

fn default_kind() -> ToolKind {
    ToolKind::Characterization
}

#[derive(Debug, Clone)]
pub struct InstrumentMount {
    pub instrument_name: String,
    pub host_label: String,
    pub root_path: PathBuf,
    pub match_patterns: Vec<String>,
    pub poll_interval: Duration,
    pub tool: ToolInfo,
    matcher: GlobSet,
}

impl InstrumentMount {
    pub fn new(
        instrument_name: impl Into<String>,
        host_label: impl Into<String>,
        root_path: impl Into<PathBuf>,
        match_patterns: Vec<String>,
        poll_interval: Duration,
        tool: ToolInfo,
    ) -> Result<Self> {
        if poll_interval.is_zero() {
            return Err(MonitorError::InvalidMount("poll_interval must be > 0".into()));
        }
        let matcher = build_globset(&match_patterns)?;
        Ok(InstrumentMount {
            instrument_name: instrument_name.into(),
            host_label: host_label.into(),
            root_path: root_path.into(),
            match_patterns,
            poll_interval,
            tool,
            matcher,
        })
    }

    pub fn from_config(cfg: &MountConfig) -> Result<Self> {
        Self::new(
            &cfg.instrument_name,
            &cfg.host_label,
            &cfg.root_path,
            cfg.patterns.clone(),
            Duration::from_millis(cfg.poll_interval_ms),
            ToolInfo::new(&cfg.tool_name, cfg.tool_kind),
        )
    }

    /// Matches against the path relative to the mount root.
    pub fn matches(&self, relative: &Path) -> bool {
        self.matcher.is_match(relative)
    }
}

pub fn build_globset(patterns: &[String]) -> Result<GlobSet> {
    let mut b = GlobSetBuilder::new();
    for p in patterns {
        let glob = Glob::new(p).map_err(|e| MonitorError::BadPattern {
            pattern: p.clone(),
            detail: e.to_string(),
        })?;
        b.add(glob);
    }
    b.build().map_err(|e| MonitorError::BadPattern {
        pattern: patterns.join(","),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileEventKind {
    New,
    Updated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEvent {
    pub kind: FileEventKind,
    /// Absolute path on the lab server.
    pub source_path: String,
    pub size: u64,
    pub mtime_ns: i64,
    /// Logged size of the previous version; `Updated` only. Equal to `size`
    /// when only the mtime changed.
    pub previous_size: Option<u64>,
    /// Log version this event announces.
    pub version: i64,
}

impl FileEvent {
    pub fn mtime(&self) -> SystemTime {
        UNIX_EPOCH + Duration::from_nanos(self.mtime_ns.max(0) as u64)
    }
}

/// Latest log entry per source path for one instrument.
pub type LogIndex = BTreeMap<String, HarvestLogEntry>;

pub fn log_index(store: &Datastore, instrument: &str) -> Result<LogIndex> {
    Ok(store
        .log_latest_for(instrument)?
        .into_iter()
        .map(|e| (e.source_path.clone(), e))
        .collect())
}

pub fn mtime_ns(meta: &std::fs::Metadata) -> i64 {
    meta.modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map(|d| d.as_nanos() as i64)
        .unwrap_or(0)
}

struct Observed {
    path: String,
    size: u64,
    mtime_ns: i64,
}

fn walk(mount: &InstrumentMount) -> Result<Vec<Observed>> {
    if !mount.root_path.is_dir() {
        return Err(MonitorError::MountUnavailable(mount.root_path.clone()));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(&mount.root_path).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            // the share may drop mid-walk; a vanished root is an outage
            Err(_) if !mount.root_path.is_dir() => {
                return Err(MonitorError::MountUnavailable(mount.root_path.clone()))
            }
            Err(_) => continue,
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(rel) = entry.path().strip_prefix(&mount.root_path) else {
            continue;
        };
        if !mount.matches(rel) {
            continue;
        }
        let Ok(meta) = entry.metadata() else { continue };
        out.push(Observed {
            path: entry.path().to_string_lossy().into_owned(),
            size: meta.len(),
            mtime_ns: mtime_ns(&meta),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn diff(o: &Observed, log: &LogIndex) -> Option<FileEvent> {
    match log.get(&o.path) {
        None => Some(FileEvent {
            kind: FileEventKind::New,
            source_path: o.path.clone(),
            size: o.size,
            mtime_ns: o.mtime_ns,
            previous_size: None,
            version: 1,
        }),
        Some(e) if e.size != o.size || e.mtime_ns != o.mtime_ns => Some(FileEvent {
            kind: FileEventKind::Updated,
            source_path: o.path.clone(),
            size: o.size,
            mtime_ns: o.mtime_ns,
            previous_size: Some(e.size),
            version: e.version + 1,
        }),
        Some(_) => None,
    }
}

/// Compares the mount against the log. Pure: nothing is written.
pub fn scan(mount: &InstrumentMount, log: &LogIndex) -> Result<Vec<FileEvent>> {
    Ok(walk(mount)?.iter().filter_map(|o| diff(o, log)).collect())
}

/// Recovery pass: everything [`scan`] reports, plus re-emission of entries
/// stuck short of extraction for longer than `staleness`. Re-emitted events
/// keep their logged version.
pub fn reconcile(mount: &InstrumentMount, log: &LogIndex, staleness: Duration) -> Result<Vec<FileEvent>> {
    let observed = walk(mount)?;
    let cutoff = chrono::Utc::now() - chrono::Duration::from_std(staleness).unwrap_or_default();
    let mut out = Vec::new();
    for o in &observed {
        if let Some(ev) = diff(o, log) {
            out.push(ev);
            continue;
        }
        let e = &log[&o.path];
        if e.permanent || e.progress() == LogStatus::Extracted || e.updated_at > cutoff {
            continue;
        }
        out.push(FileEvent {
            kind: if e.version == 1 {
                FileEventKind::New
            } else {
                FileEventKind::Updated
            },
            source_path: o.path.clone(),
            size: e.size,
            mtime_ns: e.mtime_ns,
            previous_size: (e.version > 1).then_some(e.size),
            version: e.version,
        });
    }
    Ok(out)
}

/// Holds back events until the file looks the same on two consecutive scans.
#[derive(Debug, Default)]
pub struct Stabilizer {
    last: HashMap<String, (u64, i64)>,
}

impl Stabilizer {
    pub fn filter(&mut self, events: Vec<FileEvent>) -> Vec<FileEvent> {
        let mut next = HashMap::with_capacity(events.len());
        let mut ready = Vec::new();
        for ev in events {
            let seen = (ev.size, ev.mtime_ns);
            if self.last.get(&ev.source_path) == Some(&seen) {
                ready.push(ev);
            } else {
                next.insert(ev.source_path.clone(), seen);
            }
        }
        self.last = next;
        ready
    }
}

fn transport_detail(e: &MessagingError) -> String {
    match e {
        MessagingError::ConnectionRefused(_) => "ConnectionRefused".into(),
        MessagingError::Timeout => "Timeout".into(),
        MessagingError::Closed => "Closed".into(),
        other => other.to_string(),
    }
}

pub fn announcement(event: &FileEvent, mount: &InstrumentMount) -> OpsMessage {
    let role = match event.kind {
        FileEventKind::New => OpsRole::Transfer,
        FileEventKind::Updated => OpsRole::Update,
    };
    let mut target = Target::new(&event.source_path, &mount.host_label, mount.tool.clone());
    target.extras.set_attr("version", event.version.to_string());
    OpsMessage::command(role, target)
}

/// Logs the event and announces it to the harvester. Failures are recorded
/// in the log entry; the caller decides when to retry.
pub async fn notify(
    event: &FileEvent,
    mount: &InstrumentMount,
    client: &mut Client,
    store: &Datastore,
) -> Result<HarvestLogEntry> {
    let mut entry = store.log_detect(&NewLogEntry {
        instrument_name: mount.instrument_name.clone(),
        source_host: mount.host_label.clone(),
        source_path: event.source_path.clone(),
        size: event.size,
        mtime_ns: event.mtime_ns,
        version: event.version,
    })?;
    if entry.progress() < LogStatus::Harvested && (entry.size, entry.mtime_ns) != (event.size, event.mtime_ns) {
        entry = store.log_refresh(entry.entry_id, event.size, event.mtime_ns)?;
    }
    let msg = announcement(event, mount);
    let entry = match client.request(&msg).await {
        Ok(reply) if reply.role == OpsRole::Ack => store.mark_notified(entry.entry_id)?,
        Ok(reply) => {
            let status = reply.status.unwrap_or_else(|| crate::format::OpsStatus {
                code: "E_UNKNOWN".into(),
                detail: String::new(),
            });
            store.mark_failed(entry.entry_id, LogStatus::Notified, &format!("{}: {}", status.code, status.detail))?
        }
        Err(e) => store.mark_failed(entry.entry_id, LogStatus::Notified, &transport_detail(&e))?,
    };
    Ok(entry)
}

#[derive(Debug, Clone)]
pub struct MonitorSettings {
    pub staleness: Duration,
    pub reconcile_interval: Duration,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        MonitorSettings {
            staleness: Duration::from_secs(120),
            reconcile_interval: Duration::from_secs(60),
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
        }
    }
}

struct Retry {
    due: Instant,
    attempts: u32,
    event: FileEvent,
}

/// Polls one mount until `shutdown` flips. Runs a reconcile pass at startup
/// and every `reconcile_interval`.
pub async fn run_mount(
    mount: InstrumentMount,
    harvester: Endpoint,
    store: Arc<Datastore>,
    settings: MonitorSettings,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut client = Client::new(
        harvester,
        FrameConfig {
            header_timeout: Duration::from_secs(10),
            ..FrameConfig::default()
        },
    );
    let mut stabilizer = Stabilizer::default();
    let mut retries: HashMap<String, Retry> = HashMap::new();
    let mut last_reconcile: Option<Instant> = None;
    let mut offline = false;

    loop {
        let index = match log_index(&store, &mount.instrument_name) {
            Ok(i) => i,
            Err(e) => {
                tracing::warn!(instrument = %mount.instrument_name, error = %e, "log unavailable");
                LogIndex::new()
            }
        };

        let mut due: Vec<FileEvent> = Vec::new();
        match scan(&mount, &index) {
            Ok(events) => {
                if offline {
                    tracing::info!(instrument = %mount.instrument_name, "mount back online");
                    offline = false;
                }
                due.extend(stabilizer.filter(events));
            }
            Err(MonitorError::MountUnavailable(p)) => {
                if !offline {
                    tracing::warn!(instrument = %mount.instrument_name, path = %p.display(), "mount unavailable");
                    offline = true;
                }
            }
            Err(e) => tracing::warn!(error = %e, "scan failed"),
        }

        if !offline && last_reconcile.is_none_or(|t| t.elapsed() >= settings.reconcile_interval) {
            last_reconcile = Some(Instant::now());
            if let Ok(events) = reconcile(&mount, &index, settings.staleness) {
                for ev in events {
                    // fresh files still go through the stabilizer via scan
                    let logged = index.get(&ev.source_path).map(|e| e.version);
                    if logged == Some(ev.version) && !due.iter().any(|d| d.source_path == ev.source_path) {
                        due.push(ev);
                    }
                }
            }
        }

        let now = Instant::now();
        let ready: Vec<String> = retries
            .iter()
            .filter(|(_, r)| r.due <= now)
            .map(|(k, _)| k.clone())
            .collect();
        for k in ready {
            let r = retries.remove(&k).expect("present");
            if !due.iter().any(|d| d.source_path == k) {
                due.push(r.event.clone());
            }
            retries.insert(k, r);
        }

        for ev in due {
            let path = ev.source_path.clone();
            match notify(&ev, &mount, &mut client, &store).await {
                Ok(entry) if entry.status == LogStatus::Failed => {
                    let attempts = retries.get(&path).map_or(0, |r| r.attempts) + 1;
                    let delay = settings
                        .backoff_initial
                        .saturating_mul(1u32 << (attempts - 1).min(16))
                        .min(settings.backoff_max);
                    tracing::debug!(path, attempts, ?delay, detail = ?entry.error_detail, "notify failed");
                    retries.insert(
                        path,
                        Retry {
                            due: Instant::now() + delay,
                            attempts,
                            event: ev,
                        },
                    );
                }
                Ok(_) => {
                    retries.remove(&path);
                }
                Err(e) => tracing::warn!(path, error = %e, "could not log event"),
            }
        }

        tokio::select! {
            _ = tokio::time::sleep(mount.poll_interval) => {}
            _ = shutdown.changed() => return,
        }
        if *shutdown.borrow() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn mount(root: &Path) -> InstrumentMount {
        InstrumentMount::new(
            "XRD Bruker",
            "bruker-pc",
            root,
            vec!["*.txt".into()],
            Duration::from_millis(50),
            ToolInfo::new("XRD Bruker", ToolKind::Characterization),
        )
        .unwrap()
    }

    fn logged(store: &Datastore, m: &InstrumentMount, ev: &FileEvent) -> HarvestLogEntry {
        store
            .log_detect(&NewLogEntry {
                instrument_name: m.instrument_name.clone(),
                source_host: m.host_label.clone(),
                source_path: ev.source_path.clone(),
                size: ev.size,
                mtime_ns: ev.mtime_ns,
                version: ev.version,
            })
            .unwrap()
    }

    #[test]
    fn fresh_file_is_new() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("VCC_1234.txt"), b"1 2\n").unwrap();
        fs::write(dir.path().join("ignored.raw"), b"x").unwrap();
        let events = scan(&mount(dir.path()), &LogIndex::new()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, FileEventKind::New);
        assert!(events[0].source_path.ends_with("VCC_1234.txt"));
    }

    #[test]
    fn size_change_is_update_and_quiescent_tree_is_silent() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.txt");
        fs::write(&file, vec![b'x'; 1024]).unwrap();
        let store = Datastore::open_in_memory().unwrap();
        let m = mount(dir.path());
        let ev = scan(&m, &LogIndex::new()).unwrap().remove(0);
        logged(&store, &m, &ev);
        let index = log_index(&store, &m.instrument_name).unwrap();
        assert!(scan(&m, &index).unwrap().is_empty());
        assert!(scan(&m, &index).unwrap().is_empty());

        fs::write(&file, vec![b'x'; 2048]).unwrap();
        let events = scan(&m, &index).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, FileEventKind::Updated);
        assert_eq!(events[0].previous_size, Some(1024));
        assert_eq!(events[0].version, 2);
    }

    #[test]
    fn missing_root_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let m = mount(&dir.path().join("gone"));
        assert!(matches!(scan(&m, &LogIndex::new()), Err(MonitorError::MountUnavailable(_))));
    }

    #[test]
    fn stabilizer_waits_for_a_repeat() {
        let ev = |size| FileEvent {
            kind: FileEventKind::New,
            source_path: "/m/a.txt".into(),
            size,
            mtime_ns: 1,
            previous_size: None,
            version: 1,
        };
        let mut s = Stabilizer::default();
        assert!(s.filter(vec![ev(10)]).is_empty());
        assert!(s.filter(vec![ev(20)]).is_empty());
        assert_eq!(s.filter(vec![ev(20)]).len(), 1);
        assert!(s.filter(vec![]).is_empty());
        assert!(s.filter(vec![ev(20)]).is_empty());
    }

    #[test]
    fn reconcile_reemits_stuck_entries_only() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("stuck.txt"), b"1").unwrap();
        fs::write(dir.path().join("done.txt"), b"2").unwrap();
        fs::write(dir.path().join("missed.txt"), b"3").unwrap();
        let store = Datastore::open_in_memory().unwrap();
        let m = mount(dir.path());
        for ev in scan(&m, &LogIndex::new()).unwrap() {
            if ev.source_path.ends_with("missed.txt") {
                continue;
            }
            let e = logged(&store, &m, &ev);
            let e = store.mark_notified(e.entry_id).unwrap();
            if ev.source_path.ends_with("done.txt") {
                store.mark_extracted(e.entry_id).unwrap();
            }
        }
        let index = log_index(&store, &m.instrument_name).unwrap();
        let names = |evs: Vec<FileEvent>| {
            evs.into_iter()
                .map(|e| Path::new(&e.source_path).file_name().unwrap().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
        };
        assert_eq!(names(reconcile(&m, &index, Duration::from_secs(3600)).unwrap()), ["missed.txt"]);
        assert_eq!(
            names(reconcile(&m, &index, Duration::ZERO).unwrap()),
            ["missed.txt", "stuck.txt"]
        );
    }

    #[tokio::test]
    async fn notify_records_transport_failure() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"1").unwrap();
        let m = mount(dir.path());
        let store = Datastore::open_in_memory().unwrap();
        let ev = scan(&m, &LogIndex::new()).unwrap().remove(0);
        // bind and drop to get a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut client = Client::new(
            Endpoint::new("127.0.0.1", port, crate::messaging::EndpointRole::Client).unwrap(),
            FrameConfig::default(),
        );
        let entry = notify(&ev, &m, &mut client, &store).await.unwrap();
        assert_eq!(entry.status, LogStatus::Failed);
        assert_eq!(entry.error_detail.as_deref(), Some("ConnectionRefused"));
    }
}
