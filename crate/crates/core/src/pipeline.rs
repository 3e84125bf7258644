//! Wiring: starts the selected daemons from one [`Config`], and runs
//! historical backfills through the same transfer and extraction code.

use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::config::Config;
use crate::datastore::{Datastore, DatastoreError, LogStatus, NewLogEntry};
use crate::extractor::{find_config, Extractor};
use crate::format::{OpsMessage, OpsRole, Target, ToolInfo, ToolKind};
use crate::harvester::{
    execute_transfer, plan_transfer, transfer_context, HarvestError, Harvester, HarvesterHandle,
};
use crate::messaging::{Endpoint, EndpointRole, MessagingError};
use crate::monitor::{mtime_ns, run_mount};
use crate::service::{self, ServiceHandle};

pub const BACKFILL_HOST: &str = "backfill";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Monitor,
    Harvest,
    Extract,
    Serve,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Monitor, Mode::Harvest, Mode::Extract, Mode::Serve];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Monitor => "monitor",
            Mode::Harvest => "harvest",
            Mode::Extract => "extract",
            Mode::Serve => "serve",
        })
    }
}

/// Parses `monitor`, `harvest`, `extract`, `serve`, `all`, or a
/// comma-separated combination.
pub fn parse_modes(s: &str) -> Result<BTreeSet<Mode>, String> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => out.extend(Mode::ALL),
            other => {
                out.insert(Mode::from_str(other)?);
            }
        }
    }
    if out.is_empty() {
        return Err("no mode given".into());
    }
    Ok(out)
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "monitor" => Ok(Mode::Monitor),
            "harvest" => Ok(Mode::Harvest),
            "extract" => Ok(Mode::Extract),
            "serve" => Ok(Mode::Serve),
            other => Err(format!(
                "unknown mode '{other}' (expected monitor, harvest, extract, serve or all)"
            )),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] DatastoreError),
    #[error(transparent)]
    Harvest(#[from] HarvestError),
    #[error(transparent)]
    Messaging(#[from] MessagingError),
    #[error("extractor: {0}")]
    Extractor(String),
    #[error("service: {0}")]
    Service(std::io::Error),
}

pub struct Pipeline {
    store: Arc<Datastore>,
    shutdown: watch::Sender<bool>,
    harvester: Option<HarvesterHandle>,
    service: Option<ServiceHandle>,
    extractor: Option<Extractor>,
    tasks: Vec<JoinHandle<()>>,
    harvester_addr: Option<SocketAddr>,
}

impl Pipeline {
    /// Starts `modes` in dependency order: harvester, extractor channels,
    /// monitors, then the service. Daemons in this process reach the
    /// harvester over loopback TCP like remote ones would.
    pub async fn start(config: &Config, modes: &BTreeSet<Mode>) -> Result<Self, PipelineError> {
        let store = Arc::new(Datastore::open(&config.store_path)?);
        Self::start_with_store(config, modes, store).await
    }

    pub async fn start_with_store(
        config: &Config,
        modes: &BTreeSet<Mode>,
        store: Arc<Datastore>,
    ) -> Result<Self, PipelineError> {
        let (shutdown, rx) = watch::channel(false);
        let mut p = Pipeline {
            store: store.clone(),
            shutdown,
            harvester: None,
            service: None,
            extractor: None,
            tasks: Vec::new(),
            harvester_addr: None,
        };
        let mut endpoint = config.harvester_endpoint();

        if modes.contains(&Mode::Harvest) {
            let h = Harvester::new(config.harvester.clone(), store.clone(), config.tool_policies())?;
            let bind = Endpoint {
                host: config.harvester.host.clone(),
                port: config.harvester.port,
                role: EndpointRole::Server,
            };
            let handle = h.start(&bind).await?;
            endpoint = Endpoint::client(handle.local_addr());
            p.harvester_addr = Some(handle.local_addr());
            tracing::info!(addr = %handle.local_addr(), "harvester ready");
            p.harvester = Some(handle);
        }
        if modes.contains(&Mode::Extract) {
            let ex = Extractor::new(
                store.clone(),
                &config.harvester.archive_root,
                config.translations.clone(),
                config.projects.clone(),
            )
            .map_err(PipelineError::Extractor)?;
            p.tasks.push(tokio::spawn(ex.clone().run_channels(
                endpoint.clone(),
                config.extractor.clone(),
                rx.clone(),
            )));
            tracing::info!(channels = config.extractor.channels, "extractor ready");
            p.extractor = Some(ex);
        }
        if modes.contains(&Mode::Monitor) {
            let settings = config.monitor.settings();
            for mount in config.mounts() {
                tracing::info!(instrument = %mount.instrument_name, "monitor ready");
                p.tasks.push(tokio::spawn(run_mount(
                    mount,
                    endpoint.clone(),
                    store.clone(),
                    settings.clone(),
                    rx.clone(),
                )));
            }
        }
        if modes.contains(&Mode::Serve) {
            let svc = service::start(store.clone(), &config.service)
                .await
                .map_err(PipelineError::Service)?;
            tracing::info!(addr = %svc.local_addr(), "service ready");
            p.service = Some(svc);
        }
        Ok(p)
    }

    pub fn store(&self) -> &Arc<Datastore> {
        &self.store
    }

    pub fn harvester(&self) -> Option<&Harvester> {
        self.harvester.as_ref().map(HarvesterHandle::harvester)
    }

    pub fn harvester_addr(&self) -> Option<SocketAddr> {
        self.harvester_addr
    }

    pub fn service_addr(&self) -> Option<SocketAddr> {
        self.service.as_ref().map(ServiceHandle::local_addr)
    }

    pub fn extractor(&self) -> Option<&Extractor> {
        self.extractor.as_ref()
    }

    /// Stops monitors and extractor channels first so no new work arrives,
    /// then drains the harvester and stops the service.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
        if let Some(h) = self.harvester.take() {
            h.shutdown().await;
        }
        if let Some(s) = self.service.take() {
            s.shutdown().await;
        }
        if let Err(e) = self.store.checkpoint() {
            tracing::warn!(error = %e, "checkpoint failed");
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BackfillReport {
    pub files_seen: usize,
    pub extracted: usize,
    /// (path, reason)
    pub skipped: Vec<(String, String)>,
    /// (path, error)
    pub errors: Vec<(String, String)>,
}

/// Runs every file under `root` through transfer and extraction, one file
/// at a time. Files already extracted unchanged are skipped, so repeated
/// runs add nothing.
pub async fn backfill(config: &Config, store: Arc<Datastore>, root: &Path) -> Result<BackfillReport, PipelineError> {
    let ctx = transfer_context(&config.harvester)?;
    let extractor = Extractor::new(
        store.clone(),
        &config.harvester.archive_root,
        config.translations.clone(),
        config.projects.clone(),
    )
    .map_err(PipelineError::Extractor)?;
    let policies = config.tool_policies();
    let mut report = BackfillReport::default();

    let mut files: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    files.sort();

    for path in files {
        report.files_seen += 1;
        let shown = path.display().to_string();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let Some(cc) = find_config(extractor.configs(), None, &name) else {
            report.skipped.push((shown, "no translation config matches".into()));
            continue;
        };
        let tool_name = cc.cfg.tool_name.clone();
        let kind = config
            .instruments
            .iter()
            .find(|m| m.tool_name == tool_name)
            .map_or(ToolKind::Characterization, |m| m.tool_kind);
        let source = std::fs::canonicalize(&path).unwrap_or(path.clone());
        let source = source.to_string_lossy().into_owned();
        let meta = match std::fs::metadata(&path) {
            Ok(m) => m,
            Err(e) => {
                report.errors.push((shown, e.to_string()));
                continue;
            }
        };
        let (size, mtime) = (meta.len(), mtime_ns(&meta));

        let latest = store.log_latest(BACKFILL_HOST, &source)?;
        let (entry, is_update) = match latest {
            Some(e) if e.size == size && e.mtime_ns == mtime => {
                if e.progress() == LogStatus::Extracted {
                    report.skipped.push((shown, "already extracted".into()));
                    continue;
                }
                let update = e.version > 1;
                (e, update)
            }
            Some(e) if e.archive_path.is_some() => {
                let next = store.log_detect(&NewLogEntry {
                    instrument_name: BACKFILL_HOST.into(),
                    source_host: BACKFILL_HOST.into(),
                    source_path: source.clone(),
                    size,
                    mtime_ns: mtime,
                    version: e.version + 1,
                })?;
                (next, true)
            }
            Some(e) => (store.log_refresh(e.entry_id, size, mtime)?, e.version > 1),
            None => {
                let e = store.log_detect(&NewLogEntry {
                    instrument_name: BACKFILL_HOST.into(),
                    source_host: BACKFILL_HOST.into(),
                    source_path: source.clone(),
                    size,
                    mtime_ns: mtime,
                    version: 1,
                })?;
                (e, false)
            }
        };

        let slug = policies.get(&tool_name).map_or_else(|| cc.cfg.slug(), |p| p.slug.clone());
        let (plan, _) = plan_transfer(&store, &slug, BACKFILL_HOST, &source, Some(entry.version));
        let outcome = match execute_transfer(&source, is_update, &plan, &ctx).await {
            Ok(o) => o,
            Err(e) => {
                store.mark_failed(entry.entry_id, LogStatus::Harvested, &e.to_string())?;
                report.errors.push((shown, e.to_string()));
                continue;
            }
        };
        store.mark_harvested(entry.entry_id, &outcome.archive_path)?;

        let mut target = Target::new(source.clone(), BACKFILL_HOST, ToolInfo::new(tool_name, kind));
        target.archive_path = Some(outcome.archive_path.clone());
        target.extras.set_attr("version", entry.version.to_string());
        target.extras.set_attr("log_entry", entry.entry_id.to_string());
        let role = if is_update { OpsRole::Update } else { OpsRole::Transfer };
        let (reply, _) = extractor.handle(OpsMessage::command(role, target)).await;
        match reply.role {
            OpsRole::Ack => report.extracted += 1,
            _ => {
                let detail = reply
                    .status
                    .map(|s| format!("{}: {}", s.code, s.detail))
                    .unwrap_or_else(|| "extraction failed".into());
                report.errors.push((shown, detail));
            }
        }
    }
    Ok(report)
}
