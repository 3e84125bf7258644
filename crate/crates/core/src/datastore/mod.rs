//! Relational layer on an embedded SQLite file.
//!
//! Tables fall into five groups:
//! - metadata entities: tools, projects, samples, operators, procedures, and
//!   the event base table with its measurement/processing extension tables;
//! - the generic model: `file_information` plus one `data_arrays` row per
//!   series, keeping both the parsed numbers and the source lexemes;
//! - semantic models built from generic arrays by promotion (`jv_curves`);
//! - annotations and user grants;
//! - the monitor's transaction log (`harvest_log`) and the tap receipt queue.
//!
//! All writes go through one connection guarded by a mutex; the file is in
//! WAL mode with a busy timeout so separate daemon processes can share it.

mod annotations;
mod entities;
mod files;
mod log;
mod query;
mod semantic;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

pub use annotations::{Annotation, AnnotationTarget};
pub use entities::{ProjectRow, ResolvedIds, SampleRow, ToolRow};
pub use files::{DataArray, FileFacts, FileInformation, FileSummary, StorageReceipt, TapRecord};
pub use log::{HarvestLogEntry, LogStatus, NewLogEntry};
pub use query::{BooleanQuery, FileRow, Predicate, Scope};
pub use semantic::{JvCurve, SemanticMapping, JV_MODEL};

#[derive(Debug, thiserror::Error)]
pub enum DatastoreError {
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown annotation target: {0}")]
    UnknownTarget(String),
    #[error("missing descriptor: {0}")]
    MissingDescriptor(String),
    #[error("unequal series lengths: x has {x} points, y has {y}")]
    UnequalLengths { x: usize, y: usize },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("unknown semantic model '{0}'")]
    UnknownModel(String),
    #[error("series '{0}' holds non-numeric values")]
    NonNumeric(String),
    #[error("injected fault")]
    InjectedFault,
    #[error("database error: {0}")]
    Sqlite(rusqlite::Error),
    #[error("corrupt stored value: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<rusqlite::Error> for DatastoreError {
    fn from(e: rusqlite::Error) -> Self {
        match e {
            rusqlite::Error::SqliteFailure(ref f, ref msg)
                if f.code == rusqlite::ErrorCode::ConstraintViolation =>
            {
                DatastoreError::ConstraintViolation(msg.clone().unwrap_or_else(|| e.to_string()))
            }
            other => DatastoreError::Sqlite(other),
        }
    }
}

impl From<serde_json::Error> for DatastoreError {
    fn from(e: serde_json::Error) -> Self {
        DatastoreError::Corrupt(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DatastoreError>;

/// Forward-only migrations; index + 1 is the schema version they produce.
const MIGRATIONS: &[&str] = &[
    r#"
    CREATE TABLE tools (
        id INTEGER PRIMARY KEY,
        name TEXT NOT NULL UNIQUE,
        kind TEXT NOT NULL CHECK (kind IN ('Characterization', 'Processing'))
    );
    CREATE TABLE projects (
        id INTEGER PRIMARY KEY,
        name TEXT NOT NULL UNIQUE
    );
    CREATE TABLE samples (
        id INTEGER PRIMARY KEY,
        sample_code TEXT NOT NULL UNIQUE,
        project_id INTEGER REFERENCES projects(id),
        description TEXT NOT NULL DEFAULT '',
        storage_method TEXT NOT NULL DEFAULT ''
    );
    CREATE TABLE operators (
        id INTEGER PRIMARY KEY,
        username TEXT NOT NULL UNIQUE
    );
    CREATE TABLE procedures (
        id INTEGER PRIMARY KEY,
        kind TEXT NOT NULL,
        name TEXT NOT NULL,
        UNIQUE (kind, name)
    );
    CREATE TABLE events (
        id INTEGER PRIMARY KEY,
        kind TEXT NOT NULL CHECK (kind IN ('Measurement', 'Processing')),
        tool_id INTEGER NOT NULL REFERENCES tools(id),
        operator_id INTEGER,
        sample_id INTEGER REFERENCES samples(id),
        occurred_at INTEGER NOT NULL,
        procedure_name TEXT NOT NULL
    );
    CREATE TABLE measurement_events (
        event_id INTEGER PRIMARY KEY REFERENCES events(id) ON DELETE CASCADE,
        procedure_id INTEGER NOT NULL REFERENCES procedures(id)
    );
    CREATE TABLE processing_events (
        event_id INTEGER PRIMARY KEY REFERENCES events(id) ON DELETE CASCADE,
        procedure_id INTEGER NOT NULL REFERENCES procedures(id)
    );
    CREATE TABLE file_information (
        id INTEGER PRIMARY KEY,
        event_id INTEGER NOT NULL REFERENCES events(id),
        archive_path TEXT NOT NULL,
        original_path TEXT NOT NULL,
        file_timestamp INTEGER NOT NULL,
        size INTEGER NOT NULL,
        version INTEGER NOT NULL,
        doc_timestamp TEXT NOT NULL,
        doc_id TEXT NOT NULL,
        link_timestamp TEXT NOT NULL,
        comments TEXT NOT NULL,
        aggregate_count INTEGER NOT NULL,
        UNIQUE (archive_path, version)
    );
    CREATE INDEX file_information_path ON file_information(archive_path);
    CREATE TABLE file_metadata (
        id INTEGER PRIMARY KEY,
        file_id INTEGER NOT NULL REFERENCES file_information(id) ON DELETE CASCADE,
        aggregate_index INTEGER NOT NULL,
        position INTEGER NOT NULL,
        name TEXT NOT NULL,
        value TEXT NOT NULL,
        units TEXT NOT NULL,
        comments TEXT
    );
    CREATE INDEX file_metadata_file ON file_metadata(file_id);
    CREATE TABLE data_arrays (
        id INTEGER PRIMARY KEY,
        file_id INTEGER NOT NULL REFERENCES file_information(id) ON DELETE CASCADE,
        aggregate_index INTEGER NOT NULL,
        position INTEGER NOT NULL,
        name TEXT NOT NULL,
        units TEXT NOT NULL,
        descriptors TEXT NOT NULL,
        vals TEXT NOT NULL,
        lexemes TEXT NOT NULL
    );
    CREATE INDEX data_arrays_file ON data_arrays(file_id);
    CREATE INDEX data_arrays_name ON data_arrays(name);
    CREATE TABLE jv_curves (
        id INTEGER PRIMARY KEY,
        file_id INTEGER NOT NULL REFERENCES file_information(id) ON DELETE CASCADE,
        sample_id INTEGER REFERENCES samples(id),
        device_id TEXT NOT NULL,
        aggregate_index INTEGER NOT NULL
    );
    CREATE TABLE jv_points (
        curve_id INTEGER NOT NULL REFERENCES jv_curves(id) ON DELETE CASCADE,
        idx INTEGER NOT NULL,
        voltage REAL NOT NULL,
        current REAL NOT NULL,
        PRIMARY KEY (curve_id, idx)
    );
    CREATE TABLE annotations (
        id INTEGER PRIMARY KEY,
        target_kind TEXT NOT NULL,
        target_id INTEGER NOT NULL,
        author TEXT NOT NULL,
        body TEXT NOT NULL,
        links TEXT NOT NULL,
        created_at INTEGER NOT NULL
    );
    CREATE INDEX annotations_target ON annotations(target_kind, target_id);
    CREATE TABLE user_grants (
        username TEXT NOT NULL,
        project_id INTEGER NOT NULL REFERENCES projects(id),
        UNIQUE (username, project_id)
    );
    CREATE TABLE harvest_log (
        entry_id INTEGER PRIMARY KEY,
        instrument_name TEXT NOT NULL,
        source_host TEXT NOT NULL,
        source_path TEXT NOT NULL,
        size INTEGER NOT NULL,
        mtime_ns INTEGER NOT NULL,
        detected_at INTEGER NOT NULL,
        notified_at INTEGER,
        harvested_at INTEGER,
        archive_path TEXT,
        extracted_at INTEGER,
        status TEXT NOT NULL,
        error_detail TEXT,
        version INTEGER NOT NULL CHECK (version >= 1),
        attempts INTEGER NOT NULL DEFAULT 0,
        permanent INTEGER NOT NULL DEFAULT 0,
        updated_at INTEGER NOT NULL,
        UNIQUE (instrument_name, source_path, version)
    );
    CREATE INDEX harvest_log_source ON harvest_log(source_host, source_path);
    CREATE TABLE tap_receipts (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        file_id INTEGER NOT NULL,
        version INTEGER NOT NULL,
        tool_name TEXT NOT NULL,
        sample_code TEXT,
        project_id INTEGER,
        archive_path TEXT NOT NULL,
        extracted_at INTEGER NOT NULL,
        UNIQUE (file_id, version)
    );
    "#,
];

pub struct Datastore {
    conn: Mutex<Connection>,
    fail_after_arrays: AtomicUsize,
}

const NO_FAULT: usize = usize::MAX;

impl Datastore {
    /// Opens or creates the store, creating missing parent directories.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(mut conn: Connection) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        migrate(&mut conn)?;
        Ok(Datastore {
            conn: Mutex::new(conn),
            fail_after_arrays: AtomicUsize::new(NO_FAULT),
        })
    }

    /// Folds the write-ahead log back into the main file.
    pub fn checkpoint(&self) -> Result<()> {
        self.lock().query_row("PRAGMA wal_checkpoint(TRUNCATE)", [], |_| Ok(()))?;
        Ok(())
    }

    pub fn schema_version(&self) -> Result<i64> {
        Ok(self
            .lock()
            .query_row("SELECT max(version) FROM schema_version", [], |r| r.get(0))?)
    }

    /// Makes the next file insert fail after writing `n` array rows, as if
    /// the process died mid-transaction. Test hook.
    pub fn inject_fault_after_arrays(&self, n: usize) {
        self.fail_after_arrays.store(n, Ordering::SeqCst);
    }

    fn take_fault(&self, written: usize) -> Result<()> {
        let limit = self.fail_after_arrays.load(Ordering::SeqCst);
        if limit != NO_FAULT && written >= limit {
            self.fail_after_arrays.store(NO_FAULT, Ordering::SeqCst);
            return Err(DatastoreError::InjectedFault);
        }
        Ok(())
    }

    fn lock(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Row counts per table, for integrity checks.
    pub fn table_counts(&self) -> Result<Vec<(String, i64)>> {
        let conn = self.lock();
        let mut out = Vec::new();
        for table in [
            "events",
            "file_information",
            "file_metadata",
            "data_arrays",
            "jv_curves",
            "jv_points",
            "annotations",
            "tap_receipts",
        ] {
            let n: i64 = conn.query_row(&format!("SELECT count(*) FROM {table}"), [], |r| r.get(0))?;
            out.push((table.to_string(), n));
        }
        Ok(out)
    }

    /// Number of rows that violate referential integrity (arrays without a
    /// file, files without an event).
    pub fn orphan_count(&self) -> Result<i64> {
        let conn = self.lock();
        let n: i64 = conn.query_row(
            "SELECT
               (SELECT count(*) FROM data_arrays a
                  WHERE NOT EXISTS (SELECT 1 FROM file_information f WHERE f.id = a.file_id))
             + (SELECT count(*) FROM file_information f
                  WHERE NOT EXISTS (SELECT 1 FROM events e WHERE e.id = f.event_id))
             + (SELECT count(*) FROM events e
                  WHERE NOT EXISTS (SELECT 1 FROM file_information f WHERE f.event_id = e.id))",
            [],
            |r| r.get(0),
        )?;
        Ok(n)
    }
}

fn migrate(conn: &mut Connection) -> Result<()> {
    conn.execute_batch(
        "CREATE TABLE IF NOT EXISTS schema_version (version INTEGER PRIMARY KEY, applied_at INTEGER NOT NULL)",
    )?;
    let current: i64 = conn.query_row(
        "SELECT coalesce(max(version), 0) FROM schema_version",
        [],
        |r| r.get(0),
    )?;
    for (i, sql) in MIGRATIONS.iter().enumerate() {
        let version = i as i64 + 1;
        if version <= current {
            continue;
        }
        let tx = conn.transaction()?;
        tx.execute_batch(sql)?;
        tx.execute(
            "INSERT INTO schema_version (version, applied_at) VALUES (?1, ?2)",
            (version, now_millis()),
        )?;
        tx.commit()?;
    }
    Ok(())
}

pub(crate) fn now_millis() -> i64 {
    Utc::now().timestamp_millis()
}

pub(crate) fn millis_to_utc(ms: i64) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(ms)
        .single()
        .unwrap_or_else(|| Utc.timestamp_millis_opt(0).unwrap())
}

/// Event kinds stored in the base event table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Measurement,
    Processing,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Measurement => "Measurement",
            EventKind::Processing => "Processing",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "Measurement" => Ok(EventKind::Measurement),
            "Processing" => Ok(EventKind::Processing),
            other => Err(DatastoreError::Corrupt(format!("event kind '{other}'"))),
        }
    }
}
