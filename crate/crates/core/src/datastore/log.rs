//! The monitor's transaction log.
//!
//! Progress along Detected → Notified → Harvested → Extracted is recorded as
//! timestamps that are only ever set, never cleared, so the stage reached by
//! an entry cannot regress. `Failed` is a side state: it records the last
//! error for an entry that has not yet reached the stage being attempted, and
//! is replaced as soon as that stage succeeds.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::Serialize;

use super::{millis_to_utc, now_millis, Datastore, DatastoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum LogStatus {
    Detected,
    Notified,
    Harvested,
    Extracted,
    Failed,
}

impl LogStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LogStatus::Detected => "Detected",
            LogStatus::Notified => "Notified",
            LogStatus::Harvested => "Harvested",
            LogStatus::Extracted => "Extracted",
            LogStatus::Failed => "Failed",
        }
    }
}

impl fmt::Display for LogStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "Detected" => LogStatus::Detected,
            "Notified" => LogStatus::Notified,
            "Harvested" => LogStatus::Harvested,
            "Extracted" => LogStatus::Extracted,
            "Failed" => LogStatus::Failed,
            other => return Err(format!("log status '{other}'")),
        })
    }
}

/// What the monitor knows when it first sees a file (or a new version).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewLogEntry {
    pub instrument_name: String,
    pub source_host: String,
    pub source_path: String,
    pub size: u64,
    pub mtime_ns: i64,
    pub version: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HarvestLogEntry {
    pub entry_id: i64,
    pub instrument_name: String,
    pub source_host: String,
    pub source_path: String,
    pub size: u64,
    pub mtime_ns: i64,
    pub detected_at: DateTime<Utc>,
    pub notified_at: Option<DateTime<Utc>>,
    pub harvested_at: Option<DateTime<Utc>>,
    pub archive_path: Option<String>,
    pub extracted_at: Option<DateTime<Utc>>,
    pub status: LogStatus,
    pub error_detail: Option<String>,
    pub version: i64,
    pub attempts: i64,
    /// Set for failures retrying cannot fix (no configuration, unparseable
    /// file, attempts exhausted). Reconciliation leaves these alone.
    pub permanent: bool,
    pub updated_at: DateTime<Utc>,
}

impl HarvestLogEntry {
    /// Furthest lifecycle stage reached, ignoring any failure.
    pub fn progress(&self) -> LogStatus {
        if self.extracted_at.is_some() {
            LogStatus::Extracted
        } else if self.harvested_at.is_some() {
            LogStatus::Harvested
        } else if self.notified_at.is_some() {
            LogStatus::Notified
        } else {
            LogStatus::Detected
        }
    }
}

const COLUMNS: &str = "entry_id, instrument_name, source_host, source_path, size, mtime_ns, detected_at,
    notified_at, harvested_at, archive_path, extracted_at, status, error_detail, version, attempts, updated_at, permanent";

fn from_row(r: &Row<'_>) -> rusqlite::Result<(HarvestLogEntry, String)> {
    let opt = |i: usize| -> rusqlite::Result<Option<DateTime<Utc>>> {
        Ok(r.get::<_, Option<i64>>(i)?.map(millis_to_utc))
    };
    Ok((
        HarvestLogEntry {
            entry_id: r.get(0)?,
            instrument_name: r.get(1)?,
            source_host: r.get(2)?,
            source_path: r.get(3)?,
            size: r.get::<_, i64>(4)? as u64,
            mtime_ns: r.get(5)?,
            detected_at: millis_to_utc(r.get(6)?),
            notified_at: opt(7)?,
            harvested_at: opt(8)?,
            archive_path: r.get(9)?,
            extracted_at: opt(10)?,
            status: LogStatus::Detected,
            error_detail: r.get(12)?,
            version: r.get(13)?,
            attempts: r.get(14)?,
            updated_at: millis_to_utc(r.get(15)?),
            permanent: r.get(16)?,
        },
        r.get(11)?,
    ))
}

fn select(conn: &Connection, filter: &str, args: impl rusqlite::Params) -> Result<Vec<HarvestLogEntry>> {
    let sql = format!("SELECT {COLUMNS} FROM harvest_log {filter}");
    let mut stmt = conn.prepare_cached(&sql)?;
    let rows = stmt.query_map(args, from_row)?;
    rows.map(|row| {
        let (mut e, status) = row?;
        e.status = status.parse().map_err(DatastoreError::Corrupt)?;
        Ok(e)
    })
    .collect()
}

fn get(conn: &Connection, entry_id: i64) -> Result<HarvestLogEntry> {
    select(conn, "WHERE entry_id = ?1", [entry_id])?
        .pop()
        .ok_or_else(|| DatastoreError::NotFound(format!("log entry {entry_id}")))
}

impl Datastore {
    /// Records a detection. Re-detecting the same (instrument, path, version)
    /// returns the existing entry unchanged.
    pub fn log_detect(&self, new: &NewLogEntry) -> Result<HarvestLogEntry> {
        if new.version < 1 {
            return Err(DatastoreError::ConstraintViolation("version must be >= 1".into()));
        }
        let conn = self.lock();
        let existing: Option<i64> = conn
            .query_row(
                "SELECT entry_id FROM harvest_log WHERE instrument_name = ?1 AND source_path = ?2 AND version = ?3",
                params![new.instrument_name, new.source_path, new.version],
                |r| r.get(0),
            )
            .optional()?;
        let id = match existing {
            Some(id) => id,
            None => {
                let now = now_millis();
                conn.execute(
                    "INSERT INTO harvest_log (instrument_name, source_host, source_path, size, mtime_ns,
                         detected_at, status, version, updated_at)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, 'Detected', ?7, ?6)",
                    params![
                        new.instrument_name,
                        new.source_host,
                        new.source_path,
                        new.size as i64,
                        new.mtime_ns,
                        now,
                        new.version
                    ],
                )?;
                conn.last_insert_rowid()
            }
        };
        get(&conn, id)
    }

    pub fn log_entry(&self, entry_id: i64) -> Result<HarvestLogEntry> {
        get(&self.lock(), entry_id)
    }

    pub fn log_entries(&self) -> Result<Vec<HarvestLogEntry>> {
        select(&self.lock(), "ORDER BY entry_id", [])
    }

    /// Highest version logged for a path on an instrument.
    pub fn log_latest(&self, instrument: &str, source_path: &str) -> Result<Option<HarvestLogEntry>> {
        Ok(select(
            &self.lock(),
            "WHERE instrument_name = ?1 AND source_path = ?2 ORDER BY version DESC LIMIT 1",
            [instrument, source_path],
        )?
        .pop())
    }

    /// Latest version of every path logged for an instrument, by path.
    pub fn log_latest_for(&self, instrument: &str) -> Result<Vec<HarvestLogEntry>> {
        select(
            &self.lock(),
            "WHERE instrument_name = ?1 AND version = (
                 SELECT max(version) FROM harvest_log h
                  WHERE h.instrument_name = harvest_log.instrument_name
                    AND h.source_path = harvest_log.source_path)
             ORDER BY source_path",
            [instrument],
        )
    }

    /// Latest entry for a source file as the harvester sees it (host, path).
    pub fn log_by_source(&self, source_host: &str, source_path: &str) -> Result<Option<HarvestLogEntry>> {
        Ok(select(
            &self.lock(),
            "WHERE source_host = ?1 AND source_path = ?2 ORDER BY version DESC, entry_id DESC LIMIT 1",
            [source_host, source_path],
        )?
        .pop())
    }

    pub fn log_by_archive_path(&self, archive_path: &str) -> Result<Option<HarvestLogEntry>> {
        Ok(select(
            &self.lock(),
            "WHERE archive_path = ?1 ORDER BY entry_id DESC LIMIT 1",
            [archive_path],
        )?
        .pop())
    }

    pub fn mark_notified(&self, entry_id: i64) -> Result<HarvestLogEntry> {
        self.advance(entry_id, LogStatus::Notified, None)
    }

    pub fn mark_harvested(&self, entry_id: i64, archive_path: &str) -> Result<HarvestLogEntry> {
        self.advance(entry_id, LogStatus::Harvested, Some(archive_path))
    }

    pub fn mark_extracted(&self, entry_id: i64) -> Result<HarvestLogEntry> {
        self.advance(entry_id, LogStatus::Extracted, None)
    }

    /// Records a failure while attempting `stage`. Ignored when the entry has
    /// already reached that stage, so a late error cannot undo a success.
    pub fn mark_failed(&self, entry_id: i64, stage: LogStatus, detail: &str) -> Result<HarvestLogEntry> {
        self.fail(entry_id, stage, detail, false)
    }

    pub fn mark_failed_permanently(&self, entry_id: i64, stage: LogStatus, detail: &str) -> Result<HarvestLogEntry> {
        self.fail(entry_id, stage, detail, true)
    }

    fn fail(&self, entry_id: i64, stage: LogStatus, detail: &str, permanent: bool) -> Result<HarvestLogEntry> {
        let conn = self.lock();
        let entry = get(&conn, entry_id)?;
        if entry.progress() >= stage {
            return Ok(entry);
        }
        conn.execute(
            "UPDATE harvest_log SET status = 'Failed', error_detail = ?1, attempts = attempts + 1,
                 permanent = ?2, updated_at = ?3 WHERE entry_id = ?4",
            params![detail, permanent, now_millis(), entry_id],
        )?;
        get(&conn, entry_id)
    }

    /// Every version logged for a source file, oldest first.
    pub fn log_history(&self, source_host: &str, source_path: &str) -> Result<Vec<HarvestLogEntry>> {
        select(
            &self.lock(),
            "WHERE source_host = ?1 AND source_path = ?2 ORDER BY version, entry_id",
            [source_host, source_path],
        )
    }

    /// Updates the observed size and mtime of an entry that has not been
    /// harvested yet (the file changed again before it was copied).
    pub fn log_refresh(&self, entry_id: i64, size: u64, mtime_ns: i64) -> Result<HarvestLogEntry> {
        let conn = self.lock();
        conn.execute(
            "UPDATE harvest_log SET size = ?1, mtime_ns = ?2, updated_at = ?3
              WHERE entry_id = ?4 AND harvested_at IS NULL",
            params![size as i64, mtime_ns, now_millis(), entry_id],
        )?;
        get(&conn, entry_id)
    }

    /// Stage timestamps are set once and earlier stages are filled in, so
    /// an out-of-order report (harvested before the notify ack was logged)
    /// still leaves a consistent entry.
    fn advance(&self, entry_id: i64, stage: LogStatus, archive_path: Option<&str>) -> Result<HarvestLogEntry> {
        let conn = self.lock();
        let entry = get(&conn, entry_id)?;
        let now = now_millis();
        let reached = entry.progress().max(stage);
        let at = |have: Option<DateTime<Utc>>, needed: LogStatus| {
            have.map(|t| t.timestamp_millis()).or((stage >= needed).then_some(now))
        };
        conn.execute(
            "UPDATE harvest_log SET notified_at = ?1, harvested_at = ?2, extracted_at = ?3,
                 archive_path = coalesce(?4, archive_path), status = ?5, error_detail = NULL, permanent = 0,
                 updated_at = ?6
             WHERE entry_id = ?7",
            params![
                at(entry.notified_at, LogStatus::Notified),
                at(entry.harvested_at, LogStatus::Harvested),
                at(entry.extracted_at, LogStatus::Extracted),
                archive_path,
                reached.as_str(),
                now,
                entry_id
            ],
        )?;
        get(&conn, entry_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new_entry(path: &str, version: i64) -> NewLogEntry {
        NewLogEntry {
            instrument_name: "XRD Bruker".into(),
            source_host: "bruker-pc".into(),
            source_path: path.into(),
            size: 1024,
            mtime_ns: 1,
            version,
        }
    }

    #[test]
    fn lifecycle_advances_in_order() {
        let store = Datastore::open_in_memory().unwrap();
        let e = store.log_detect(&new_entry("VCC_1234.txt", 1)).unwrap();
        assert_eq!(e.status, LogStatus::Detected);
        let e = store.mark_notified(e.entry_id).unwrap();
        assert_eq!(e.status, LogStatus::Notified);
        assert!(e.notified_at.is_some());
        let e = store.mark_harvested(e.entry_id, "xrd_bruker/data/20011217/VCC_1234.txt").unwrap();
        assert_eq!(e.status, LogStatus::Harvested);
        let e = store.mark_extracted(e.entry_id).unwrap();
        assert_eq!(e.status, LogStatus::Extracted);
        assert_eq!(e.archive_path.as_deref(), Some("xrd_bruker/data/20011217/VCC_1234.txt"));
    }

    #[test]
    fn status_never_regresses() {
        let store = Datastore::open_in_memory().unwrap();
        let e = store.log_detect(&new_entry("a.txt", 1)).unwrap();
        let e = store.mark_harvested(e.entry_id, "t/data/20130101/a.txt").unwrap();
        assert!(e.notified_at.is_some());
        let e = store.mark_notified(e.entry_id).unwrap();
        assert_eq!(e.status, LogStatus::Harvested);
        let e = store.mark_failed(e.entry_id, LogStatus::Notified, "ConnectionRefused").unwrap();
        assert_eq!(e.status, LogStatus::Harvested);
        assert_eq!(e.error_detail, None);
    }

    #[test]
    fn failure_then_retry() {
        let store = Datastore::open_in_memory().unwrap();
        let e = store.log_detect(&new_entry("a.txt", 1)).unwrap();
        let e = store.mark_failed(e.entry_id, LogStatus::Notified, "ConnectionRefused").unwrap();
        assert_eq!(e.status, LogStatus::Failed);
        assert_eq!(e.error_detail.as_deref(), Some("ConnectionRefused"));
        assert_eq!(e.attempts, 1);
        assert_eq!(e.progress(), LogStatus::Detected);
        let e = store.mark_notified(e.entry_id).unwrap();
        assert_eq!(e.status, LogStatus::Notified);
        assert_eq!(e.error_detail, None);
        let e = store.mark_failed_permanently(e.entry_id, LogStatus::Extracted, "E_NOCONFIG").unwrap();
        assert!(e.permanent);
        let e = store.mark_harvested(e.entry_id, "a").unwrap();
        assert!(!e.permanent);
    }

    #[test]
    fn versions_are_separate_entries() {
        let store = Datastore::open_in_memory().unwrap();
        let a = store.log_detect(&new_entry("a.txt", 1)).unwrap();
        assert_eq!(store.log_detect(&new_entry("a.txt", 1)).unwrap().entry_id, a.entry_id);
        let b = store.log_detect(&new_entry("a.txt", 2)).unwrap();
        assert_ne!(a.entry_id, b.entry_id);
        store.log_detect(&new_entry("b.txt", 1)).unwrap();
        assert_eq!(store.log_latest("XRD Bruker", "a.txt").unwrap().unwrap().version, 2);
        let latest = store.log_latest_for("XRD Bruker").unwrap();
        assert_eq!(
            latest.iter().map(|e| (e.source_path.as_str(), e.version)).collect::<Vec<_>>(),
            [("a.txt", 2), ("b.txt", 1)]
        );
        assert_eq!(store.log_by_source("bruker-pc", "a.txt").unwrap().unwrap().version, 2);
        assert!(store.log_detect(&new_entry("c.txt", 0)).is_err());
    }
}
