use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension, Transaction};
use serde::Serialize;

use super::semantic::{self, SemanticMapping};
use super::{millis_to_utc, now_millis, Datastore, DatastoreError, EventKind, ResolvedIds, Result};
use crate::format::{
    Aggregate, DataDocument, DataSeries, Descriptor, DocRole, Extras, FileLink, MetaDatum, NamedRef,
    Timestamp, ToolKind,
};

/// File-level facts not carried by the document itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FileFacts {
    pub archive_path: String,
    pub original_path: String,
    pub file_timestamp: DateTime<Utc>,
    pub size: u64,
    pub version: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileInformation {
    pub id: i64,
    pub event_id: i64,
    pub archive_path: String,
    pub original_path: String,
    pub file_timestamp: DateTime<Utc>,
    pub size: u64,
    pub version: i64,
}

/// Generic-model storage row: a descriptor array plus the ordered values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataArray {
    pub id: i64,
    pub file_id: i64,
    pub aggregate_index: usize,
    pub position: usize,
    /// Typically `[name, units]`.
    pub descriptors: Vec<String>,
    /// Parsed view; `None` where the lexeme is not a decimal number.
    pub values: Vec<Option<f64>>,
    /// Authoritative text as extracted.
    pub lexemes: Vec<String>,
}

impl DataArray {
    pub fn name(&self) -> &str {
        self.descriptors.first().map(String::as_str).unwrap_or("")
    }

    pub fn units(&self) -> &str {
        self.descriptors.get(1).map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReceipt {
    pub file_id: i64,
    pub version: i64,
    pub array_ids: Vec<i64>,
    pub semantic_ids: Vec<i64>,
    pub extracted_at: DateTime<Utc>,
    /// Rows dropped by lenient parsing.
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileSummary {
    pub file_id: i64,
    pub tool: String,
    pub sample: Option<String>,
    pub project: Option<String>,
    pub project_id: Option<i64>,
    pub date: DateTime<Utc>,
    pub archive_path: String,
    pub version: i64,
}

/// One row of the tap queue, written in the same transaction as the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapRecord {
    pub id: i64,
    pub file_id: i64,
    pub version: i64,
    pub tool_name: String,
    pub sample_code: Option<String>,
    pub project_id: Option<i64>,
    pub archive_path: String,
    pub extracted_at: DateTime<Utc>,
}

fn event_kind(kind: ToolKind) -> EventKind {
    match kind {
        ToolKind::Characterization => EventKind::Measurement,
        ToolKind::Processing => EventKind::Processing,
    }
}

fn procedure_id(tx: &Transaction<'_>, kind: EventKind, name: &str) -> Result<i64> {
    if let Some(id) = tx
        .query_row(
            "SELECT id FROM procedures WHERE kind = ?1 AND name = ?2",
            (kind.as_str(), name),
            |r| r.get(0),
        )
        .optional()?
    {
        return Ok(id);
    }
    tx.execute(
        "INSERT INTO procedures (kind, name) VALUES (?1, ?2)",
        (kind.as_str(), name),
    )?;
    Ok(tx.last_insert_rowid())
}

impl Datastore {
    /// Inserts one file row with its event and one array row per series,
    /// all in a single transaction.
    pub fn insert_file_with_arrays(
        &self,
        doc: &DataDocument,
        facts: &FileFacts,
        ids: &ResolvedIds,
    ) -> Result<(i64, Vec<i64>)> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let (file_id, arrays) = self.insert_file(&tx, doc, facts, ids)?;
        tx.commit()?;
        Ok((file_id, arrays))
    }

    fn insert_file(
        &self,
        tx: &Transaction<'_>,
        doc: &DataDocument,
        facts: &FileFacts,
        ids: &ResolvedIds,
    ) -> Result<(i64, Vec<i64>)> {
        let kind = event_kind(doc.kind);
        let occurred = facts.file_timestamp.timestamp_millis();
        let operator = ids.operator_id.or(doc.operator_id);
        tx.execute(
            "INSERT INTO events (kind, tool_id, operator_id, sample_id, occurred_at, procedure_name)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                kind.as_str(),
                ids.tool_id,
                operator,
                ids.sample_id,
                occurred,
                doc.measurement_type.name
            ],
        )?;
        let event_id = tx.last_insert_rowid();
        let proc_id = procedure_id(tx, kind, &doc.measurement_type.name)?;
        let ext = match kind {
            EventKind::Measurement => "measurement_events",
            EventKind::Processing => "processing_events",
        };
        tx.execute(
            &format!("INSERT INTO {ext} (event_id, procedure_id) VALUES (?1, ?2)"),
            (event_id, proc_id),
        )?;
        tx.execute(
            "INSERT INTO file_information
               (event_id, archive_path, original_path, file_timestamp, size, version,
                doc_timestamp, doc_id, link_timestamp, comments, aggregate_count)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)",
            params![
                event_id,
                facts.archive_path,
                facts.original_path,
                occurred,
                facts.size as i64,
                facts.version,
                doc.timestamp.as_str(),
                doc.doc_id,
                doc.data_file_link.timestamp.as_str(),
                doc.comments,
                doc.aggregates.len() as i64
            ],
        )?;
        let file_id = tx.last_insert_rowid();
        let arrays = self.insert_contents(tx, file_id, doc)?;
        Ok((file_id, arrays))
    }

    fn insert_contents(&self, tx: &Transaction<'_>, file_id: i64, doc: &DataDocument) -> Result<Vec<i64>> {
        let mut meta_stmt = tx.prepare_cached(
            "INSERT INTO file_metadata (file_id, aggregate_index, position, name, value, units, comments)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        )?;
        let mut array_stmt = tx.prepare_cached(
            "INSERT INTO data_arrays (file_id, aggregate_index, position, name, units, descriptors, vals, lexemes)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
        )?;
        let mut array_ids = Vec::new();
        for (ai, agg) in doc.aggregates.iter().enumerate() {
            for (pos, m) in agg.metadata.iter().enumerate() {
                meta_stmt.execute(params![file_id, ai, pos, m.name, m.value, m.units, m.comments])?;
            }
            for (pos, s) in agg.series.iter().enumerate() {
                self.take_fault(array_ids.len())?;
                let descriptors = serde_json::to_string(&[&s.descriptor.name, &s.descriptor.units])?;
                let values = serde_json::to_string(&s.numeric())?;
                let lexemes = serde_json::to_string(&s.data)?;
                array_stmt.execute(params![
                    file_id,
                    ai,
                    pos,
                    s.descriptor.name,
                    s.descriptor.units,
                    descriptors,
                    values,
                    lexemes
                ])?;
                array_ids.push(tx.last_insert_rowid());
            }
        }
        Ok(array_ids)
    }

    /// Stores an extracted document: inserts a new file row, or replaces the
    /// contents of the existing row for the same archive path when `facts`
    /// carries a newer version. Semantic promotion and the tap receipt are
    /// written in the same transaction.
    pub fn store_extraction(
        &self,
        doc: &DataDocument,
        facts: &FileFacts,
        ids: &ResolvedIds,
        semantic: Option<(&str, &SemanticMapping)>,
    ) -> Result<StorageReceipt> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let existing: Option<(i64, i64, i64)> = tx
            .query_row(
                "SELECT id, version, event_id FROM file_information WHERE archive_path = ?1
                 ORDER BY version DESC LIMIT 1",
                [&facts.archive_path],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?;

        let (file_id, array_ids) = match existing {
            None => self.insert_file(&tx, doc, facts, ids)?,
            Some((_, version, _)) if version >= facts.version => {
                return Err(DatastoreError::ConstraintViolation(format!(
                    "{} already stored at version {version}",
                    facts.archive_path
                )));
            }
            Some((file_id, _, event_id)) => {
                tx.execute("DELETE FROM data_arrays WHERE file_id = ?1", [file_id])?;
                tx.execute("DELETE FROM file_metadata WHERE file_id = ?1", [file_id])?;
                tx.execute("DELETE FROM jv_curves WHERE file_id = ?1", [file_id])?;
                tx.execute(
                    "UPDATE file_information SET original_path = ?1, file_timestamp = ?2, size = ?3,
                       version = ?4, doc_timestamp = ?5, doc_id = ?6, link_timestamp = ?7,
                       comments = ?8, aggregate_count = ?9
                     WHERE id = ?10",
                    params![
                        facts.original_path,
                        facts.file_timestamp.timestamp_millis(),
                        facts.size as i64,
                        facts.version,
                        doc.timestamp.as_str(),
                        doc.doc_id,
                        doc.data_file_link.timestamp.as_str(),
                        doc.comments,
                        doc.aggregates.len() as i64,
                        file_id
                    ],
                )?;
                tx.execute(
                    "UPDATE events SET operator_id = coalesce(?1, operator_id),
                       sample_id = coalesce(?2, sample_id), occurred_at = ?3, procedure_name = ?4
                     WHERE id = ?5",
                    params![
                        ids.operator_id.or(doc.operator_id),
                        ids.sample_id,
                        facts.file_timestamp.timestamp_millis(),
                        doc.measurement_type.name,
                        event_id
                    ],
                )?;
                let arrays = self.insert_contents(&tx, file_id, doc)?;
                (file_id, arrays)
            }
        };

        let semantic_ids = match semantic {
            Some((model, mapping)) => semantic::promote(&tx, file_id, model, mapping)?,
            None => Vec::new(),
        };

        let extracted_at = now_millis();
        let (tool_name, sample_code, project_id): (String, Option<String>, Option<i64>) = tx.query_row(
            "SELECT t.name, s.sample_code, s.project_id
               FROM file_information f JOIN events e ON e.id = f.event_id
               JOIN tools t ON t.id = e.tool_id LEFT JOIN samples s ON s.id = e.sample_id
              WHERE f.id = ?1",
            [file_id],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
        )?;
        tx.execute(
            "INSERT OR IGNORE INTO tap_receipts
               (file_id, version, tool_name, sample_code, project_id, archive_path, extracted_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![file_id, facts.version, tool_name, sample_code, project_id, facts.archive_path, extracted_at],
        )?;
        tx.commit()?;
        Ok(StorageReceipt {
            file_id,
            version: facts.version,
            array_ids,
            semantic_ids,
            extracted_at: millis_to_utc(extracted_at),
            skipped_rows: 0,
        })
    }

    pub fn file(&self, file_id: i64) -> Result<FileInformation> {
        self.lock()
            .query_row(
                "SELECT id, event_id, archive_path, original_path, file_timestamp, size, version
                   FROM file_information WHERE id = ?1",
                [file_id],
                file_row,
            )
            .optional()?
            .ok_or_else(|| DatastoreError::NotFound(format!("file {file_id}")))
    }

    pub fn file_by_archive_path(&self, archive_path: &str) -> Result<Option<FileInformation>> {
        Ok(self
            .lock()
            .query_row(
                "SELECT id, event_id, archive_path, original_path, file_timestamp, size, version
                   FROM file_information WHERE archive_path = ?1 ORDER BY version DESC LIMIT 1",
                [archive_path],
                file_row,
            )
            .optional()?)
    }

    pub fn file_count(&self) -> Result<i64> {
        Ok(self
            .lock()
            .query_row("SELECT count(*) FROM file_information", [], |r| r.get(0))?)
    }

    pub fn file_arrays(&self, file_id: i64) -> Result<Vec<DataArray>> {
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT id, file_id, aggregate_index, position, descriptors, vals, lexemes
               FROM data_arrays WHERE file_id = ?1 ORDER BY aggregate_index, position",
        )?;
        let rows = stmt.query_map([file_id], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, i64>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, String>(6)?,
            ))
        })?;
        rows.map(|row| {
            let (id, file_id, agg, pos, desc, vals, lex) = row?;
            Ok(DataArray {
                id,
                file_id,
                aggregate_index: agg as usize,
                position: pos as usize,
                descriptors: serde_json::from_str(&desc)?,
                values: serde_json::from_str(&vals)?,
                lexemes: serde_json::from_str(&lex)?,
            })
        })
        .collect()
    }

    pub fn file_metadata(&self, file_id: i64) -> Result<Vec<(usize, MetaDatum)>> {
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT aggregate_index, name, value, units, comments
               FROM file_metadata WHERE file_id = ?1 ORDER BY aggregate_index, position",
        )?;
        let rows = stmt.query_map([file_id], |r| {
            Ok((
                r.get::<_, i64>(0)? as usize,
                MetaDatum {
                    name: r.get(1)?,
                    value: r.get(2)?,
                    units: r.get(3)?,
                    comments: r.get(4)?,
                    extras: Extras::default(),
                },
            ))
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Rebuilds a `role=readback` document from stored rows.
    pub fn load_document(&self, file_id: i64) -> Result<DataDocument> {
        struct Header {
            kind: String,
            tool_id: i64,
            tool_name: String,
            operator_id: Option<i64>,
            procedure: String,
            procedure_id: Option<i64>,
            archive_path: String,
            doc_timestamp: String,
            doc_id: String,
            link_timestamp: String,
            comments: String,
            aggregate_count: i64,
        }
        let header = self
            .lock()
            .query_row(
                "SELECT e.kind, t.id, t.name, e.operator_id, e.procedure_name,
                        coalesce(m.procedure_id, p.procedure_id),
                        f.archive_path, f.doc_timestamp, f.doc_id, f.link_timestamp, f.comments,
                        f.aggregate_count
                   FROM file_information f
                   JOIN events e ON e.id = f.event_id
                   JOIN tools t ON t.id = e.tool_id
                   LEFT JOIN measurement_events m ON m.event_id = e.id
                   LEFT JOIN processing_events p ON p.event_id = e.id
                  WHERE f.id = ?1",
                [file_id],
                |r| {
                    Ok(Header {
                        kind: r.get(0)?,
                        tool_id: r.get(1)?,
                        tool_name: r.get(2)?,
                        operator_id: r.get(3)?,
                        procedure: r.get(4)?,
                        procedure_id: r.get(5)?,
                        archive_path: r.get(6)?,
                        doc_timestamp: r.get(7)?,
                        doc_id: r.get(8)?,
                        link_timestamp: r.get(9)?,
                        comments: r.get(10)?,
                        aggregate_count: r.get(11)?,
                    })
                },
            )
            .optional()?
            .ok_or_else(|| DatastoreError::NotFound(format!("file {file_id}")))?;

        let kind = match EventKind::parse(&header.kind)? {
            EventKind::Measurement => ToolKind::Characterization,
            EventKind::Processing => ToolKind::Processing,
        };
        let mut aggregates = vec![Aggregate::default(); header.aggregate_count.max(0) as usize];
        for (ai, m) in self.file_metadata(file_id)? {
            aggregates
                .get_mut(ai)
                .ok_or_else(|| DatastoreError::Corrupt(format!("metadata aggregate {ai}")))?
                .metadata
                .push(m);
        }
        for a in self.file_arrays(file_id)? {
            let descriptor = Descriptor::new(a.name(), a.units());
            aggregates
                .get_mut(a.aggregate_index)
                .ok_or_else(|| DatastoreError::Corrupt(format!("array aggregate {}", a.aggregate_index)))?
                .series
                .push(DataSeries::new(descriptor, a.lexemes));
        }
        let ts = |s: &str| Timestamp::parse(s).map_err(DatastoreError::Corrupt);
        Ok(DataDocument {
            role: DocRole::Readback,
            timestamp: ts(&header.doc_timestamp)?,
            doc_id: header.doc_id,
            kind,
            measurement_type: NamedRef::new(header.procedure_id, header.procedure),
            tool: NamedRef::new(Some(header.tool_id), header.tool_name),
            operator_id: header.operator_id,
            data_file_link: FileLink {
                timestamp: ts(&header.link_timestamp)?,
                file: header.archive_path,
            },
            comments: header.comments,
            aggregates,
            extras: Extras::default(),
            body_extras: Extras::default(),
        })
    }

    pub fn file_summaries(&self, ids: &[i64]) -> Result<Vec<FileSummary>> {
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT f.id, t.name, s.sample_code, p.name, p.id, f.file_timestamp, f.archive_path, f.version
               FROM file_information f
               JOIN events e ON e.id = f.event_id
               JOIN tools t ON t.id = e.tool_id
               LEFT JOIN samples s ON s.id = e.sample_id
               LEFT JOIN projects p ON p.id = s.project_id
              WHERE f.id = ?1",
        )?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let row = stmt
                .query_row([id], |r| {
                    Ok(FileSummary {
                        file_id: r.get(0)?,
                        tool: r.get(1)?,
                        sample: r.get(2)?,
                        project: r.get(3)?,
                        project_id: r.get(4)?,
                        date: millis_to_utc(r.get(5)?),
                        archive_path: r.get(6)?,
                        version: r.get(7)?,
                    })
                })
                .optional()?;
            if let Some(row) = row {
                out.push(row);
            }
        }
        Ok(out)
    }

    /// Project a file belongs to through its sample, if any.
    pub fn file_project(&self, file_id: i64) -> Result<Option<i64>> {
        let row: Option<Option<i64>> = self
            .lock()
            .query_row(
                "SELECT s.project_id FROM file_information f JOIN events e ON e.id = f.event_id
                   LEFT JOIN samples s ON s.id = e.sample_id WHERE f.id = ?1",
                [file_id],
                |r| r.get(0),
            )
            .optional()?;
        row.ok_or_else(|| DatastoreError::NotFound(format!("file {file_id}")))
    }

    pub fn tap_records_after(&self, cursor: i64, limit: usize) -> Result<Vec<TapRecord>> {
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT id, file_id, version, tool_name, sample_code, project_id, archive_path, extracted_at
               FROM tap_receipts WHERE id > ?1 ORDER BY id LIMIT ?2",
        )?;
        let rows = stmt.query_map((cursor, limit as i64), |r| {
            Ok(TapRecord {
                id: r.get(0)?,
                file_id: r.get(1)?,
                version: r.get(2)?,
                tool_name: r.get(3)?,
                sample_code: r.get(4)?,
                project_id: r.get(5)?,
                archive_path: r.get(6)?,
                extracted_at: millis_to_utc(r.get(7)?),
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn last_tap_record_id(&self) -> Result<i64> {
        Ok(self
            .lock()
            .query_row("SELECT coalesce(max(id), 0) FROM tap_receipts", [], |r| r.get(0))?)
    }
}

fn file_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<FileInformation> {
    Ok(FileInformation {
        id: r.get(0)?,
        event_id: r.get(1)?,
        archive_path: r.get(2)?,
        original_path: r.get(3)?,
        file_timestamp: millis_to_utc(r.get(4)?),
        size: r.get::<_, i64>(5)? as u64,
        version: r.get(6)?,
    })
}
