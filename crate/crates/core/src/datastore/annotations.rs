use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::{millis_to_utc, now_millis, Datastore, DatastoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum AnnotationTarget {
    Sample(i64),
    File(i64),
    Event(i64),
    Project(i64),
}

impl AnnotationTarget {
    fn parts(self) -> (&'static str, i64, &'static str) {
        match self {
            AnnotationTarget::Sample(id) => ("sample", id, "samples"),
            AnnotationTarget::File(id) => ("file", id, "file_information"),
            AnnotationTarget::Event(id) => ("event", id, "events"),
            AnnotationTarget::Project(id) => ("project", id, "projects"),
        }
    }

    fn from_parts(kind: &str, id: i64) -> Result<Self> {
        Ok(match kind {
            "sample" => AnnotationTarget::Sample(id),
            "file" => AnnotationTarget::File(id),
            "event" => AnnotationTarget::Event(id),
            "project" => AnnotationTarget::Project(id),
            other => return Err(DatastoreError::Corrupt(format!("annotation target '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Annotation {
    pub id: i64,
    pub target: AnnotationTarget,
    pub author: String,
    pub text: String,
    pub links: Vec<String>,
    pub created_at: DateTime<Utc>,
}

impl Datastore {
    pub fn annotate(&self, target: AnnotationTarget, author: &str, text: &str, links: &[String]) -> Result<i64> {
        let (kind, id, table) = target.parts();
        let conn = self.lock();
        let found: Option<i64> = conn
            .query_row(&format!("SELECT 1 FROM {table} WHERE id = ?1"), [id], |r| r.get(0))
            .optional()?;
        if found.is_none() {
            return Err(DatastoreError::UnknownTarget(format!("{kind} {id}")));
        }
        conn.execute(
            "INSERT INTO annotations (target_kind, target_id, author, body, links, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![kind, id, author, text, serde_json::to_string(links)?, now_millis()],
        )?;
        Ok(conn.last_insert_rowid())
    }

    /// Project governing access to `target`: the project itself, or the
    /// project of the sample behind a sample, event or file.
    pub fn target_project(&self, target: AnnotationTarget) -> Result<Option<i64>> {
        let sql = match target {
            AnnotationTarget::Project(_) => "SELECT id FROM projects WHERE id = ?1",
            AnnotationTarget::Sample(_) => "SELECT project_id FROM samples WHERE id = ?1",
            AnnotationTarget::Event(_) => {
                "SELECT s.project_id FROM events e LEFT JOIN samples s ON s.id = e.sample_id WHERE e.id = ?1"
            }
            AnnotationTarget::File(_) => {
                "SELECT s.project_id FROM file_information f JOIN events e ON e.id = f.event_id
                   LEFT JOIN samples s ON s.id = e.sample_id WHERE f.id = ?1"
            }
        };
        let (kind, id, _) = target.parts();
        self.lock()
            .query_row(sql, [id], |r| r.get::<_, Option<i64>>(0))
            .optional()?
            .ok_or_else(|| DatastoreError::UnknownTarget(format!("{kind} {id}")))
    }

    /// Annotations on `target` in insertion order.
    pub fn list_annotations(&self, target: AnnotationTarget) -> Result<Vec<Annotation>> {
        let (kind, id, _) = target.parts();
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT id, target_kind, target_id, author, body, links, created_at FROM annotations
              WHERE target_kind = ?1 AND target_id = ?2 ORDER BY id",
        )?;
        let rows = stmt.query_map(params![kind, id], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, i64>(6)?,
            ))
        })?;
        rows.map(|row| {
            let (id, kind, target_id, author, text, links, created) = row?;
            Ok(Annotation {
                id,
                target: AnnotationTarget::from_parts(&kind, target_id)?,
                author,
                text,
                links: serde_json::from_str(&links)?,
                created_at: millis_to_utc(created),
            })
        })
        .collect()
    }
}
