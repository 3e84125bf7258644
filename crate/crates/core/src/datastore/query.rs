//! Boolean search over stored files.
//!
//! A query is an AND/OR/NOT tree over atomic predicates. It is compiled to a
//! single SQL `WHERE` clause; every atom is wrapped so that missing joins
//! (no sample, no project) read as false rather than SQL NULL, which keeps
//! `NOT` two-valued.

use std::collections::BTreeSet;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use rusqlite::types::Value;
use serde::{Deserialize, Serialize};

use super::{millis_to_utc, Datastore, DatastoreError, Result};
use crate::format::Timestamp;

pub const MAX_QUERY_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Exact tool name.
    ToolName(String),
    /// Exact project name.
    Project(String),
    /// Substring of the sample code.
    SampleCode(String),
    /// Inclusive bounds on the file timestamp; dates or ISO-8601 instants.
    DateRange {
        #[serde(default)]
        from: Option<String>,
        #[serde(default)]
        to: Option<String>,
    },
    /// Exact name of any stored series descriptor.
    DescriptorName(String),
    /// Substring of the archive path.
    FilePath(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BooleanQuery {
    And(Vec<BooleanQuery>),
    Or(Vec<BooleanQuery>),
    Not(Box<BooleanQuery>),
    #[serde(untagged)]
    Atom(Predicate),
}

impl BooleanQuery {
    pub fn all() -> Self {
        BooleanQuery::And(Vec::new())
    }

    pub fn atom(p: Predicate) -> Self {
        BooleanQuery::Atom(p)
    }

    pub fn and(parts: impl IntoIterator<Item = BooleanQuery>) -> Self {
        BooleanQuery::And(parts.into_iter().collect())
    }

    pub fn or(parts: impl IntoIterator<Item = BooleanQuery>) -> Self {
        BooleanQuery::Or(parts.into_iter().collect())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(q: BooleanQuery) -> Self {
        BooleanQuery::Not(Box::new(q))
    }

    /// Parses the JSON form. `null` and `{}` mean "everything".
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        match v {
            serde_json::Value::Null => return Ok(Self::all()),
            serde_json::Value::Object(m) if m.is_empty() => return Ok(Self::all()),
            _ => {}
        }
        let q: BooleanQuery = serde_json::from_value(v.clone())
            .map_err(|e| DatastoreError::MalformedQuery(e.to_string()))?;
        q.validate()?;
        Ok(q)
    }

    pub fn depth(&self) -> usize {
        match self {
            BooleanQuery::And(v) | BooleanQuery::Or(v) => 1 + v.iter().map(Self::depth).max().unwrap_or(0),
            BooleanQuery::Not(q) => 1 + q.depth(),
            BooleanQuery::Atom(_) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() > MAX_QUERY_DEPTH {
            return Err(DatastoreError::MalformedQuery(format!(
                "query nesting exceeds {MAX_QUERY_DEPTH}"
            )));
        }
        self.visit_atoms(&mut |p| match p {
            Predicate::DateRange { from, to } => {
                let from = from.as_deref().map(|s| parse_bound(s, false)).transpose()?;
                let to = to.as_deref().map(|s| parse_bound(s, true)).transpose()?;
                if let (Some(f), Some(t)) = (from, to) {
                    if f > t {
                        return Err(DatastoreError::MalformedQuery("date_range from is after to".into()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        })
    }

    fn visit_atoms(&self, f: &mut impl FnMut(&Predicate) -> Result<()>) -> Result<()> {
        match self {
            BooleanQuery::And(v) | BooleanQuery::Or(v) => v.iter().try_for_each(|q| q.visit_atoms(f)),
            BooleanQuery::Not(q) => q.visit_atoms(f),
            BooleanQuery::Atom(p) => f(p),
        }
    }
}

/// Parses a date-range bound to epoch milliseconds. Bare dates cover the
/// whole day: start of day for `from`, last millisecond for `to`.
pub fn parse_bound(s: &str, upper: bool) -> Result<i64> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        let t = if upper {
            NaiveTime::from_hms_milli_opt(23, 59, 59, 999).expect("valid")
        } else {
            NaiveTime::MIN
        };
        return Ok(d.and_time(t).and_utc().timestamp_millis());
    }
    Timestamp::parse(s)
        .map(|t| t.to_utc().timestamp_millis())
        .map_err(DatastoreError::MalformedQuery)
}

/// Projects the caller may see. Files without a project are always visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Projects(BTreeSet<i64>),
}

impl Scope {
    pub fn admits(&self, project: Option<i64>) -> bool {
        match (self, project) {
            (Scope::All, _) | (_, None) => true,
            (Scope::Projects(set), Some(p)) => set.contains(&p),
        }
    }
}

fn compile(q: &BooleanQuery, sql: &mut String, args: &mut Vec<Value>) -> Result<()> {
    match q {
        BooleanQuery::And(parts) | BooleanQuery::Or(parts) if parts.is_empty() => {
            sql.push_str(if matches!(q, BooleanQuery::And(_)) { "1" } else { "0" });
        }
        BooleanQuery::And(parts) | BooleanQuery::Or(parts) => {
            let op = if matches!(q, BooleanQuery::And(_)) { " AND " } else { " OR " };
            sql.push('(');
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    sql.push_str(op);
                }
                compile(p, sql, args)?;
            }
            sql.push(')');
        }
        BooleanQuery::Not(inner) => {
            sql.push_str("(NOT ");
            compile(inner, sql, args)?;
            sql.push(')');
        }
        BooleanQuery::Atom(p) => {
            let clause = match p {
                Predicate::ToolName(v) => {
                    args.push(Value::Text(v.clone()));
                    "t.name = ?"
                }
                Predicate::Project(v) => {
                    args.push(Value::Text(v.clone()));
                    "coalesce(p.name = ?, 0)"
                }
                Predicate::SampleCode(v) => {
                    args.push(Value::Text(v.clone()));
                    "coalesce(instr(s.sample_code, ?) > 0, 0)"
                }
                Predicate::DateRange { from, to } => {
                    let lo = from.as_deref().map(|s| parse_bound(s, false)).transpose()?;
                    let hi = to.as_deref().map(|s| parse_bound(s, true)).transpose()?;
                    args.push(Value::Integer(lo.unwrap_or(i64::MIN)));
                    args.push(Value::Integer(hi.unwrap_or(i64::MAX)));
                    "(f.file_timestamp BETWEEN ? AND ?)"
                }
                Predicate::DescriptorName(v) => {
                    args.push(Value::Text(v.clone()));
                    "EXISTS (SELECT 1 FROM data_arrays a WHERE a.file_id = f.id AND a.name = ?)"
                }
                Predicate::FilePath(v) => {
                    args.push(Value::Text(v.clone()));
                    "(instr(f.archive_path, ?) > 0)"
                }
            };
            sql.push_str(clause);
        }
    }
    Ok(())
}

/// Flat per-file view used for brute-force checks and listings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRow {
    pub file_id: i64,
    pub tool_name: String,
    pub project: Option<String>,
    pub project_id: Option<i64>,
    pub sample_code: Option<String>,
    pub file_timestamp: DateTime<Utc>,
    pub archive_path: String,
    pub descriptor_names: Vec<String>,
}

impl Datastore {
    /// Ids of files matching `query` within `scope`, ascending, no duplicates.
    pub fn evaluate(&self, query: &BooleanQuery, scope: &Scope) -> Result<Vec<i64>> {
        query.validate()?;
        let mut sql = String::from(
            "SELECT f.id FROM file_information f
               JOIN events e ON e.id = f.event_id
               JOIN tools t ON t.id = e.tool_id
               LEFT JOIN samples s ON s.id = e.sample_id
               LEFT JOIN projects p ON p.id = s.project_id
              WHERE ",
        );
        let mut args = Vec::new();
        compile(query, &mut sql, &mut args)?;
        if let Scope::Projects(set) = scope {
            sql.push_str(" AND (s.project_id IS NULL");
            if !set.is_empty() {
                sql.push_str(" OR s.project_id IN (");
                for (i, p) in set.iter().enumerate() {
                    if i > 0 {
                        sql.push(',');
                    }
                    sql.push('?');
                    args.push(Value::Integer(*p));
                }
                sql.push(')');
            }
            sql.push(')');
        }
        sql.push_str(" ORDER BY f.id");
        let conn = self.lock();
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt.query_map(rusqlite::params_from_iter(args), |r| r.get::<_, i64>(0))?;
        let mut ids: Vec<i64> = rows.collect::<rusqlite::Result<_>>()?;
        ids.dedup();
        Ok(ids)
    }

    /// Every file with the attributes predicates refer to. Issued as plain
    /// per-table reads so it shares no SQL with [`Datastore::evaluate`].
    pub fn file_rows(&self) -> Result<Vec<FileRow>> {
        let conn = self.lock();
        let mut names = std::collections::HashMap::<i64, Vec<String>>::new();
        {
            let mut stmt = conn.prepare("SELECT file_id, name FROM data_arrays")?;
            for row in stmt.query_map([], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?)))? {
                let (f, n) = row?;
                names.entry(f).or_default().push(n);
            }
        }
        let tools: std::collections::HashMap<i64, String> = conn
            .prepare("SELECT id, name FROM tools")?
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<rusqlite::Result<_>>()?;
        let projects: std::collections::HashMap<i64, String> = conn
            .prepare("SELECT id, name FROM projects")?
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<rusqlite::Result<_>>()?;
        let samples: std::collections::HashMap<i64, (String, Option<i64>)> = conn
            .prepare("SELECT id, sample_code, project_id FROM samples")?
            .query_map([], |r| Ok((r.get(0)?, (r.get(1)?, r.get(2)?))))?
            .collect::<rusqlite::Result<_>>()?;
        let events: std::collections::HashMap<i64, (i64, Option<i64>)> = conn
            .prepare("SELECT id, tool_id, sample_id FROM events")?
            .query_map([], |r| Ok((r.get(0)?, (r.get(1)?, r.get(2)?))))?
            .collect::<rusqlite::Result<_>>()?;

        let mut stmt =
            conn.prepare("SELECT id, event_id, file_timestamp, archive_path FROM file_information ORDER BY id")?;
        let files = stmt.query_map([], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?, r.get::<_, i64>(2)?, r.get::<_, String>(3)?))
        })?;
        let mut out = Vec::new();
        for f in files {
            let (id, event_id, ts, path) = f?;
            let (tool_id, sample_id) = events
                .get(&event_id)
                .copied()
                .ok_or_else(|| DatastoreError::Corrupt(format!("event {event_id}")))?;
            let sample = sample_id.and_then(|s| samples.get(&s));
            let project_id = sample.and_then(|(_, p)| *p);
            out.push(FileRow {
                file_id: id,
                tool_name: tools.get(&tool_id).cloned().unwrap_or_default(),
                project: project_id.and_then(|p| projects.get(&p).cloned()),
                project_id,
                sample_code: sample.map(|(c, _)| c.clone()),
                file_timestamp: millis_to_utc(ts),
                archive_path: path,
                descriptor_names: names.remove(&id).unwrap_or_default(),
            });
        }
        Ok(out)
    }
}
