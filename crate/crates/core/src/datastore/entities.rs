use rusqlite::{Connection, OptionalExtension};
use serde::Serialize;

use super::{Datastore, DatastoreError, Result};
use crate::format::{ToolInfo, ToolKind};

/// Datastore ids resolved by natural key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ResolvedIds {
    pub tool_id: i64,
    pub sample_id: Option<i64>,
    pub project_id: Option<i64>,
    pub operator_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolRow {
    pub id: i64,
    pub name: String,
    pub kind: ToolKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProjectRow {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleRow {
    pub id: i64,
    pub sample_code: String,
    pub project_id: Option<i64>,
    pub description: String,
    pub storage_method: String,
}

fn get_or_create(conn: &Connection, select: &str, insert: &str, key: &str) -> Result<i64> {
    if let Some(id) = conn.query_row(select, [key], |r| r.get(0)).optional()? {
        return Ok(id);
    }
    conn.execute(insert, [key])?;
    Ok(conn.last_insert_rowid())
}

pub(super) fn register(
    conn: &Connection,
    tool: &ToolInfo,
    sample_code: Option<&str>,
    project: Option<&str>,
    operator: Option<&str>,
) -> Result<ResolvedIds> {
    if tool.name.is_empty() {
        return Err(DatastoreError::ConstraintViolation("tool name must be nonempty".into()));
    }
    let tool_id = match conn
        .query_row("SELECT id FROM tools WHERE name = ?1", [&tool.name], |r| r.get(0))
        .optional()?
    {
        Some(id) => id,
        None => {
            conn.execute(
                "INSERT INTO tools (name, kind) VALUES (?1, ?2)",
                (&tool.name, tool.kind.as_str()),
            )?;
            conn.last_insert_rowid()
        }
    };

    let project_id = project
        .filter(|p| !p.is_empty())
        .map(|p| {
            get_or_create(
                conn,
                "SELECT id FROM projects WHERE name = ?1",
                "INSERT INTO projects (name) VALUES (?1)",
                p,
            )
        })
        .transpose()?;

    let sample_id = match sample_code.filter(|s| !s.is_empty()) {
        None => None,
        Some(code) => {
            let existing: Option<(i64, Option<i64>)> = conn
                .query_row(
                    "SELECT id, project_id FROM samples WHERE sample_code = ?1",
                    [code],
                    |r| Ok((r.get(0)?, r.get(1)?)),
                )
                .optional()?;
            match existing {
                Some((id, linked)) => {
                    if linked.is_none() && project_id.is_some() {
                        conn.execute(
                            "UPDATE samples SET project_id = ?1 WHERE id = ?2",
                            (project_id, id),
                        )?;
                    }
                    Some(id)
                }
                None => {
                    conn.execute(
                        "INSERT INTO samples (sample_code, project_id) VALUES (?1, ?2)",
                        (code, project_id),
                    )?;
                    Some(conn.last_insert_rowid())
                }
            }
        }
    };

    // a sample already linked elsewhere keeps its project
    let project_id = match sample_id {
        Some(id) => conn.query_row("SELECT project_id FROM samples WHERE id = ?1", [id], |r| r.get(0))?,
        None => project_id,
    };

    let operator_id = operator
        .filter(|u| !u.is_empty())
        .map(|u| {
            get_or_create(
                conn,
                "SELECT id FROM operators WHERE username = ?1",
                "INSERT INTO operators (username) VALUES (?1)",
                u,
            )
        })
        .transpose()?;

    Ok(ResolvedIds {
        tool_id,
        sample_id,
        project_id,
        operator_id,
    })
}

impl Datastore {
    /// Idempotent get-or-create by natural key (tool name, sample code,
    /// project name, username). Names are case-sensitive.
    pub fn register_entities(
        &self,
        tool: &ToolInfo,
        sample_code: Option<&str>,
        project: Option<&str>,
        operator: Option<&str>,
    ) -> Result<ResolvedIds> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let ids = register(&tx, tool, sample_code, project, operator)?;
        tx.commit()?;
        Ok(ids)
    }

    pub fn project_id(&self, name: &str) -> Result<Option<i64>> {
        Ok(self
            .lock()
            .query_row("SELECT id FROM projects WHERE name = ?1", [name], |r| r.get(0))
            .optional()?)
    }

    pub fn ensure_project(&self, name: &str) -> Result<i64> {
        let conn = self.lock();
        get_or_create(
            &conn,
            "SELECT id FROM projects WHERE name = ?1",
            "INSERT INTO projects (name) VALUES (?1)",
            name,
        )
    }

    pub fn operator_username(&self, id: i64) -> Result<Option<String>> {
        Ok(self
            .lock()
            .query_row("SELECT username FROM operators WHERE id = ?1", [id], |r| r.get(0))
            .optional()?)
    }

    pub fn tools(&self) -> Result<Vec<ToolRow>> {
        let conn = self.lock();
        let mut stmt = conn.prepare("SELECT id, name, kind FROM tools ORDER BY id")?;
        let rows = stmt.query_map([], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?))
        })?;
        rows.map(|row| {
            let (id, name, kind) = row?;
            let kind = kind
                .parse::<ToolKind>()
                .map_err(DatastoreError::Corrupt)?;
            Ok(ToolRow { id, name, kind })
        })
        .collect()
    }

    pub fn projects(&self) -> Result<Vec<ProjectRow>> {
        let conn = self.lock();
        let mut stmt = conn.prepare("SELECT id, name FROM projects ORDER BY id")?;
        let rows = stmt.query_map([], |r| {
            Ok(ProjectRow {
                id: r.get(0)?,
                name: r.get(1)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn samples(&self) -> Result<Vec<SampleRow>> {
        let conn = self.lock();
        let mut stmt = conn.prepare(
            "SELECT id, sample_code, project_id, description, storage_method FROM samples ORDER BY id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(SampleRow {
                id: r.get(0)?,
                sample_code: r.get(1)?,
                project_id: r.get(2)?,
                description: r.get(3)?,
                storage_method: r.get(4)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn sample_by_code(&self, code: &str) -> Result<Option<SampleRow>> {
        Ok(self.samples()?.into_iter().find(|s| s.sample_code == code))
    }

    pub fn set_sample_details(&self, sample_id: i64, description: &str, storage_method: &str) -> Result<()> {
        let n = self.lock().execute(
            "UPDATE samples SET description = ?1, storage_method = ?2 WHERE id = ?3",
            (description, storage_method, sample_id),
        )?;
        if n == 0 {
            return Err(DatastoreError::NotFound(format!("sample {sample_id}")));
        }
        Ok(())
    }

    pub fn grant(&self, username: &str, project_id: i64) -> Result<()> {
        self.lock().execute(
            "INSERT OR IGNORE INTO user_grants (username, project_id) VALUES (?1, ?2)",
            (username, project_id),
        )?;
        Ok(())
    }

    pub fn grants_for(&self, username: &str) -> Result<Vec<i64>> {
        let conn = self.lock();
        let mut stmt =
            conn.prepare("SELECT project_id FROM user_grants WHERE username = ?1 ORDER BY project_id")?;
        let rows = stmt.query_map([username], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nandk() -> ToolInfo {
        ToolInfo::new("N and K", ToolKind::Characterization)
    }

    #[test]
    fn registration_is_idempotent() {
        let store = Datastore::open_in_memory().unwrap();
        let a = store.register_entities(&nandk(), None, None, None).unwrap();
        let b = store.register_entities(&nandk(), None, None, None).unwrap();
        assert_eq!(a.tool_id, b.tool_id);
        assert_eq!(store.tools().unwrap().len(), 1);
    }

    #[test]
    fn sample_links_to_project() {
        let store = Datastore::open_in_memory().unwrap();
        let tool = ToolInfo::new("XRD Bruker", ToolKind::Characterization);
        let ids = store
            .register_entities(&tool, Some("cigs-0013-00023"), Some("CIGS"), Some("jdoe"))
            .unwrap();
        let sample = store.sample_by_code("cigs-0013-00023").unwrap().unwrap();
        assert_eq!(Some(sample.id), ids.sample_id);
        assert_eq!(sample.project_id, ids.project_id);
        assert_eq!(store.project_id("CIGS").unwrap(), ids.project_id);
        assert_eq!(store.operator_username(ids.operator_id.unwrap()).unwrap().as_deref(), Some("jdoe"));

        // later registration without project keeps the existing link
        let again = store.register_entities(&tool, Some("cigs-0013-00023"), None, None).unwrap();
        assert_eq!(again.project_id, ids.project_id);
    }

    #[test]
    fn names_are_case_sensitive() {
        let store = Datastore::open_in_memory().unwrap();
        let a = store.register_entities(&nandk(), None, Some("CIGS"), None).unwrap();
        let b = store
            .register_entities(&ToolInfo::new("n and k", ToolKind::Characterization), None, Some("cigs"), None)
            .unwrap();
        assert_ne!(a.tool_id, b.tool_id);
        assert_eq!(store.projects().unwrap().len(), 2);
    }

    #[test]
    fn grants_are_unique() {
        let store = Datastore::open_in_memory().unwrap();
        let p = store.ensure_project("CIGS").unwrap();
        store.grant("jdoe", p).unwrap();
        store.grant("jdoe", p).unwrap();
        assert_eq!(store.grants_for("jdoe").unwrap(), vec![p]);
        assert!(store.grants_for("nobody").unwrap().is_empty());
    }
}
