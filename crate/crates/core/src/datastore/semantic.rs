//! Semantic models derived from generic arrays.
//!
//! Promotion only adds rows: the generic arrays a curve was built from are
//! left untouched, so a tool can move from the generic model to a semantic
//! one without re-extracting its files.

use rusqlite::{params, Transaction};
use serde::{Deserialize, Serialize};

use super::{Datastore, DatastoreError, Result};

pub const JV_MODEL: &str = "jv_curve";

/// Which stored descriptors and metadata feed a semantic model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticMapping {
    pub x_descriptor: String,
    pub y_descriptor: String,
    pub device_meta_key: String,
}

impl Default for SemanticMapping {
    fn default() -> Self {
        SemanticMapping {
            x_descriptor: "Voltage".into(),
            y_descriptor: "Current".into(),
            device_meta_key: "device".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JvCurve {
    pub id: i64,
    pub file_id: i64,
    pub sample_id: Option<i64>,
    pub device_id: String,
    /// (voltage in volts, current in amperes), in stored order.
    pub points: Vec<(f64, f64)>,
}

struct StoredSeries {
    aggregate: i64,
    name: String,
    values: Vec<Option<f64>>,
}

/// Builds one curve per aggregate that carries the x descriptor. Any
/// aggregate failing the checks rolls the whole promotion back.
pub(super) fn promote(tx: &Transaction<'_>, file_id: i64, model: &str, mapping: &SemanticMapping) -> Result<Vec<i64>> {
    if model != JV_MODEL {
        return Err(DatastoreError::UnknownModel(model.to_string()));
    }
    let exists: i64 = tx.query_row(
        "SELECT count(*) FROM file_information WHERE id = ?1",
        [file_id],
        |r| r.get(0),
    )?;
    if exists == 0 {
        return Err(DatastoreError::NotFound(format!("file {file_id}")));
    }

    let series: Vec<StoredSeries> = {
        let mut stmt = tx.prepare_cached(
            "SELECT aggregate_index, name, vals FROM data_arrays WHERE file_id = ?1
              ORDER BY aggregate_index, position",
        )?;
        let rows = stmt.query_map([file_id], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?))
        })?;
        rows.map(|row| {
            let (aggregate, name, vals) = row?;
            Ok(StoredSeries {
                aggregate,
                name,
                values: serde_json::from_str(&vals)?,
            })
        })
        .collect::<Result<_>>()?
    };

    let find = |agg: i64, name: &str| series.iter().find(|s| s.aggregate == agg && s.name == name);
    let mut aggregates: Vec<i64> = series
        .iter()
        .filter(|s| s.name == mapping.x_descriptor)
        .map(|s| s.aggregate)
        .collect();
    aggregates.dedup();
    if aggregates.is_empty() {
        return Err(DatastoreError::MissingDescriptor(mapping.x_descriptor.clone()));
    }

    let sample_id: Option<i64> = tx.query_row(
        "SELECT e.sample_id FROM file_information f JOIN events e ON e.id = f.event_id WHERE f.id = ?1",
        [file_id],
        |r| r.get(0),
    )?;

    tx.execute("DELETE FROM jv_curves WHERE file_id = ?1", [file_id])?;
    let mut ids = Vec::new();
    for agg in aggregates {
        let x = find(agg, &mapping.x_descriptor).expect("aggregate chosen by x");
        let y = find(agg, &mapping.y_descriptor)
            .ok_or_else(|| DatastoreError::MissingDescriptor(mapping.y_descriptor.clone()))?;
        if x.values.len() != y.values.len() {
            return Err(DatastoreError::UnequalLengths {
                x: x.values.len(),
                y: y.values.len(),
            });
        }
        if x.values.is_empty() {
            return Err(DatastoreError::MissingDescriptor(format!(
                "{} has no points",
                mapping.x_descriptor
            )));
        }
        let xs = numeric(&x.values, &x.name)?;
        let ys = numeric(&y.values, &y.name)?;

        let device: Option<(String, Option<String>)> = {
            let mut stmt = tx.prepare_cached(
                "SELECT value, comments FROM file_metadata
                  WHERE file_id = ?1 AND aggregate_index = ?2 AND name = ?3 ORDER BY position LIMIT 1",
            )?;
            let mut rows = stmt.query(params![file_id, agg, mapping.device_meta_key])?;
            match rows.next()? {
                Some(r) => Some((r.get(0)?, r.get(1)?)),
                None => None,
            }
        };
        let device_id = match device {
            Some((v, _)) if !v.is_empty() => v,
            Some((_, Some(c))) => c,
            _ => format!("aggregate-{agg}"),
        };

        tx.execute(
            "INSERT INTO jv_curves (file_id, sample_id, device_id, aggregate_index) VALUES (?1, ?2, ?3, ?4)",
            params![file_id, sample_id, device_id, agg],
        )?;
        let curve_id = tx.last_insert_rowid();
        let mut stmt = tx.prepare_cached(
            "INSERT INTO jv_points (curve_id, idx, voltage, current) VALUES (?1, ?2, ?3, ?4)",
        )?;
        for (i, (v, c)) in xs.iter().zip(&ys).enumerate() {
            stmt.execute(params![curve_id, i as i64, v, c])?;
        }
        ids.push(curve_id);
    }
    Ok(ids)
}

fn numeric(values: &[Option<f64>], name: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| v.ok_or_else(|| DatastoreError::NonNumeric(name.to_string())))
        .collect()
}

impl Datastore {
    /// Promotes a stored file into a semantic model. Currently only
    /// [`JV_MODEL`] is defined.
    pub fn promote_semantic(&self, file_id: i64, model: &str, mapping: &SemanticMapping) -> Result<Vec<i64>> {
        let mut conn = self.lock();
        let tx = conn.transaction()?;
        let ids = promote(&tx, file_id, model, mapping)?;
        tx.commit()?;
        Ok(ids)
    }

    pub fn jv_curves(&self, file_id: i64) -> Result<Vec<JvCurve>> {
        let conn = self.lock();
        let mut stmt = conn.prepare_cached(
            "SELECT id, file_id, sample_id, device_id FROM jv_curves WHERE file_id = ?1 ORDER BY id",
        )?;
        let heads: Vec<(i64, i64, Option<i64>, String)> = stmt
            .query_map([file_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))?
            .collect::<rusqlite::Result<_>>()?;
        let mut pts = conn.prepare_cached(
            "SELECT voltage, current FROM jv_points WHERE curve_id = ?1 ORDER BY idx",
        )?;
        heads
            .into_iter()
            .map(|(id, file_id, sample_id, device_id)| {
                let points = pts
                    .query_map([id], |r| Ok((r.get(0)?, r.get(1)?)))?
                    .collect::<rusqlite::Result<_>>()?;
                Ok(JvCurve {
                    id,
                    file_id,
                    sample_id,
                    device_id,
                    points,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::files::tests::fig5_facts;
    use crate::format::{
        Aggregate, DataDocument, DataSeries, Descriptor, DocRole, Extras, FileLink, MetaDatum, NamedRef,
        Timestamp, ToolInfo, ToolKind,
    };

    fn jv_doc(voltage: &[&str], current: &[&str]) -> DataDocument {
        let lex = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        DataDocument {
            role: DocRole::Archive,
            timestamp: Timestamp::parse("2013-01-08T10:00:00Z").unwrap(),
            doc_id: String::new(),
            kind: ToolKind::Characterization,
            measurement_type: NamedRef::new(None, "JV"),
            tool: NamedRef::new(None, "JV Station"),
            operator_id: None,
            data_file_link: FileLink {
                timestamp: Timestamp::parse("2013-01-08T10:00:00Z").unwrap(),
                file: "jv_station/data/20130108/dev.txt".into(),
            },
            comments: String::new(),
            aggregates: vec![Aggregate {
                metadata: vec![MetaDatum::new("device", "D4", "-")],
                series: vec![
                    DataSeries::new(Descriptor::new("Voltage", "V"), lex(voltage)),
                    DataSeries::new(Descriptor::new("Current", "A"), lex(current)),
                ],
                extras: Extras::default(),
            }],
            extras: Extras::default(),
            body_extras: Extras::default(),
        }
    }

    fn stored(doc: &DataDocument) -> (Datastore, i64) {
        let store = Datastore::open_in_memory().unwrap();
        let ids = store
            .register_entities(
                &ToolInfo::new("JV Station", ToolKind::Characterization),
                Some("cigs-0013-00023"),
                Some("CIGS"),
                None,
            )
            .unwrap();
        let (file_id, _) = store.insert_file_with_arrays(doc, &fig5_facts(1), &ids).unwrap();
        (store, file_id)
    }

    #[test]
    fn promotion_zips_positionally_and_keeps_generic_rows() {
        let doc = jv_doc(&["-0.1", "0.0", "0.1", "0.2"], &["-0.031", "-0.030", "-0.027", "-0.010"]);
        let (store, file_id) = stored(&doc);
        let before = store.file_arrays(file_id).unwrap();
        let ids = store
            .promote_semantic(file_id, JV_MODEL, &SemanticMapping::default())
            .unwrap();
        assert_eq!(ids.len(), 1);
        let curves = store.jv_curves(file_id).unwrap();
        assert_eq!(curves[0].device_id, "D4");
        assert!(curves[0].sample_id.is_some());
        assert_eq!(
            curves[0].points,
            [(-0.1, -0.031), (0.0, -0.030), (0.1, -0.027), (0.2, -0.010)]
        );
        assert_eq!(store.file_arrays(file_id).unwrap(), before);
        // re-promotion replaces rather than duplicates
        store
            .promote_semantic(file_id, JV_MODEL, &SemanticMapping::default())
            .unwrap();
        assert_eq!(store.jv_curves(file_id).unwrap().len(), 1);
    }

    #[test]
    fn unequal_lengths_are_rejected() {
        let doc = jv_doc(&["0.0", "0.1", "0.2"], &["-0.03", "-0.02"]);
        let (store, file_id) = stored(&doc);
        let err = store
            .promote_semantic(file_id, JV_MODEL, &SemanticMapping::default())
            .unwrap_err();
        assert!(matches!(err, DatastoreError::UnequalLengths { x: 3, y: 2 }));
        assert!(store.jv_curves(file_id).unwrap().is_empty());
    }

    #[test]
    fn missing_descriptor_is_rejected() {
        let mut doc = jv_doc(&["0.0"], &["0.1"]);
        doc.aggregates[0].series.pop();
        let (store, file_id) = stored(&doc);
        let err = store
            .promote_semantic(file_id, JV_MODEL, &SemanticMapping::default())
            .unwrap_err();
        assert!(matches!(err, DatastoreError::MissingDescriptor(ref d) if d == "Current"));
        assert!(matches!(
            store.promote_semantic(file_id, "xrd_pattern", &SemanticMapping::default()),
            Err(DatastoreError::UnknownModel(_))
        ));
    }
}
