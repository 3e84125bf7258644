//! Static charts of stored series: the viewer reduced to files.

use std::path::{Path, PathBuf};

use lims_core::datastore::{DataArray, Datastore, DatastoreError};
use plotters::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("no numeric series to plot")]
    NoNumericSeries,
    #[error(transparent)]
    Store(#[from] DatastoreError),
    #[error("drawing failed: {0}")]
    Draw(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub file_id: i64,
    pub aggregate: usize,
    pub label: String,
    pub name: String,
    pub units: String,
    pub x_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub svg: PathBuf,
    pub csv: PathBuf,
    pub traces: Vec<Trace>,
}

fn axis_label(name: &str, units: &str) -> String {
    if units.is_empty() || units == "-" {
        name.to_string()
    } else {
        format!("{name} ({units})")
    }
}

/// One trace per selected series per aggregate per file. The first series
/// of an aggregate is the x axis; a lone series is plotted against its
/// index. `filter` keeps only series with those descriptor names.
pub fn collect_traces(store: &Datastore, file_ids: &[i64], filter: &[String]) -> Result<Vec<Trace>, PlotError> {
    let mut traces = Vec::new();
    for &id in file_ids {
        let file = store.file(id)?;
        let short = file.archive_path.rsplit('/').next().unwrap_or(&file.archive_path).to_string();
        let arrays = store.file_arrays(id)?;
        let mut by_agg: std::collections::BTreeMap<usize, Vec<&DataArray>> = Default::default();
        for a in &arrays {
            by_agg.entry(a.aggregate_index).or_default().push(a);
        }
        let multi = by_agg.len() > 1;
        for (agg, series) in by_agg {
            let (x, ys): (Option<&DataArray>, &[&DataArray]) = if series.len() > 1 {
                (Some(series[0]), &series[1..])
            } else {
                (None, &series[..])
            };
            for y in ys {
                if !filter.is_empty() && !filter.iter().any(|f| f == y.name()) {
                    continue;
                }
                let points: Vec<(f64, f64)> = y
                    .values
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| {
                        let xv = match x {
                            Some(x) => x.values.get(i).copied().flatten()?,
                            None => i as f64,
                        };
                        Some((xv, (*v)?))
                    })
                    .collect();
                if points.is_empty() {
                    continue;
                }
                let mut label = format!("#{id} {short}: {}", y.name());
                if multi {
                    label.push_str(&format!(" [{agg}]"));
                }
                traces.push(Trace {
                    file_id: id,
                    aggregate: agg,
                    label,
                    name: y.name().to_string(),
                    units: y.units().to_string(),
                    x_label: x.map_or_else(|| "index".to_string(), |x| axis_label(x.name(), x.units())),
                    points,
                });
            }
        }
    }
    if traces.is_empty() {
        return Err(PlotError::NoNumericSeries);
    }
    Ok(traces)
}

fn distinct_join(labels: impl Iterator<Item = String>) -> String {
    let mut seen: Vec<String> = Vec::new();
    for l in labels {
        if !seen.contains(&l) {
            seen.push(l);
        }
    }
    seen.join(", ")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.03;
        (lo - pad, hi + pad)
    }
}

/// Writes `out` (SVG) and a CSV of the same stem with the plotted points.
pub fn plot(store: &Datastore, file_ids: &[i64], filter: &[String], out: &Path) -> Result<PlotOutput, PlotError> {
    let traces = collect_traces(store, file_ids, filter)?;
    let x_desc = distinct_join(traces.iter().map(|t| t.x_label.clone()));
    let y_desc = distinct_join(traces.iter().map(|t| axis_label(&t.name, &t.units)));
    let (x0, x1) = bounds(traces.iter().flat_map(|t| t.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(traces.iter().flat_map(|t| t.points.iter().map(|p| p.1)));

    {
        let root = SVGBackend::new(out, (1024, 640)).into_drawing_area();
        let draw = |e: &dyn std::fmt::Display| PlotError::Draw(e.to_string());
        root.fill(&WHITE).map_err(|e| draw(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .x_label_area_size(48)
            .y_label_area_size(72)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| draw(&e))?;
        chart
            .configure_mesh()
            .x_desc(x_desc.as_str())
            .y_desc(y_desc.as_str())
            .draw()
            .map_err(|e| draw(&e))?;
        for (i, t) in traces.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(t.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| draw(&e))?
                .label(t.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| draw(&e))?;
        root.present().map_err(|e| draw(&e))?;
    }

    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["file_id", "aggregate", "trace", "x", "y"])?;
    for t in &traces {
        for (x, y) in &t.points {
            w.write_record([
                t.file_id.to_string(),
                t.aggregate.to_string(),
                t.name.clone(),
                x.to_string(),
                y.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(PlotOutput {
        svg: out.to_path_buf(),
        csv: csv_path,
        traces,
    })
}
