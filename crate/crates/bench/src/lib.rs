//! Inputs shared by the benchmarks.

use chrono::{TimeZone, Utc};
use lims_core::datastore::{BooleanQuery, Datastore, FileFacts, Predicate};
use lims_core::extractor::{extract, translate, CompiledConfig, FileFormat, TranslateContext, TranslationConfig};
use lims_core::format::{DataDocument, Timestamp, ToolInfo, ToolKind};

pub fn nk_config() -> TranslationConfig {
    TranslationConfig::new(
        "N and K",
        &["*_output.*"],
        FileFormat::DelimitedColumns,
        &[("Wavelength", "nm"), ("Reflectance", "exp")],
    )
}

/// A two-column table of `rows` lines.
pub fn nk_table(rows: usize) -> Vec<u8> {
    let mut s = String::with_capacity(rows * 20);
    for i in 0..rows {
        s.push_str(&format!("{:.2} {:.6}\n", 1000.0 - i as f64 * 0.5, 0.09 + (i % 97) as f64 * 1e-4));
    }
    s.into_bytes()
}

pub fn context(archive_path: &str) -> TranslateContext {
    TranslateContext {
        tool: ToolInfo::new("N and K", ToolKind::Characterization),
        operator_id: None,
        archive_path: archive_path.into(),
        file_timestamp: Timestamp::now(),
        now: Timestamp::now(),
    }
}

pub fn nk_document(rows: usize) -> DataDocument {
    let cc = CompiledConfig::compile(nk_config()).expect("config");
    translate(&nk_table(rows), &cc, &context("nandk/data/20130108/bench_output.1"))
        .expect("translates")
        .document
}

/// An in-memory store holding `n` small files over four tools, three
/// projects and two years.
pub fn corpus(n: usize) -> Datastore {
    let store = Datastore::open_in_memory().expect("store");
    let tools = ["N and K", "JV", "XRD", "Profilometer"];
    let projects = ["CIGS", "AZO", "CdTe"];
    let cc = CompiledConfig::compile(nk_config()).expect("config");
    let body = nk_table(8);
    for i in 0..n {
        let tool = tools[i % tools.len()];
        let project = projects[i % projects.len()];
        let sample = format!("{}-{:04}", project.to_lowercase(), i % 50);
        let path = format!("bench/data/{i:05}_output.1");
        let mut cfg = nk_config();
        cfg.tool_name = tool.into();
        let mut doc = translate(&body, &cc, &context(&path)).expect("translates").document;
        doc.tool.name = tool.into();
        let facts = FileFacts {
            archive_path: path.clone(),
            original_path: path,
            file_timestamp: Utc.timestamp_opt(1_325_376_000 + i as i64 * 60_000, 0).unwrap(),
            size: body.len() as u64,
            version: 1,
        };
        extract(&store, &mut doc, &cfg, &facts, Some(&sample), Some(project), None).expect("stored");
    }
    store
}

/// A depth-4 query touching every predicate kind.
pub fn mixed_query() -> BooleanQuery {
    BooleanQuery::and([
        BooleanQuery::or([
            BooleanQuery::atom(Predicate::ToolName("N and K".into())),
            BooleanQuery::and([
                BooleanQuery::atom(Predicate::Project("CIGS".into())),
                BooleanQuery::not(BooleanQuery::atom(Predicate::SampleCode("-0001".into()))),
            ]),
        ]),
        BooleanQuery::atom(Predicate::DateRange {
            from: Some("2012-03-01".into()),
            to: Some("2013-06-30".into()),
        }),
        BooleanQuery::atom(Predicate::DescriptorName("Reflectance".into())),
        BooleanQuery::not(BooleanQuery::atom(Predicate::FilePath("99_".into()))),
    ])
}
