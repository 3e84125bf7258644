//! Offline checks: fixtures, hard-copy regeneration and JV promotion.

use std::collections::BTreeMap;

use chrono::Utc;
use lims_core::datastore::{Datastore, DatastoreError, FileFacts, JV_MODEL};
use lims_core::extractor::{
    extract, regenerate, translate, AggregateRule, CompiledConfig, FileFormat, HeaderRule, StorageTarget,
    TranslateContext, TranslationConfig,
};
use lims_core::format::{
    decode_data_document, decode_ops_message, encode_data_document, encode_ops_message, DocRole, OpsRole, Timestamp,
    ToolInfo, ToolKind,
};
use lims_core::sim::{generate_file, ManifestFile, SimSpec};

const OPS_FIXTURE: &[u8] = include_bytes!("../../../core/tests/fixtures/fig3_ncpvops.xml");
const DATA_FIXTURE: &[u8] = include_bytes!("../../../core/tests/fixtures/fig5_ncpvdata.xml");

pub fn fixtures() -> String {
    let ops = decode_ops_message(OPS_FIXTURE).expect("ops fixture decodes");
    assert_eq!(ops.role, OpsRole::Transfer);
    assert_eq!(ops.timestamp.as_str(), "2001-12-17T09:30:47Z");
    let t = ops.target.as_ref().expect("target");
    assert_eq!(t.source_path, "/mnt/bruker/frames/VCC_1234.txt");
    assert_eq!(t.source_host, "nexus");
    assert_eq!(t.tool.name, "XRD Bruker");
    assert_eq!(t.tool.kind, ToolKind::Characterization);
    assert_eq!(t.sample_id.as_deref(), Some("cigs-0013-00023"));
    assert_eq!(t.operator_username.as_deref(), Some("jdoe"));
    let again = decode_ops_message(&encode_ops_message(&ops).unwrap()).unwrap();
    assert_eq!(again, ops, "ops round trip");

    let doc = decode_data_document(DATA_FIXTURE).expect("data fixture decodes");
    assert_eq!(doc.role, DocRole::Archive);
    assert_eq!(doc.timestamp.as_str(), "2012-09-25T12:45:03");
    assert_eq!(doc.kind, ToolKind::Characterization);
    assert_eq!((doc.measurement_type.id, doc.measurement_type.name.as_str()), (Some(1), "Reflectance and Transmission"));
    assert_eq!((doc.tool.id, doc.tool.name.as_str()), (Some(23), "N and K"));
    assert_eq!(doc.operator_id, Some(7));
    assert_eq!(doc.data_file_link.file, "nandk/data/20130108/azo_azo_a239_output.1");
    assert_eq!(doc.data_file_link.timestamp.as_str(), "2012-09-25T12:45:03");
    assert_eq!(doc.aggregates.len(), 1);
    let agg = &doc.aggregates[0];
    let meta: Vec<_> = agg
        .metadata
        .iter()
        .map(|m| (m.name.as_str(), m.value.as_str(), m.units.as_str(), m.comments.as_deref()))
        .collect();
    assert_eq!(
        meta,
        [
            ("x", "0.0000", "position", None),
            ("y", "0.0000", "position", None),
            ("method", "", "-", Some("RTnk")),
        ]
    );
    let series: Vec<_> = agg
        .series
        .iter()
        .map(|s| (s.descriptor.name.as_str(), s.descriptor.units.as_str(), s.data.clone()))
        .collect();
    assert_eq!(
        series,
        [
            ("Wavelength", "nm", vec!["1000.00".to_string(), "999.00".to_string()]),
            ("Reflectance", "exp", vec!["0.096500".to_string(), "0.096100".to_string()]),
        ]
    );
    let again = decode_data_document(&encode_data_document(&doc).unwrap()).unwrap();
    assert_eq!(again, doc, "data round trip");
    "both fixtures decode to the listed values and round-trip".into()
}

fn ctx(tool: &str, archive_path: &str) -> TranslateContext {
    TranslateContext {
        tool: ToolInfo::new(tool, ToolKind::Characterization),
        operator_id: None,
        archive_path: archive_path.into(),
        file_timestamp: Timestamp::now(),
        now: Timestamp::now(),
    }
}

fn facts(archive_path: &str, size: usize) -> FileFacts {
    FileFacts {
        archive_path: archive_path.into(),
        original_path: format!("/mnt/{archive_path}"),
        file_timestamp: Utc::now(),
        size: size as u64,
        version: 1,
    }
}

pub fn hard_copy() -> String {
    let dir = tempfile::tempdir().unwrap();
    let store = Datastore::open(dir.path().join("rt.db")).unwrap();
    let delimiters = ["whitespace", ",", "\t", ";"];
    let column_sets: [&[(&str, &str)]; 3] = [
        &[("Wavelength", "nm"), ("Reflectance", "exp")],
        &[("Position", "mm"), ("Height", "nm"), ("Roughness", "nm")],
        &[("Time", "s"), ("Temperature", "C"), ("Pressure", "Pa"), ("Flow", "sccm")],
    ];
    let mut rows = 0;
    for i in 0..20usize {
        let mut cfg = TranslationConfig::new(
            format!("RT{}", i % 3),
            &["*.dat"],
            FileFormat::DelimitedColumns,
            column_sets[i % 3],
        );
        cfg.delimiter = delimiters[i % 4].into();
        cfg.skip_lines = i % 3;
        let cc = CompiledConfig::compile(cfg.clone()).unwrap();
        let mut spec = SimSpec::new(1, 500 + i as u64);
        spec.rows = (3, 40);
        let (name, bytes, _) = generate_file(&cc, &spec, 0).unwrap();

        // the numeric table is everything after the skipped preamble
        let mut table = &bytes[..];
        for _ in 0..cfg.skip_lines {
            let nl = table.iter().position(|&b| b == b'\n').unwrap();
            table = &table[nl + 1..];
        }

        let archive = format!("rt{}/data/20240101/{i}_{name}", i % 3);
        let mut doc = translate(&bytes, &cc, &ctx(&cfg.tool_name, &archive)).unwrap().document;
        let receipt = extract(&store, &mut doc, &cfg, &facts(&archive, bytes.len()), None, None, None).unwrap();
        let back = store.load_document(receipt.file_id).unwrap();
        let out = regenerate(&back, &cfg).unwrap();
        assert_eq!(
            String::from_utf8_lossy(&out),
            String::from_utf8_lossy(table),
            "fixture {i} (delimiter {:?}) differs",
            cfg.delimiter
        );
        rows += table.iter().filter(|&&b| b == b'\n').count();
    }
    format!("20/20 tables identical byte-for-byte ({rows} rows, 4 delimiters)")
}

fn jv_config() -> TranslationConfig {
    let mut cfg = TranslationConfig::new(
        "JV",
        &["*.jv"],
        FileFormat::HeaderPlusColumns,
        &[("Voltage", "V"), ("Current", "A")],
    );
    cfg.aggregate_rule = AggregateRule::SplitOnBlankLine;
    cfg.storage_target = StorageTarget::Semantic(JV_MODEL.into());
    cfg.header_rules = vec![HeaderRule {
        key_pattern: "^device$".into(),
        metadata_name: "device".into(),
        units: "-".into(),
        figure_comments: false,
    }];
    cfg
}

fn manifest_curves(m: &ManifestFile) -> Vec<(String, Vec<(f64, f64)>)> {
    m.aggregates
        .iter()
        .map(|a| {
            let device = a.metadata.iter().find(|(k, _)| k == "device").unwrap().1.clone();
            let v = &a.series.iter().find(|s| s.name == "Voltage").unwrap().values;
            let c = &a.series.iter().find(|s| s.name == "Current").unwrap().values;
            let pts = v
                .iter()
                .zip(c)
                .map(|(v, c)| (v.parse().unwrap(), c.parse().unwrap()))
                .collect();
            (device, pts)
        })
        .collect()
}

pub fn semantic_promotion() -> String {
    let dir = tempfile::tempdir().unwrap();
    let store = Datastore::open(dir.path().join("jv.db")).unwrap();
    let cfg = jv_config();
    let cc = CompiledConfig::compile(cfg.clone()).unwrap();
    let spec = SimSpec::new(12, 77);
    let (mut curves, mut points) = (0, 0);
    for i in 0..spec.count {
        let (name, bytes, entry) = generate_file(&cc, &spec, i).unwrap();
        let archive = format!("jv/data/20240101/{name}");
        let mut doc = translate(&bytes, &cc, &ctx("JV", &archive)).unwrap().document;
        let receipt = extract(&store, &mut doc, &cfg, &facts(&archive, bytes.len()), None, None, None).unwrap();
        let stored = store.jv_curves(receipt.file_id).unwrap();

        // oracle: zip the stored arrays by position, aggregate by aggregate
        let arrays = store.file_arrays(receipt.file_id).unwrap();
        let mut by_agg: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for a in &arrays {
            let slot = by_agg.entry(a.aggregate_index).or_default();
            let vals: Vec<f64> = a.values.iter().map(|v| v.unwrap()).collect();
            match a.name() {
                "Voltage" => slot.0 = vals,
                "Current" => slot.1 = vals,
                _ => {}
            }
        }
        let zipped: Vec<Vec<(f64, f64)>> = by_agg
            .values()
            .map(|(v, c)| {
                assert_eq!(v.len(), c.len());
                v.iter().copied().zip(c.iter().copied()).collect()
            })
            .collect();
        let got: Vec<Vec<(f64, f64)>> = stored.iter().map(|c| c.points.clone()).collect();
        assert_eq!(got, zipped, "file {i}: curves differ from the positional zip");

        // and both agree with what the simulator wrote
        let want = manifest_curves(&entry);
        let devices: Vec<_> = stored.iter().map(|c| c.device_id.clone()).collect();
        assert_eq!(devices, want.iter().map(|w| w.0.clone()).collect::<Vec<_>>());
        assert_eq!(got, want.into_iter().map(|w| w.1).collect::<Vec<_>>());
        curves += stored.len();
        points += got.iter().map(Vec::len).sum::<usize>();
    }

    // a document whose voltage and current disagree in length is refused whole
    let before = store.table_counts().unwrap();
    let (name, bytes, _) = generate_file(&cc, &SimSpec::new(1, 991), 0).unwrap();
    let archive = format!("jv/data/20240102/{name}");
    let mut doc = translate(&bytes, &cc, &ctx("JV", &archive)).unwrap().document;
    doc.aggregates[0].series[1].data.pop();
    let err = extract(&store, &mut doc, &cfg, &facts(&archive, bytes.len()), None, None, None).unwrap_err();
    assert!(matches!(err, DatastoreError::UnequalLengths { .. }), "got {err:?}");
    assert_eq!(store.table_counts().unwrap(), before, "a rejected promotion left rows behind");
    assert!(store.file_by_archive_path(&archive).unwrap().is_none());

    format!("{curves} curves / {points} points equal the positional zip; unequal lengths rejected with no rows written")
}
