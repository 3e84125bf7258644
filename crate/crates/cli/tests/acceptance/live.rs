//! Criteria that run the daemons in-process over loopback.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use lims_core::datastore::LogStatus;
use lims_core::extractor::CompiledConfig;
use lims_core::pipeline::{parse_modes, Pipeline};
use lims_core::sim::{generate_file, SimSpec};
use serde_json::Value;

use crate::common::{archive_files, env, median, runtime, secs, wait_until, Env, SseReader};

const TOKEN: &str = "t";

/// Three instruments, one per file format.
fn three_tool_config(extra_harvester: &str) -> String {
    format!(
        r#"
store_path = "lims.db"

[harvester]
port = 0
archive_root = "archive"
backup_root = "backup"
backoff_initial_ms = 100
{extra_harvester}

[monitor]
staleness_secs = 5
reconcile_interval_secs = 5
backoff_initial_ms = 100

[extractor]
reconnect_initial_ms = 100
reconnect_max_ms = 1000

[service]
bind = "127.0.0.1:0"
tokens = {{ {TOKEN} = "root" }}
grants = {{ root = ["*"] }}
tap_poll_ms = 20

[[instrument]]
instrument_name = "nk-1"
host_label = "nk-pc"
root_path = "mnt/nk"
patterns = ["*_output.*"]
poll_interval_ms = 250
tool_name = "N and K"

[[instrument]]
instrument_name = "jv-1"
host_label = "jv-pc"
root_path = "mnt/jv"
patterns = ["*.jv"]
poll_interval_ms = 250
tool_name = "JV"

[[instrument]]
instrument_name = "cam-1"
host_label = "cam-pc"
root_path = "mnt/cam"
patterns = ["*.tif"]
poll_interval_ms = 250
tool_name = "Imager"

[[translation]]
tool_name = "N and K"
match_patterns = ["*_output.*"]
format = "DelimitedColumns"
columns = [{{ name = "Wavelength", units = "nm" }}, {{ name = "Reflectance", units = "exp" }}]
sample_pattern = '^(.+)_output'

[[translation]]
tool_name = "JV"
match_patterns = ["*.jv"]
format = "HeaderPlusColumns"
aggregate_rule = "SplitOnBlankLine"
columns = [{{ name = "Voltage", units = "V" }}, {{ name = "Current", units = "A" }}]
header_rules = [{{ key_pattern = '^device$', metadata_name = "device" }}]
storage_target = {{ Semantic = "jv_curve" }}
sample_pattern = '^(.+)\.jv$'

[[translation]]
tool_name = "Imager"
match_patterns = ["*.tif"]
format = "BinaryOpaque"
"#
    )
}

struct Tools {
    compiled: Vec<CompiledConfig>,
    mounts: Vec<PathBuf>,
}

fn tools(e: &Env) -> Tools {
    let by_tool = |name: &str| e.cfg.translations.iter().find(|t| t.tool_name == name).unwrap().clone();
    let mount = |name: &str| e.cfg.instruments.iter().find(|m| m.tool_name == name).unwrap().root_path.clone();
    let names = ["N and K", "JV", "Imager"];
    Tools {
        compiled: names.iter().map(|n| CompiledConfig::compile(by_tool(n)).unwrap()).collect(),
        mounts: names.iter().map(|n| mount(n)).collect(),
    }
}

/// Writes file `i` for tool `i % 3`; returns its name.
fn drop_file(t: &Tools, spec: &SimSpec, i: usize) -> String {
    let k = i % t.compiled.len();
    let (name, bytes, _) = generate_file(&t.compiled[k], spec, i).unwrap();
    std::fs::write(t.mounts[k].join(&name), bytes).unwrap();
    name
}

fn all_extracted(p: &Pipeline, n: usize) -> bool {
    let log = p.store().log_entries().unwrap();
    log.iter().filter(|e| e.progress() == LogStatus::Extracted).count() >= n
}

pub fn availability() -> String {
    let e = env(&three_tool_config(""));
    let t = tools(&e);
    let rt = runtime();
    rt.block_on(async {
        let p = Pipeline::start(&e.cfg, &parse_modes("all").unwrap()).await.unwrap();
        let base = format!("http://{}", p.service_addr().unwrap());
        let http = reqwest::Client::new();
        let spec = SimSpec::new(100, 2);

        // 60 files per minute, round-robin over the three formats
        let dropped: Arc<Mutex<Vec<(String, Instant)>>> = Arc::default();
        let writer = {
            let dropped = dropped.clone();
            let begin = tokio::time::Instant::now();
            let t = Tools {
                compiled: t.compiled.clone(),
                mounts: t.mounts.clone(),
            };
            tokio::spawn(async move {
                for i in 0..spec.count {
                    tokio::time::sleep_until(begin + Duration::from_secs(i as u64)).await;
                    let name = drop_file(&t, &spec, i);
                    dropped.lock().unwrap().push((name, Instant::now()));
                }
            })
        };

        // watch the service until every file's series can be fetched
        let mut ready: BTreeMap<String, Instant> = BTreeMap::new();
        let mut seen: HashSet<i64> = HashSet::new();
        let deadline = Instant::now() + Duration::from_secs(100 + 90);
        while ready.len() < 100 && Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(50)).await;
            let Ok(r) = http.get(format!("{base}/files")).bearer_auth(TOKEN).send().await else {
                continue;
            };
            let Ok(files) = r.json::<Vec<Value>>().await else { continue };
            for f in files {
                let id = f["file_id"].as_i64().unwrap();
                if seen.contains(&id) {
                    continue;
                }
                let s = http
                    .get(format!("{base}/files/{id}/series"))
                    .bearer_auth(TOKEN)
                    .send()
                    .await
                    .unwrap();
                if s.status().is_success() {
                    let at = Instant::now();
                    let body: Value = s.json().await.unwrap();
                    let path = body["archive_path"].as_str().unwrap().to_string();
                    let name = path.rsplit('/').next().unwrap().to_string();
                    seen.insert(id);
                    ready.insert(name, at);
                }
            }
        }
        writer.await.unwrap();

        let dropped = dropped.lock().unwrap().clone();
        let missing: Vec<_> = dropped.iter().filter(|(n, _)| !ready.contains_key(n)).map(|d| d.0.clone()).collect();
        let archived = archive_files(&e.cfg.harvester.archive_root).len();
        let extracted = p.store().log_entries().unwrap().iter().filter(|e| e.progress() == LogStatus::Extracted).count();
        p.shutdown().await;
        assert!(missing.is_empty(), "{} of 100 never queryable, e.g. {:?}", missing.len(), missing.first());
        assert_eq!(archived, 100, "archived file count");
        assert_eq!(extracted, 100, "extracted log entries");

        let lat: Vec<Duration> = dropped.iter().map(|(n, at)| ready[n].saturating_duration_since(*at)).collect();
        let (med, max) = (median(&lat), lat.iter().max().copied().unwrap());
        assert!(med < Duration::from_secs(5), "median latency {} >= 5s", secs(med));
        assert!(max < Duration::from_secs(60), "max latency {} >= 60s", secs(max));
        format!("100/100 archived, extracted and served; drop-to-queryable median {} max {}", secs(med), secs(max))
    })
}

pub fn tap_latency() -> String {
    let e = env(&three_tool_config(""));
    let t = tools(&e);
    let rt = runtime();
    rt.block_on(async {
        let p = Pipeline::start(&e.cfg, &parse_modes("all").unwrap()).await.unwrap();
        let base = format!("http://{}", p.service_addr().unwrap());
        let resp = reqwest::Client::new()
            .get(format!("{base}/tap"))
            .bearer_auth(TOKEN)
            .send()
            .await
            .unwrap();
        assert!(resp.status().is_success());
        let mut sse = SseReader::new(resp.bytes_stream());

        let spec = SimSpec::new(100, 3);
        let writer = tokio::spawn(async move {
            for i in 0..spec.count {
                drop_file(&t, &spec, i);
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        });

        let mut lat = Vec::new();
        let mut ids = HashSet::new();
        let mut dupes = 0;
        while ids.len() < 100 {
            let Some(ev) = sse.next(Duration::from_secs(60)).await else { break };
            let now = Utc::now();
            let at: DateTime<Utc> = serde_json::from_value(ev["extracted_at"].clone()).unwrap();
            lat.push((now - at).to_std().unwrap_or(Duration::ZERO));
            if !ids.insert(ev["id"].as_i64().unwrap()) {
                dupes += 1;
            }
        }
        // nothing further should arrive once every file is in
        let extra = sse.next(Duration::from_secs(1)).await;
        writer.await.unwrap();
        p.shutdown().await;

        assert_eq!(ids.len(), 100, "receipts delivered");
        assert_eq!(dupes, 0, "duplicate deliveries");
        assert!(extra.is_none(), "unexpected extra receipt {extra:?}");
        let med = median(&lat);
        let max = lat.iter().max().copied().unwrap();
        assert!(med < Duration::from_secs(1), "median tap latency {}", secs(med));
        format!("100 receipts, each once; receipt-to-subscriber median {} max {}", secs(med), secs(max))
    })
}

pub fn update_swap() -> String {
    let e = env(&three_tool_config(""));
    let rt = runtime();
    rt.block_on(async {
        let p = Pipeline::start(&e.cfg, &parse_modes("all").unwrap()).await.unwrap();
        let store = p.store().clone();
        let src = e.cfg.instruments[0].root_path.join("azo_a239_output.1");
        let old = "1000.00 0.096500\n999.00 0.096100\n";
        std::fs::write(&src, old).unwrap();
        assert!(wait_until(Duration::from_secs(30), || all_extracted(&p, 1)).await, "first version not extracted");

        let new = format!("{old}998.00 0.095800\n997.00 0.095200\n");
        std::fs::write(&src, &new).unwrap();
        let versioned = || {
            store
                .file_rows()
                .unwrap()
                .iter()
                .any(|r| store.file(r.file_id).unwrap().version == 2)
        };
        assert!(wait_until(Duration::from_secs(30), versioned).await, "update not extracted");
        // let any duplicate event surface before counting
        tokio::time::sleep(Duration::from_secs(3)).await;

        let log: Vec<_> = store.log_entries().unwrap();
        let updates = log.iter().filter(|l| l.version == 2).count();
        let copies = p.harvester().unwrap().stats().copied.load(std::sync::atomic::Ordering::Relaxed);
        let rows = store.file_rows().unwrap();
        let receipts = store.tap_records_after(0, 100).unwrap();
        p.shutdown().await;

        assert_eq!(log.len(), 2, "log entries: {log:?}");
        assert_eq!(updates, 1, "updated events");
        assert!(log.iter().all(|l| l.progress() == LogStatus::Extracted));
        assert_eq!(copies, 2, "one harvest plus one re-harvest");
        assert_eq!(rows.len(), 1, "one file row for the path");
        let info = store.file(rows[0].file_id).unwrap();
        assert_eq!(info.version, 2);
        let canonical = e.cfg.harvester.archive_root.join(&info.archive_path);
        assert_eq!(std::fs::read_to_string(&canonical).unwrap(), new, "canonical path holds new content");
        let prior = PathBuf::from(format!("{}.v2", canonical.display()));
        assert_eq!(std::fs::read_to_string(&prior).unwrap(), old, "prior version retained");
        let arrays = store.file_arrays(info.id).unwrap();
        assert_eq!(arrays[0].lexemes, ["1000.00", "999.00", "998.00", "997.00"]);
        assert_eq!(arrays.len(), 2, "arrays replaced, not appended");
        assert_eq!(receipts.iter().map(|r| r.version).collect::<Vec<_>>(), [1, 2]);
        format!(
            "1 update, 2 copies total, canonical {} holds new content, prior kept at .v2, store at version 2 with 4-row arrays",
            info.archive_path
        )
    })
}

pub fn throughput_bound() -> String {
    const MIB: u64 = 1024 * 1024;
    let e = env(&three_tool_config(&format!("rate_limit_bytes_per_sec = {MIB}")));
    let rt = runtime();
    rt.block_on(async {
        let p = Pipeline::start(&e.cfg, &parse_modes("harvest,extract,monitor").unwrap()).await.unwrap();
        let cam = &e.cfg.instruments[2].root_path;
        let stage = e.path().join("incoming");
        std::fs::create_dir_all(&stage).unwrap();
        for i in 0..50 {
            let body = vec![(i % 251) as u8; MIB as usize];
            let tmp = stage.join(format!("frame{i:02}.tif"));
            std::fs::write(&tmp, body).unwrap();
            std::fs::rename(&tmp, cam.join(format!("frame{i:02}.tif"))).unwrap();
        }
        let begin = Instant::now();
        let done = wait_until(Duration::from_secs(180), || all_extracted(&p, 50)).await;
        let took = begin.elapsed();
        let meter = p.harvester().unwrap().meter();
        let total = meter.total();
        let worst = meter.max_in_window(Duration::from_secs(10));
        let span = meter.span().unwrap_or_default();
        p.shutdown().await;

        assert!(done, "batch not finished in 180s");
        assert_eq!(total, 50 * MIB, "bytes transferred");
        let rate = worst as f64 / 10.0 / MIB as f64;
        assert!(rate <= 1.2, "a 10s window moved {rate:.3} MiB/s");
        format!(
            "50 MiB in {:.1}s (meter span {:.1}s); busiest 10s window {rate:.3} MiB/s <= 1.2",
            took.as_secs_f64(),
            span.as_secs_f64()
        )
    })
}
