//! Kill the harvester process mid-batch, restart it, and check the archive
//! and store end up complete with no duplicates.

use std::collections::HashMap;
use std::path::Path;
use std::process::Stdio;
use std::time::Duration;

use lims_core::datastore::{Datastore, LogStatus};
use lims_core::extractor::CompiledConfig;
use lims_core::pipeline::{parse_modes, Pipeline};
use lims_core::sim::{generate_file, SimSpec};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

use crate::common::{archive_files, env, free_port, runtime, sha256, wait_until};

const FILES: usize = 50;
const TRIALS: u64 = 10;

fn config(port: u16) -> String {
    format!(
        r#"
store_path = "lims.db"

[harvester]
port = {port}
archive_root = "archive"
backup_root = "backup"
rate_limit_bytes_per_sec = 2500
backoff_initial_ms = 100

[monitor]
staleness_secs = 1
reconcile_interval_secs = 1
backoff_initial_ms = 100
backoff_max_ms = 1000

[extractor]
reconnect_initial_ms = 100
reconnect_max_ms = 500

[[instrument]]
instrument_name = "nk-1"
host_label = "nk-pc"
root_path = "mnt/nk"
patterns = ["*_output.*"]
poll_interval_ms = 100
tool_name = "N and K"

[[translation]]
tool_name = "N and K"
match_patterns = ["*_output.*"]
format = "DelimitedColumns"
columns = [{{ name = "Wavelength", units = "nm" }}, {{ name = "Reflectance", units = "exp" }}]
"#
    )
}

async fn spawn_harvester(cfg: &Path, log: &Path) -> Child {
    let err = std::fs::OpenOptions::new().create(true).append(true).open(log).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lims"))
        .args(["run", "--mode", "harvest", "--config"])
        .arg(cfg)
        .stdout(Stdio::piped())
        .stderr(err)
        .kill_on_drop(true)
        .spawn()
        .expect("spawn lims");
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let ready = tokio::time::timeout(Duration::from_secs(30), async {
        while let Ok(Some(l)) = lines.next_line().await {
            if l == "ready" {
                return true;
            }
        }
        false
    })
    .await;
    assert!(matches!(ready, Ok(true)), "harvester did not become ready; see {}", log.display());
    // keep draining stdout so the child never blocks on a full pipe
    tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
    child
}

fn harvested(store: &Datastore) -> usize {
    store
        .log_entries()
        .unwrap()
        .iter()
        .filter(|e| matches!(e.progress(), LogStatus::Harvested | LogStatus::Extracted))
        .count()
}

/// Returns how many files were harvested when the process was killed.
async fn trial(seed: u64) -> Result<usize, String> {
    let e = env(&config(free_port()));
    let log = e.path().join("harvester.log");
    let mut child = spawn_harvester(&e.cfg_path, &log).await;
    let p = Pipeline::start(&e.cfg, &parse_modes("monitor,extract").unwrap())
        .await
        .map_err(|err| err.to_string())?;
    let store = p.store().clone();

    let cc = CompiledConfig::compile(e.cfg.translations[0].clone()).unwrap();
    let spec = SimSpec::new(FILES, seed);
    let mount = &e.cfg.instruments[0].root_path;
    let mut sources = HashMap::new();
    for i in 0..FILES {
        let (name, bytes, _) = generate_file(&cc, &spec, i).unwrap();
        std::fs::write(mount.join(&name), &bytes).unwrap();
        sources.insert(sha256(&bytes), name);
    }

    if !wait_until(Duration::from_secs(60), || harvested(&store) >= 10).await {
        return Err("harvesting never started".into());
    }
    child.kill().await.map_err(|err| err.to_string())?;
    let at_kill = harvested(&store);
    tokio::time::sleep(Duration::from_millis(500)).await;
    let mut child = spawn_harvester(&e.cfg_path, &log).await;

    let complete = || {
        let log = store.log_entries().unwrap();
        log.len() >= FILES && log.iter().all(|e| e.progress() == LogStatus::Extracted)
    };
    let finished = wait_until(Duration::from_secs(90), complete).await;
    p.shutdown().await;
    let _ = child.kill().await;
    if !finished {
        let stuck: Vec<_> = store
            .log_entries()
            .unwrap()
            .into_iter()
            .filter(|e| e.progress() != LogStatus::Extracted)
            .map(|e| format!("{} {:?} {:?}", e.source_path, e.progress(), e.error_detail))
            .collect();
        return Err(format!("not all extracted after restart: {stuck:?}"));
    }
    if at_kill >= FILES {
        return Err("kill came after the batch finished".into());
    }

    // every source archived exactly once, byte-identical
    let mut seen: HashMap<String, usize> = HashMap::new();
    let archived = archive_files(&e.cfg.harvester.archive_root);
    for f in &archived {
        *seen.entry(sha256(&std::fs::read(f).unwrap())).or_default() += 1;
    }
    if archived.len() != FILES {
        return Err(format!("{} archive files, expected {FILES}", archived.len()));
    }
    for (hash, name) in &sources {
        match seen.get(hash) {
            Some(1) => {}
            n => return Err(format!("{name} archived {n:?} times")),
        }
    }
    let log = store.log_entries().unwrap();
    if log.len() != FILES || log.iter().any(|e| e.version != 1) {
        return Err(format!("{} log entries; versions beyond 1 present", log.len()));
    }
    let stored = store.file_count().map_err(|err| err.to_string())?;
    if stored != FILES as i64 {
        return Err(format!("{stored} files in store, expected {FILES}"));
    }
    Ok(at_kill)
}

pub fn fault_recovery() -> String {
    let rt = runtime();
    let mut kills = Vec::new();
    for t in 0..TRIALS {
        match rt.block_on(trial(100 + t)) {
            Ok(k) => kills.push(k),
            Err(e) => panic!("trial {} of {TRIALS} failed: {e}", t + 1),
        }
    }
    format!(
        "{TRIALS}/{TRIALS} trials recovered all {FILES} files exactly once (hash-verified); killed after {}..{} files harvested",
        kills.iter().min().unwrap(),
        kills.iter().max().unwrap()
    )
}
