use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use futures::StreamExt;
use lims_core::config::Config;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub struct Env {
    pub dir: TempDir,
    pub cfg: Config,
    pub cfg_path: PathBuf,
}

impl Env {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

/// Writes `body` as the config file of a fresh directory and loads it.
/// Relative paths in the config land inside that directory.
pub fn env(body: &str) -> Env {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg_path = dir.path().join("lims.toml");
    std::fs::write(&cfg_path, body).expect("write config");
    let cfg = Config::load(&cfg_path).unwrap_or_else(|e| panic!("config: {e}"));
    for m in &cfg.instruments {
        std::fs::create_dir_all(&m.root_path).expect("mount dir");
    }
    Env { dir, cfg, cfg_path }
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime")
}

pub async fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + limit;
    loop {
        if f() {
            return true;
        }
        if Instant::now() >= end {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every archived file, staging areas excluded.
pub fn archive_files(root: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_entry(|e| e.file_name() != ".staging")
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect()
}

pub fn median(v: &[Duration]) -> Duration {
    let mut s = v.to_vec();
    s.sort();
    if s.is_empty() {
        return Duration::ZERO;
    }
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2
    }
}

pub fn secs(d: Duration) -> String {
    format!("{:.3}s", d.as_secs_f64())
}

pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .expect("free port")
        .port()
}

/// Reads server-sent events from a response body, yielding each `data:`
/// payload as JSON.
pub struct SseReader<S> {
    stream: S,
    buf: String,
}

impl<S> SseReader<S>
where
    S: futures::Stream<Item = reqwest::Result<bytes::Bytes>> + Unpin,
{
    pub fn new(stream: S) -> Self {
        SseReader {
            stream,
            buf: String::new(),
        }
    }

    pub async fn next(&mut self, wait: Duration) -> Option<serde_json::Value> {
        let deadline = Instant::now() + wait;
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let frame: String = self.buf.drain(..end + 2).collect();
                if let Some(data) = frame.lines().find_map(|l| l.strip_prefix("data:")) {
                    return serde_json::from_str(data.trim()).ok();
                }
                continue;
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            match tokio::time::timeout(left, self.stream.next()).await {
                Ok(Some(Ok(chunk))) => self.buf.push_str(&String::from_utf8_lossy(&chunk)),
                _ => return None,
            }
        }
    }
}
