//! Copying one source file into the archive.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime};

use sha2::{Digest, Sha256};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use super::layout::{archive_path, canonical_path, file_date, free_version_slot, ArchiveLayout, BackupCodec, Slot};
use super::queue::TokenBucket;

const CHUNK: usize = 256 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("copy failed: {0}")]
    CopyFailed(String),
    #[error("verify failed: {0}")]
    VerifyFailed(String),
}

/// Where a copy should land, worked out from the transaction log.
#[derive(Debug, Clone, Default)]
pub struct TransferPlan {
    pub tool_slug: String,
    /// Archive path of an earlier version of the same source; set for
    /// updates, whose new content replaces it in place.
    pub prior_archive_path: Option<String>,
    /// Path this very version was already archived at (a re-announcement).
    pub known_archive_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferOutcome {
    pub archive_path: String,
    /// False when identical content was already in place.
    pub copied: bool,
    /// Where the previous content of `archive_path` was moved.
    pub displaced: Option<String>,
    pub sha256: String,
    pub bytes: u64,
    pub source_mtime: SystemTime,
}

/// Bytes written per instant, for throughput checks.
#[derive(Debug, Default)]
pub struct TransferMeter {
    samples: Mutex<Vec<(Instant, u64)>>,
}

impl TransferMeter {
    pub fn record(&self, n: u64) {
        self.samples.lock().expect("meter").push((Instant::now(), n));
    }

    pub fn total(&self) -> u64 {
        self.samples.lock().expect("meter").iter().map(|s| s.1).sum()
    }

    /// Largest byte count inside any window of length `window`.
    pub fn max_in_window(&self, window: Duration) -> u64 {
        let s = self.samples.lock().expect("meter");
        let (mut lo, mut sum, mut best) = (0, 0u64, 0u64);
        for hi in 0..s.len() {
            sum += s[hi].1;
            while s[hi].0.duration_since(s[lo].0) >= window {
                sum -= s[lo].1;
                lo += 1;
            }
            best = best.max(sum);
        }
        best
    }

    pub fn span(&self) -> Option<Duration> {
        let s = self.samples.lock().expect("meter");
        Some(s.last()?.0.duration_since(s.first()?.0))
    }
}

/// Shared state a copy needs besides its own task.
pub struct TransferContext {
    pub layout: ArchiveLayout,
    pub codec: Arc<dyn BackupCodec>,
    pub bucket: Arc<Mutex<TokenBucket>>,
    pub meter: Option<Arc<TransferMeter>>,
    /// Serializes choosing and renaming into archive paths.
    pub placement: Arc<Mutex<()>>,
}

pub(crate) fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; CHUNK];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn slot(root: &Path, rel: &str, hash: &str) -> Slot {
    let p = root.join(rel);
    if !p.exists() {
        return Slot::Free;
    }
    match sha256_file(&p) {
        Ok(h) if h == hash => Slot::SameContent,
        _ => Slot::DifferentContent,
    }
}

fn rename_into(from: &Path, to: &Path) -> io::Result<()> {
    if let Some(dir) = to.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::rename(from, to)
}

async fn throttled(ctx: &TransferContext, n: usize) {
    loop {
        let wait = {
            let mut b = ctx.bucket.lock().expect("bucket");
            let now = Instant::now();
            if b.try_take(n as u64, now) {
                return;
            }
            b.wait_for(n as u64, now)
        };
        tokio::time::sleep(wait.max(Duration::from_millis(1))).await;
    }
}

fn staging_name(dir: &Path) -> PathBuf {
    dir.join(format!("{:016x}.tmp", rand::random::<u64>()))
}

/// Copies the source into staging while hashing, then places it.
pub async fn execute_transfer(
    source_path: &str,
    is_update: bool,
    plan: &TransferPlan,
    ctx: &TransferContext,
) -> Result<TransferOutcome, TransferError> {
    let copy_err = |what: &str, e: io::Error| TransferError::CopyFailed(format!("{what}: {e}"));
    let before = tokio::fs::metadata(source_path)
        .await
        .map_err(|e| copy_err("source unavailable", e))?;
    let mtime = before.modified().unwrap_or(SystemTime::UNIX_EPOCH);
    let staging = ctx.layout.staging_dir();
    tokio::fs::create_dir_all(&staging)
        .await
        .map_err(|e| copy_err("staging", e))?;
    let temp = staging_name(&staging);

    let copied = async {
        let mut src = tokio::fs::File::open(source_path)
            .await
            .map_err(|e| copy_err("source unavailable", e))?;
        let mut dst = tokio::fs::File::create(&temp).await.map_err(|e| copy_err("staging", e))?;
        let chunk = ctx.bucket.lock().expect("bucket").chunk_limit(CHUNK);
        let mut buf = vec![0u8; chunk];
        let mut hasher = Sha256::new();
        let mut total = 0u64;
        loop {
            let n = src.read(&mut buf).await.map_err(|e| copy_err("read", e))?;
            if n == 0 {
                break;
            }
            throttled(ctx, n).await;
            dst.write_all(&buf[..n]).await.map_err(|e| copy_err("write", e))?;
            if let Some(m) = &ctx.meter {
                m.record(n as u64);
            }
            hasher.update(&buf[..n]);
            total += n as u64;
        }
        dst.sync_all().await.map_err(|e| copy_err("sync", e))?;
        Ok::<_, TransferError>((total, hex::encode(hasher.finalize())))
    }
    .await;
    let (bytes, hash) = match copied {
        Ok(v) => v,
        Err(e) => {
            let _ = tokio::fs::remove_file(&temp).await;
            return Err(e);
        }
    };

    let after = match tokio::fs::metadata(source_path).await {
        Ok(m) => m,
        Err(e) => {
            let _ = tokio::fs::remove_file(&temp).await;
            return Err(copy_err("source vanished during copy", e));
        }
    };
    if after.len() != bytes || before.len() != bytes {
        let _ = tokio::fs::remove_file(&temp).await;
        return Err(TransferError::VerifyFailed(format!(
            "copied {bytes} bytes but source has {}",
            after.len()
        )));
    }

    let file_name = Path::new(source_path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| TransferError::CopyFailed(format!("no file name in {source_path}")))?;
    let plan = plan.clone();
    let layout = ctx.layout.clone();
    let codec = ctx.codec.clone();
    let placement = ctx.placement.clone();
    let date = file_date(mtime, chrono::Utc::now());
    tokio::task::spawn_blocking(move || {
        let _guard = placement.lock().expect("placement");
        let result = place(&layout, &plan, &file_name, date, is_update, &temp, &hash, mtime);
        if temp.exists() {
            let _ = fs::remove_file(&temp);
        }
        let (archive_path, copied, displaced) = result.map_err(|e| copy_err("archive", e))?;
        ensure_backup(&layout, codec.as_ref(), &archive_path, displaced.as_deref())
            .map_err(|e| copy_err("backup", e))?;
        Ok(TransferOutcome {
            archive_path,
            copied,
            displaced,
            sha256: hash,
            bytes,
            source_mtime: mtime,
        })
    })
    .await
    .map_err(|e| TransferError::CopyFailed(format!("worker: {e}")))?
}

#[allow(clippy::too_many_arguments)]
fn place(
    layout: &ArchiveLayout,
    plan: &TransferPlan,
    file_name: &str,
    date: chrono::NaiveDate,
    is_update: bool,
    temp: &Path,
    hash: &str,
    mtime: SystemTime,
) -> io::Result<(String, bool, Option<String>)> {
    let root = &layout.archive_root;
    let finish = |rel: &str| -> io::Result<()> {
        let dest = root.join(rel);
        rename_into(temp, &dest)?;
        fs::File::options().write(true).open(&dest)?.set_modified(mtime)
    };

    if let Some(known) = &plan.known_archive_path {
        if slot(root, known, hash) == Slot::SameContent {
            return Ok((known.clone(), false, None));
        }
    }

    if is_update || plan.prior_archive_path.is_some() {
        let target = plan
            .prior_archive_path
            .clone()
            .unwrap_or_else(|| canonical_path(&plan.tool_slug, file_name, date));
        return match slot(root, &target, hash) {
            Slot::Free => finish(&target).map(|_| (target, true, None)),
            Slot::SameContent => Ok((target, false, None)),
            Slot::DifferentContent => {
                let keep = free_version_slot(&target, |p| root.join(p).exists());
                rename_into(&root.join(&target), &root.join(&keep))?;
                finish(&target)?;
                Ok((target, true, Some(keep)))
            }
        };
    }

    let dest = archive_path(&plan.tool_slug, file_name, date, |p| slot(root, p, hash));
    if slot(root, &dest, hash) == Slot::SameContent {
        return Ok((dest, false, None));
    }
    finish(&dest)?;
    Ok((dest, true, None))
}

/// Makes the backup of `archive_path` match the archive, mirroring a
/// displacement first so the backup keeps the same version layout.
fn ensure_backup(
    layout: &ArchiveLayout,
    codec: &dyn BackupCodec,
    archive_path: &str,
    displaced: Option<&str>,
) -> io::Result<()> {
    let backup = layout.backup_root.join(archive_path);
    if let Some(keep) = displaced {
        let kept = layout.backup_root.join(keep);
        if backup.exists() && !kept.exists() {
            rename_into(&backup, &kept)?;
        }
        let archived_keep = layout.archive_root.join(keep);
        if !kept.exists() && archived_keep.exists() {
            write_backup(layout, codec, &archived_keep, &kept)?;
        }
    }
    let source = layout.archive_root.join(archive_path);
    let plain = fs::read(&source)?;
    if let Ok(stored) = fs::read(&backup) {
        if codec.decode(&stored).is_ok_and(|d| d == plain) {
            return Ok(());
        }
    }
    write_backup(layout, codec, &source, &backup)
}

fn write_backup(layout: &ArchiveLayout, codec: &dyn BackupCodec, from: &Path, to: &Path) -> io::Result<()> {
    let plain = fs::read(from)?;
    let staging = layout.backup_staging_dir();
    fs::create_dir_all(&staging)?;
    let temp = staging_name(&staging);
    fs::write(&temp, codec.encode(&plain))?;
    fs::File::open(&temp)?.sync_all()?;
    rename_into(&temp, to)
}
