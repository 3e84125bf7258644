//! Transfer queue and bandwidth budget.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use crate::format::{OpsMessage, OpsRole};

#[derive(Debug, Clone)]
pub struct TransferTask {
    pub ops: OpsMessage,
    pub priority: i64,
    pub enqueued_at: Instant,
    pub size: u64,
    pub attempts: u32,
    /// Earliest time a retry may start.
    pub not_before: Option<Instant>,
    seq: u64,
}

impl TransferTask {
    pub fn new(ops: OpsMessage, priority: i64, size: u64) -> Self {
        TransferTask {
            ops,
            priority,
            enqueued_at: Instant::now(),
            size,
            attempts: 0,
            not_before: None,
            seq: 0,
        }
    }

    /// (source host, source path).
    pub fn key(&self) -> (String, String) {
        let t = self.ops.target.as_ref().expect("transfer tasks carry a target");
        (t.source_host.clone(), t.source_path.clone())
    }

    pub fn version(&self) -> Option<i64> {
        self.ops
            .target
            .as_ref()
            .and_then(|t| t.extras.attr("version"))
            .and_then(|v| v.parse().ok())
    }
}

/// Token bucket: `rate` bytes per second, holding at most one second's worth.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: Option<f64>,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_sec: Option<u64>) -> Self {
        let cap = rate_bytes_per_sec.map_or(f64::INFINITY, |r| r as f64);
        TokenBucket {
            rate: rate_bytes_per_sec.map(|r| r as f64),
            capacity: cap,
            tokens: cap,
            last: Instant::now(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    /// A throttled bucket holding `tokens` right now.
    pub fn with_tokens(rate_bytes_per_sec: u64, tokens: u64) -> Self {
        let mut b = Self::new(Some(rate_bytes_per_sec));
        b.tokens = tokens as f64;
        b
    }

    pub fn is_limited(&self) -> bool {
        self.rate.is_some()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    fn refill(&mut self, now: Instant) {
        if let Some(rate) = self.rate {
            let dt = now.saturating_duration_since(self.last).as_secs_f64();
            self.tokens = (self.tokens + dt * rate).min(self.capacity);
        }
        self.last = now;
    }

    pub fn available(&mut self, now: Instant) -> f64 {
        self.refill(now);
        self.tokens
    }

    /// Takes `n` tokens if present.
    pub fn try_take(&mut self, n: u64, now: Instant) -> bool {
        self.refill(now);
        if self.rate.is_none() {
            return true;
        }
        let n = n as f64;
        if n <= self.tokens {
            self.tokens -= n;
            true
        } else {
            false
        }
    }

    /// Time until `n` tokens (capped at capacity) will be available.
    pub fn wait_for(&mut self, n: u64, now: Instant) -> Duration {
        self.refill(now);
        match self.rate {
            None => Duration::ZERO,
            Some(rate) => {
                let missing = (n as f64).min(self.capacity) - self.tokens;
                if missing <= 0.0 {
                    Duration::ZERO
                } else {
                    Duration::from_secs_f64(missing / rate)
                }
            }
        }
    }

    /// Largest chunk a copy may request at once.
    pub fn chunk_limit(&self, preferred: usize) -> usize {
        if self.capacity.is_finite() {
            preferred.min(self.capacity.max(1.0) as usize)
        } else {
            preferred
        }
    }
}

/// Pending tasks plus the set of source paths currently being copied.
#[derive(Debug, Default)]
pub struct TransferQueue {
    tasks: Vec<TransferTask>,
    running: HashSet<(String, String)>,
    next_seq: u64,
}

impl TransferQueue {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn running(&self) -> usize {
        self.running.len()
    }

    pub fn is_idle(&self) -> bool {
        self.tasks.is_empty() && self.running.is_empty()
    }

    pub fn tasks(&self) -> &[TransferTask] {
        &self.tasks
    }

    /// Adds a task, merging it into a queued task for the same source.
    /// Returns true when coalesced.
    pub fn push(&mut self, mut task: TransferTask) -> bool {
        let key = task.key();
        if let Some(existing) = self.tasks.iter_mut().find(|t| t.key() == key) {
            existing.priority = existing.priority.max(task.priority);
            if task.ops.role == OpsRole::Update || task.version() > existing.version() {
                existing.ops = task.ops;
            }
            existing.size = task.size;
            return true;
        }
        task.seq = self.next_seq;
        self.next_seq += 1;
        self.tasks.push(task);
        false
    }

    /// Removes and returns the highest-priority eligible task (earliest
    /// enqueued among equals) whose size fits the budget; `None` when
    /// nothing fits. A task larger than the bucket needs a full bucket.
    pub fn next_task(&mut self, budget: &mut TokenBucket, now: Instant) -> Option<TransferTask> {
        let available = budget.available(now);
        let cap = budget.capacity();
        let best = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| !self.running.contains(&t.key()))
            .filter(|(_, t)| t.not_before.is_none_or(|nb| nb <= now))
            .filter(|(_, t)| (t.size as f64).min(cap) <= available)
            .max_by(|(_, a), (_, b)| {
                a.priority
                    .cmp(&b.priority)
                    .then(b.enqueued_at.cmp(&a.enqueued_at))
                    .then(b.seq.cmp(&a.seq))
            })
            .map(|(i, _)| i)?;
        let task = self.tasks.remove(best);
        self.running.insert(task.key());
        Some(task)
    }

    pub fn finish(&mut self, key: &(String, String)) {
        self.running.remove(key);
    }

    /// Earliest moment a deferred retry becomes eligible.
    pub fn next_retry(&self) -> Option<Instant> {
        self.tasks.iter().filter_map(|t| t.not_before).min()
    }
}
