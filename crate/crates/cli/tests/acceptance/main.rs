//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. `LIMS_ACCEPT=2,7` runs a subset.

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

mod common;
mod fidelity;
mod framing;
mod live;
mod query;
mod recovery;

/// Tracks live heap bytes so the framing check can bound memory.
struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grew(n: usize) {
    let now = LIVE.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(l) };
        if !p.is_null() {
            grew(l.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, l: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(l) };
        if !p.is_null() {
            grew(l.size());
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        unsafe { System.dealloc(p, l) };
        LIVE.fetch_sub(l.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, p: *mut u8, l: Layout, new: usize) -> *mut u8 {
        let q = unsafe { System.realloc(p, l, new) };
        if !q.is_null() {
            if new > l.size() {
                grew(new - l.size());
            } else {
                LIVE.fetch_sub(l.size() - new, Ordering::Relaxed);
            }
        }
        q
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Resets the high-water mark to the current live size and returns it.
pub fn reset_peak() -> usize {
    let now = LIVE.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak() -> usize {
    PEAK.load(Ordering::Relaxed)
}

type Check = fn() -> String;

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "fixture fidelity", fidelity::fixtures),
    (2, "sub-minute availability", live::availability),
    (3, "tap latency", live::tap_latency),
    (4, "fault recovery", recovery::fault_recovery),
    (5, "hard-copy round-trip", fidelity::hard_copy),
    (6, "query/oracle equivalence", query::oracle_equivalence),
    (7, "framing robustness", framing::robustness),
    (8, "semantic promotion", fidelity::semantic_promotion),
    (9, "update-swap semantics", live::update_swap),
    (10, "throughput bound", live::throughput_bound),
];

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored
    let only: Option<Vec<u32>> = std::env::var("LIMS_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    if std::env::var_os("RUST_LOG").is_some() {
        lims_cli::init_logging();
    }

    let mut failed = 0;
    let mut lines = Vec::new();
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        let line = match res {
            Ok(detail) => format!("PASS {n:>2} {name}: {detail} ({secs:.1}s)"),
            Err(p) => {
                failed += 1;
                format!("FAIL {n:>2} {name}: {} ({secs:.1}s)", panic_text(&*p))
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
