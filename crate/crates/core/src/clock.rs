//! Monotonic time in nanoseconds.
//!
//! All timestamps in this crate come from `CLOCK_MONOTONIC`, which is shared by
//! every process on the host, so frames stamped in one process can be compared
//! with readings taken in another.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    debug_assert_eq!(rc, 0);
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Time source for dispatch decisions. Executors use [`Clock::Monotonic`];
/// [`Clock::Manual`] lets tests drive virtual time.
#[derive(Debug, Clone, Default)]
pub enum Clock {
    #[default]
    Monotonic,
    Manual(Arc<AtomicU64>),
}

impl Clock {
    pub fn manual(start_ns: u64) -> Self {
        Clock::Manual(Arc::new(AtomicU64::new(start_ns)))
    }

    pub fn now_ns(&self) -> u64 {
        match self {
            Clock::Monotonic => monotonic_ns(),
            Clock::Manual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Moves a manual clock to `ns`. Never moves time backwards.
    pub fn set_ns(&self, ns: u64) {
        if let Clock::Manual(t) = self {
            t.fetch_max(ns, Ordering::SeqCst);
        }
    }

    pub fn advance(&self, by: Duration) {
        if let Clock::Manual(t) = self {
            t.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
        }
    }
}

/// Spins until `duration_ns` of wall time has passed.
pub fn busy_work(duration_ns: u64) {
    if duration_ns == 0 {
        return;
    }
    let end = monotonic_ns() + duration_ns;
    while monotonic_ns() < end {
        std::hint::spin_loop();
    }
}
