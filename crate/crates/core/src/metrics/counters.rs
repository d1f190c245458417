use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use serde::{Deserialize, Serialize};

/// Framework-issued kernel interactions, counted at the call site.
///
/// One instance is shared by a [`Domain`](crate::transport::Domain) and the
/// executors running on it.
#[derive(Debug, Default)]
pub struct Counters {
    transport_writes: AtomicU64,
    transport_reads: AtomicU64,
    timer_parks: AtomicU64,
    thread_parks: AtomicU64,
    shared_lock_acquisitions: AtomicU64,
}

/// Plain copy of [`Counters`] at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub transport_writes: u64,
    pub transport_reads: u64,
    pub timer_parks: u64,
    pub thread_parks: u64,
    pub shared_lock_acquisitions: u64,
}

impl CounterSnapshot {
    /// Everything the framework counts as a user-kernel switch.
    pub fn kernel_crossings(&self) -> u64 {
        self.transport_writes + self.transport_reads + self.timer_parks + self.thread_parks
    }

    /// The share of [`kernel_crossings`](Self::kernel_crossings) spent moving messages.
    pub fn delivery_crossings(&self) -> u64 {
        self.transport_writes + self.transport_reads
    }

    pub fn delta(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            transport_writes: self.transport_writes - earlier.transport_writes,
            transport_reads: self.transport_reads - earlier.transport_reads,
            timer_parks: self.timer_parks - earlier.timer_parks,
            thread_parks: self.thread_parks - earlier.thread_parks,
            shared_lock_acquisitions: self.shared_lock_acquisitions
                - earlier.shared_lock_acquisitions,
        }
    }
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transport_write(&self) {
        self.transport_writes.fetch_add(1, Relaxed);
    }

    pub fn transport_read(&self) {
        self.transport_reads.fetch_add(1, Relaxed);
    }

    pub fn timer_park(&self) {
        self.timer_parks.fetch_add(1, Relaxed);
    }

    pub fn thread_park(&self) {
        self.thread_parks.fetch_add(1, Relaxed);
    }

    pub fn shared_lock(&self) {
        self.shared_lock_acquisitions.fetch_add(1, Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            transport_writes: self.transport_writes.load(Relaxed),
            transport_reads: self.transport_reads.load(Relaxed),
            timer_parks: self.timer_parks.load(Relaxed),
            thread_parks: self.thread_parks.load(Relaxed),
            shared_lock_acquisitions: self.shared_lock_acquisitions.load(Relaxed),
        }
    }
}
