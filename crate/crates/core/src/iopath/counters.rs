use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Snapshot of array-level operation counts.
///
/// `device_writes` includes journal traffic; conversion, metadata and
/// resync traffic is tracked separately and excluded from `wa`/`ra`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmpCounters {
    pub user_reads: u64,
    pub user_writes: u64,
    pub device_reads: u64,
    pub device_writes: u64,
    /// Device reads issued while serving user reads.
    pub read_path_reads: u64,
    /// Device reads issued by stripe updates (read-modify-write).
    pub write_path_reads: u64,
    pub stripe_writes: u64,
    pub journal_writes: u64,
    pub conversion_reads: u64,
    pub conversion_writes: u64,
    pub conversion_trims: u64,
    pub metadata_writes: u64,
    pub resync_reads: u64,
    pub resync_writes: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl AmpCounters {
    pub fn user_ops(&self) -> u64 {
        self.user_reads + self.user_writes
    }

    pub fn wa(&self) -> f64 {
        ratio(self.device_writes, self.user_writes)
    }

    /// Device reads per user operation.
    pub fn ra(&self) -> f64 {
        ratio(self.device_reads, self.user_ops())
    }

    pub fn read_ra(&self) -> f64 {
        ratio(self.read_path_reads, self.user_reads)
    }

    pub fn write_ra(&self) -> f64 {
        ratio(self.write_path_reads, self.user_writes)
    }

    /// Backend reads plus writes per user operation.
    pub fn backend_cost(&self) -> f64 {
        ratio(self.device_reads + self.device_writes, self.user_ops())
    }
}

#[derive(Debug, Default)]
pub(crate) struct AmpCells {
    pub user_reads: AtomicU64,
    pub user_writes: AtomicU64,
    pub read_path_reads: AtomicU64,
    pub write_path_reads: AtomicU64,
    pub stripe_writes: AtomicU64,
    pub conversion_reads: AtomicU64,
    pub conversion_writes: AtomicU64,
    pub conversion_trims: AtomicU64,
    pub metadata_writes: AtomicU64,
    pub resync_reads: AtomicU64,
    pub resync_writes: AtomicU64,
}

impl AmpCells {
    pub fn add(cell: &AtomicU64, v: u64) {
        cell.fetch_add(v, Ordering::Relaxed);
    }

    pub fn snapshot(&self, journal_writes: u64) -> AmpCounters {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        let read_path_reads = g(&self.read_path_reads);
        let write_path_reads = g(&self.write_path_reads);
        let stripe_writes = g(&self.stripe_writes);
        AmpCounters {
            user_reads: g(&self.user_reads),
            user_writes: g(&self.user_writes),
            device_reads: read_path_reads + write_path_reads,
            device_writes: stripe_writes + journal_writes,
            read_path_reads,
            write_path_reads,
            stripe_writes,
            journal_writes,
            conversion_reads: g(&self.conversion_reads),
            conversion_writes: g(&self.conversion_writes),
            conversion_trims: g(&self.conversion_trims),
            metadata_writes: g(&self.metadata_writes),
            resync_reads: g(&self.resync_reads),
            resync_writes: g(&self.resync_writes),
        }
    }

    pub fn reset(&self) {
        for c in [
            &self.user_reads,
            &self.user_writes,
            &self.read_path_reads,
            &self.write_path_reads,
            &self.stripe_writes,
            &self.conversion_reads,
            &self.conversion_writes,
            &self.conversion_trims,
            &self.metadata_writes,
            &self.resync_reads,
            &self.resync_writes,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}
