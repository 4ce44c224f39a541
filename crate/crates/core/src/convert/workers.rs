//! Conversion worker pool on a simulated clock.
//!
//! Each dequeued task is executed for real against the array; its trace is
//! then placed on a discrete-event timeline where every device offers a fixed
//! number of parallel channels with per-operation costs. A token bucket over
//! user bytes throttles task starts.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::{ConversionTask, ConversionTrace, Direction, OpKind};
use crate::iopath::ElasticArray;

/// Per-operation service times in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub read_us: f64,
    pub write_us: f64,
    pub trim_us: f64,
    /// CPU time to fold one strip into a parity block.
    pub xor_us_per_strip: f64,
    pub channels_per_device: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            read_us: 80.0,
            write_us: 20.0,
            trim_us: 5.0,
            xor_us_per_strip: 10.0,
            channels_per_device: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleConfig {
    /// Cap on converted user bytes per second; `None` is unthrottled.
    pub max_bytes_per_sec: Option<u64>,
    pub worker_count: usize,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        Self {
            max_bytes_per_sec: None,
            worker_count: 8,
        }
    }
}

/// Token bucket over bytes with a 100ms burst allowance, starting empty.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: f64,
}

impl TokenBucket {
    pub const WINDOW_S: f64 = 0.1;

    pub fn new(bytes_per_sec: u64) -> Self {
        let rate = bytes_per_sec as f64;
        Self {
            rate,
            capacity: rate * Self::WINDOW_S,
            tokens: 0.0,
            last: 0.0,
        }
    }

    /// Earliest time at or after `t` (seconds) when `bytes` can be taken;
    /// takes them. Grants never go back in time.
    pub fn acquire(&mut self, t: f64, bytes: f64) -> f64 {
        let t = t.max(self.last);
        self.tokens = (self.tokens + (t - self.last) * self.rate).min(self.capacity.max(bytes));
        self.last = t;
        if self.tokens >= bytes {
            self.tokens -= bytes;
            return t;
        }
        let wait = (bytes - self.tokens) / self.rate;
        self.last = t + wait;
        self.tokens = 0.0;
        self.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum ProgressEvent {
    Task {
        seg: u64,
        direction: Direction,
        worker: usize,
        start_s: f64,
        end_s: f64,
        bytes: u64,
    },
    Failed {
        seg: u64,
        direction: Direction,
        error: String,
    },
    Summary {
        tasks: usize,
        failed: usize,
        bytes: u64,
        makespan_s: f64,
        throughput_bps: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub tasks: usize,
    pub bytes: u64,
    pub throughput_bps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub tasks: usize,
    pub failed: usize,
    pub bytes: u64,
    pub makespan_s: f64,
    pub throughput_bps: f64,
    pub promote: DirectionReport,
    pub demote: DirectionReport,
    pub events: Vec<ProgressEvent>,
    pub traces: Vec<ConversionTrace>,
}

impl WorkerReport {
    /// Largest number of bytes completed inside any window of `window_s`.
    pub fn max_window_bytes(&self, window_s: f64) -> u64 {
        let mut done: Vec<(f64, u64)> = self
            .events
            .iter()
            .filter_map(|e| match e {
                ProgressEvent::Task { end_s, bytes, .. } => Some((*end_s, *bytes)),
                _ => None,
            })
            .collect();
        done.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = 0;
        let mut sum = 0;
        let mut lo = 0;
        for hi in 0..done.len() {
            sum += done[hi].1;
            while done[hi].0 - done[lo].0 >= window_s {
                sum -= done[lo].1;
                lo += 1;
            }
            best = best.max(sum);
        }
        best
    }

    /// Progress stream as line-delimited JSON.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

struct Channels {
    free: Vec<BinaryHeap<Reverse<u64>>>,
}

impl Channels {
    fn new(devices: usize, per: usize) -> Self {
        Self {
            free: (0..devices).map(|_| (0..per.max(1)).map(|_| Reverse(0)).collect()).collect(),
        }
    }

    /// Reserves the earliest free channel of `dev` for an op ready at `ready`.
    fn reserve(&mut self, dev: usize, ready: u64, cost: u64) -> u64 {
        let heap = &mut self.free[dev];
        let Reverse(free) = heap.pop().expect("channel");
        let end = free.max(ready) + cost;
        heap.push(Reverse(end));
        end
    }
}

fn ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

/// Places a trace on the timeline starting at `start` (ns); returns its end.
fn schedule(trace: &ConversionTrace, start: u64, cost: &CostModel, ch: &mut Channels) -> u64 {
    let mut t = start;
    for phase in &trace.phases {
        let op = match phase.kind {
            OpKind::Read => ns(cost.read_us),
            OpKind::Write | OpKind::Bitmap => ns(cost.write_us),
            OpKind::Trim => ns(cost.trim_us),
            OpKind::Xor => {
                t += ns(cost.xor_us_per_strip) * phase.devices.len() as u64;
                continue;
            }
        };
        let mut end = t;
        for &d in &phase.devices {
            end = end.max(ch.reserve(d, t, op));
        }
        t = end;
    }
    t
}

/// Drains `tasks` with `throttle.worker_count` workers. Failed tasks are
/// reported and dropped.
pub fn run_conversion_workers(
    array: &mut ElasticArray,
    tasks: &[ConversionTask],
    throttle: ThrottleConfig,
    cost: CostModel,
) -> WorkerReport {
    let mut report = WorkerReport::default();
    let mut workers: BinaryHeap<Reverse<(u64, usize)>> = (0..throttle.worker_count.max(1)).map(|w| Reverse((0, w))).collect();
    let mut channels = Channels::new(array.geometry().devices, cost.channels_per_device);
    let mut bucket = throttle.max_bytes_per_sec.map(TokenBucket::new);
    let mut seg_busy: HashMap<u64, u64> = HashMap::new();
    let task_bytes = (array.geometry().n() * array.geometry().strip_size) as f64;
    let mut makespan = 0u64;
    for task in tasks {
        let Reverse((free, w)) = workers.pop().expect("worker");
        let mut start = free.max(seg_busy.get(&task.seg).copied().unwrap_or(0));
        if let Some(b) = bucket.as_mut() {
            start = (b.acquire(start as f64 * 1e-9, task_bytes) * 1e9).round() as u64;
        }
        let mut t = *task;
        match array.run_task(&mut t) {
            Ok(trace) => {
                let end = schedule(&trace, start, &cost, &mut channels);
                seg_busy.insert(task.seg, end);
                makespan = makespan.max(end);
                workers.push(Reverse((end, w)));
                report.tasks += 1;
                report.bytes += trace.bytes;
                let dir = match task.direction {
                    Direction::Promote => &mut report.promote,
                    Direction::Demote => &mut report.demote,
                };
                dir.tasks += 1;
                dir.bytes += trace.bytes;
                report.events.push(ProgressEvent::Task {
                    seg: task.seg,
                    direction: task.direction,
                    worker: w,
                    start_s: start as f64 * 1e-9,
                    end_s: end as f64 * 1e-9,
                    bytes: trace.bytes,
                });
                report.traces.push(trace);
            }
            Err(e) => {
                workers.push(Reverse((start, w)));
                report.failed += 1;
                report.events.push(ProgressEvent::Failed {
                    seg: task.seg,
                    direction: task.direction,
                    error: e.to_string(),
                });
            }
        }
    }
    report.makespan_s = makespan as f64 * 1e-9;
    let rate = |b: u64| if makespan == 0 { 0.0 } else { b as f64 / report.makespan_s };
    report.throughput_bps = rate(report.bytes);
    report.promote.throughput_bps = rate(report.promote.bytes);
    report.demote.throughput_bps = rate(report.demote.bytes);
    report.events.push(ProgressEvent::Summary {
        tasks: report.tasks,
        failed: report.failed,
        bytes: report.bytes,
        makespan_s: report.makespan_s,
        throughput_bps: report.throughput_bps,
    });
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::czdev::{CompressMode, BLOCK_SIZE};
    use crate::iopath::ArrayConfig;

    fn array(segments: u64) -> ElasticArray {
        let cfg = ArrayConfig {
            devices: 4,
            flash_capacity_bytes: segments * 4096,
            alpha_exp: 1.0,
            journal_fraction: 0.0,
            compress_mode: CompressMode::modeled(2.0),
            ..ArrayConfig::default()
        };
        let mut a = ElasticArray::create(cfg).unwrap();
        for lba in 0..a.user_blocks() {
            a.write(lba, &[(lba % 251) as u8 + 1; BLOCK_SIZE]).unwrap();
        }
        a
    }

    fn promotes(segs: u64) -> Vec<ConversionTask> {
        (0..segs).map(|s| ConversionTask::new(s, Direction::Promote)).collect()
    }

    #[test]
    fn empty_queue_completes_immediately() {
        let mut a = array(8);
        let r = run_conversion_workers(&mut a, &[], ThrottleConfig::default(), CostModel::default());
        assert_eq!((r.tasks, r.makespan_s), (0, 0.0));
        assert_eq!(r.events.len(), 1);
    }

    #[test]
    fn bucket_starts_empty_and_paces() {
        let mut b = TokenBucket::new(1000);
        assert_eq!(b.acquire(0.0, 50.0), 0.05);
        assert_eq!(b.acquire(0.05, 50.0), 0.1);
        // Idle for a long time: burst capped at 100 bytes.
        assert_eq!(b.acquire(10.0, 100.0), 10.0);
        assert!((b.acquire(10.0, 100.0) - 10.1).abs() < 1e-12);
    }

    #[test]
    fn more_workers_more_throughput() {
        let t8 = run_conversion_workers(
            &mut array(256),
            &promotes(256),
            ThrottleConfig {
                worker_count: 8,
                ..Default::default()
            },
            CostModel::default(),
        );
        let t24 = run_conversion_workers(
            &mut array(256),
            &promotes(256),
            ThrottleConfig {
                worker_count: 24,
                ..Default::default()
            },
            CostModel::default(),
        );
        assert!(t24.throughput_bps > t8.throughput_bps);
    }

    #[test]
    fn failed_tasks_are_reported() {
        let mut a = array(8);
        let tasks = [
            ConversionTask::new(0, Direction::Demote),
            ConversionTask::new(1, Direction::Promote),
        ];
        let r = run_conversion_workers(&mut a, &tasks, ThrottleConfig::default(), CostModel::default());
        assert_eq!((r.tasks, r.failed), (1, 1));
        assert!(r.to_ndjson().lines().count() == 3);
    }
}
