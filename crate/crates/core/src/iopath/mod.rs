//! User reads and writes over the segment layout.
//!
//! Writes are acknowledged once they are durable in the journal; migration
//! later applies them to their stripes (read-modify-write for RAID 5, both
//! copies for RAID 10). With a zero-row journal, writes go straight to the
//! stripe. One device may be offline at a time.

pub mod counters;
mod recovery;
mod scrub;
pub(crate) mod stripe;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::czdev::{
    Block, CompressMode, CompressingDevice, DeviceConfig, DeviceError, DeviceState, SizeHint, BLOCK_SIZE,
};
use crate::fault::FaultInjector;
use crate::journal::{Journal, JournalError, JournalRecord, MAX_JOURNAL_DEVICES};
use crate::layout::{ArrayGeometry, LayoutError, Level, LevelBitmap, Location};
use crate::xor_into;

pub use counters::AmpCounters;
use counters::AmpCells;
pub use recovery::RecoveryReport;
pub use scrub::ScrubReport;
use stripe::StripeIo;

/// How parity blocks are sized on modeled-ratio devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParityRatio {
    /// No hint: the device compresses the actual bytes (or uses its default ratio).
    Natural,
    /// Every parity block stores at this ratio.
    Fixed(f64),
    /// `1 + (alpha_usr - 1) / 4`, from the stripe's current data strips.
    Linked,
}

impl fmt::Display for ParityRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParityRatio::Natural => f.write_str("natural"),
            ParityRatio::Linked => f.write_str("linked"),
            ParityRatio::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for ParityRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "natural" => Ok(ParityRatio::Natural),
            "linked" => Ok(ParityRatio::Linked),
            other => other
                .parse::<f64>()
                .map(ParityRatio::Fixed)
                .map_err(|_| format!("parity ratio must be natural, linked or a number, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub devices: usize,
    /// Per-device flash budget for segment space.
    pub flash_capacity_bytes: u64,
    pub alpha_exp: f64,
    pub strip_size: usize,
    /// Journal record capacity as a fraction of user capacity; 0 disables it.
    pub journal_fraction: f64,
    pub compress_mode: CompressMode,
    pub parity_ratio: ParityRatio,
    pub migration_workers: usize,
    /// Records migrated per back-pressure round; 0 means half the journal.
    pub migration_batch: usize,
    pub initial_level: Level,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            devices: 4,
            flash_capacity_bytes: 64 << 20,
            alpha_exp: 1.4,
            strip_size: BLOCK_SIZE,
            journal_fraction: 0.01,
            compress_mode: CompressMode::deflate(),
            parity_ratio: ParityRatio::Natural,
            migration_workers: 4,
            migration_batch: 0,
            initial_level: Level::R5,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<(), ArrayError> {
        let bad = |m: String| Err(ArrayError::Config(m));
        if !(2..=MAX_JOURNAL_DEVICES).contains(&self.devices) {
            return bad(format!("devices must be in 2..=16, got {}", self.devices));
        }
        if self.strip_size != BLOCK_SIZE {
            return bad(format!("strip size must be {BLOCK_SIZE}, got {}", self.strip_size));
        }
        if self.flash_capacity_bytes < BLOCK_SIZE as u64 {
            return bad("flash capacity must be at least one block".into());
        }
        if !(self.alpha_exp >= 1.0 && self.alpha_exp.is_finite()) {
            return bad(format!("alpha_exp must be >= 1, got {}", self.alpha_exp));
        }
        if !(0.0..=0.5).contains(&self.journal_fraction) {
            return bad(format!("journal fraction must be in [0, 0.5], got {}", self.journal_fraction));
        }
        if self.migration_workers == 0 {
            return bad("migration workers must be >= 1".into());
        }
        if let ParityRatio::Fixed(r) = self.parity_ratio {
            if !(r >= 1.0 && r.is_finite()) {
                return bad(format!("parity ratio must be >= 1, got {r}"));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry, ArrayError> {
        let base = ArrayGeometry::new(self.devices, self.flash_capacity_bytes, self.alpha_exp, 0)?;
        let rows = if self.journal_fraction > 0.0 {
            ((self.journal_fraction * base.segment_count as f64).ceil() as u64).max(1)
        } else {
            0
        };
        Ok(ArrayGeometry::new(self.devices, self.flash_capacity_bytes, self.alpha_exp, rows)?)
    }

    fn journal_parity_hint(&self) -> Option<SizeHint> {
        match self.parity_ratio {
            ParityRatio::Fixed(r) => Some(SizeHint::Ratio(r)),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArrayError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("segment {seg} is RAID 5 and device {device} is offline: writes rejected")]
    DegradedReject { seg: u64, device: usize },
    #[error("more than one device unavailable: data cannot be reconstructed")]
    DataLoss,
    #[error("device {0} cannot go offline: device {1} is already offline")]
    SecondFailure(usize, usize),
    #[error("no device {0} in this array")]
    NoSuchDevice(usize),
    #[error("journal full and migration freed no space")]
    JournalStuck,
    #[error("invalid array config: {0}")]
    Config(String),
    #[error("no valid level bitmap replica on any online device")]
    NoBitmap,
    #[error("conversion needs every device online")]
    ConversionDegraded,
    #[error("segment {seg} is already {level:?}")]
    WrongLevel { seg: u64, level: Level },
    #[error("segment {0} out of range")]
    NoSuchSegment(u64),
}

impl From<JournalError> for ArrayError {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Full => ArrayError::JournalStuck,
            JournalError::Disabled => ArrayError::Config("journal disabled".into()),
            JournalError::Device(d) => ArrayError::Device(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "state", content = "device")]
pub enum ArrayMode {
    Normal,
    Degraded(usize),
}

/// Measured compressibility of a segment's stored blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentRatios {
    /// `n * 4096 / sum(stored data bytes)`; unmapped strips count as 0 bytes.
    pub alpha_usr: Option<f64>,
    /// `4096 / stored parity bytes`, RAID 5 only.
    pub alpha_pty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub id: usize,
    pub state: DeviceState,
    pub physical_used_bytes: u64,
    pub flash_capacity_bytes: u64,
    pub utilization: f64,
    pub logical_mapped_blocks: u64,
    pub read_ops: u64,
    pub write_ops: u64,
    pub trim_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalReport {
    pub rows: u64,
    pub occupied_rows: usize,
    pub pending_records: usize,
    pub record_writes: u64,
    pub parity_writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayStats {
    pub user_reads: u64,
    pub user_writes: u64,
    pub device_reads: u64,
    pub device_writes: u64,
    pub wa: f64,
    pub ra: f64,
    pub read_ra: f64,
    pub write_ra: f64,
    pub mode: ArrayMode,
    pub segments: u64,
    pub raid10_segments: u64,
    pub coverage: f64,
    pub user_capacity_bytes: u64,
    pub counters: AmpCounters,
    pub journal: JournalReport,
    pub per_device: Vec<DeviceReport>,
}

#[derive(Debug)]
pub struct ElasticArray {
    pub(crate) config: ArrayConfig,
    pub(crate) geometry: ArrayGeometry,
    pub(crate) devices: Vec<Arc<CompressingDevice>>,
    pub(crate) faults: Arc<FaultInjector>,
    pub(crate) bitmap: LevelBitmap,
    pub(crate) journal: Journal,
    pub(crate) cells: AmpCells,
    /// Segments written while a device was offline.
    pub(crate) dirty: BTreeSet<u64>,
}

impl ElasticArray {
    /// Formats a fresh array on new in-memory devices.
    pub fn create(config: ArrayConfig) -> Result<Self, ArrayError> {
        config.validate()?;
        let geometry = config.geometry()?;
        let faults = Arc::new(FaultInjector::new());
        let mut devices = Vec::with_capacity(config.devices);
        for id in 0..config.devices {
            let mut dev = CompressingDevice::new(
                id,
                DeviceConfig {
                    flash_capacity_bytes: geometry.device_flash_bytes(),
                    logical_blocks: geometry.device_logical_blocks(),
                    compress_mode: config.compress_mode.clone(),
                },
            )?;
            dev.attach_faults(faults.clone());
            devices.push(Arc::new(dev));
        }
        let mut bitmap = LevelBitmap::new(geometry.segment_count);
        if config.initial_level == Level::R10 {
            for seg in 0..geometry.segment_count {
                bitmap.set(seg, Level::R10);
            }
        }
        let journal = Journal::new(
            config.devices,
            geometry.journal_base(),
            geometry.journal_rows,
            config.journal_parity_hint(),
        );
        let mut array = Self {
            config,
            geometry,
            devices,
            faults,
            bitmap,
            journal,
            cells: AmpCells::default(),
            dirty: BTreeSet::new(),
        };
        array.persist_bitmap()?;
        Ok(array)
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn devices(&self) -> &[Arc<CompressingDevice>] {
        &self.devices
    }

    pub fn faults(&self) -> &Arc<FaultInjector> {
        &self.faults
    }

    pub fn bitmap(&self) -> &LevelBitmap {
        &self.bitmap
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn level(&self, seg: u64) -> Level {
        self.bitmap.level(seg)
    }

    pub fn segment_count(&self) -> u64 {
        self.geometry.segment_count
    }

    pub fn user_blocks(&self) -> u64 {
        self.geometry.user_blocks()
    }

    pub fn segment_of(&self, user_lba: u64) -> Result<u64, ArrayError> {
        Ok(self.geometry.split_user_lba(user_lba)?.0)
    }

    pub fn raid10_count(&self) -> u64 {
        self.bitmap.raid10_count()
    }

    pub fn coverage(&self) -> f64 {
        self.bitmap.raid10_count() as f64 / self.geometry.segment_count as f64
    }

    pub fn offline_device(&self) -> Option<usize> {
        self.devices.iter().position(|d| !d.is_online())
    }

    pub fn mode(&self) -> ArrayMode {
        match self.offline_device() {
            Some(d) => ArrayMode::Degraded(d),
            None => ArrayMode::Normal,
        }
    }

    pub fn dirty_segments(&self) -> usize {
        self.dirty.len()
    }

    /// Segments awaiting resync, for persisting across restarts.
    pub fn dirty_list(&self) -> Vec<u64> {
        self.dirty.iter().copied().collect()
    }

    /// Restores resync bookkeeping saved by [`Self::dirty_list`].
    pub fn mark_dirty(&mut self, segs: impl IntoIterator<Item = u64>) {
        let count = self.geometry.segment_count;
        self.dirty.extend(segs.into_iter().filter(|&s| s < count));
    }

    pub fn counters(&self) -> AmpCounters {
        let j = self.journal.counters();
        self.cells.snapshot(j.record_writes + j.parity_writes)
    }

    pub fn reset_counters(&mut self) {
        self.cells.reset();
        self.journal.reset_counters();
        for d in &self.devices {
            d.reset_counters();
        }
    }

    /// Physical bytes used on each device.
    pub fn device_usage(&self) -> Vec<u64> {
        self.devices.iter().map(|d| d.physical_used()).collect()
    }

    pub fn write(&mut self, user_lba: u64, data: &Block) -> Result<(), ArrayError> {
        self.write_hinted(user_lba, data, None)
    }

    /// Acknowledged user write. The hint is forwarded to modeled-ratio devices.
    pub fn write_hinted(&mut self, user_lba: u64, data: &Block, hint: Option<SizeHint>) -> Result<(), ArrayError> {
        let (seg, _) = self.geometry.split_user_lba(user_lba)?;
        if let Some(device) = self.offline_device() {
            if self.bitmap.level(seg) == Level::R5 {
                return Err(ArrayError::DegradedReject { seg, device });
            }
        }
        if self.journal.enabled() {
            loop {
                match self.journal.append(&self.devices, user_lba, data, hint) {
                    Ok(_) => break,
                    Err(JournalError::Full) => {
                        let batch = self.batch_size();
                        let before = self.journal.occupied_rows();
                        self.migrate_batch(batch)?;
                        if self.journal.occupied_rows() >= before {
                            return Err(ArrayError::JournalStuck);
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        } else {
            let degraded = self.stripe_io().update(user_lba, data, hint)?;
            if degraded {
                self.dirty.insert(seg);
            }
        }
        AmpCells::add(&self.cells.user_writes, 1);
        Ok(())
    }

    fn batch_size(&self) -> usize {
        if self.config.migration_batch > 0 {
            self.config.migration_batch
        } else {
            (self.journal.capacity_records() as usize / 2).max(1)
        }
    }

    pub(crate) fn stripe_io(&self) -> StripeIo<'_> {
        StripeIo {
            geometry: &self.geometry,
            devices: &self.devices,
            bitmap: &self.bitmap,
            cells: &self.cells,
            parity: self.config.parity_ratio,
        }
    }

    /// Returns the latest acknowledged content of `user_lba`.
    pub fn read(&self, user_lba: u64) -> Result<Block, ArrayError> {
        let (seg, strip) = self.geometry.split_user_lba(user_lba)?;
        AmpCells::add(&self.cells.user_reads, 1);
        if let Some(rec) = self.journal.lookup(user_lba) {
            return Ok(*rec.payload);
        }
        let level = self.bitmap.level(seg);
        let m = self.geometry.map_user_lba(user_lba, level)?;
        match level {
            Level::R5 => {
                if self.devices[m.primary.device].is_online() {
                    self.counted_read(m.primary)
                } else {
                    self.reconstruct_strip(seg, m.primary.device)
                }
            }
            Level::R10 => {
                let loc = self.mirror_read_select(seg, strip).ok_or(ArrayError::DataLoss)?;
                self.counted_read(loc)
            }
        }
    }

    fn counted_read(&self, loc: Location) -> Result<Block, ArrayError> {
        let dev = &self.devices[loc.device];
        let _g = dev.begin_op();
        let b = dev.read(loc.lba)?;
        AmpCells::add(&self.cells.read_path_reads, 1);
        Ok(b)
    }

    /// Rebuilds the slot-1 block that `failed` holds for segment `seg` from
    /// the other `n` slot-1 blocks.
    pub fn reconstruct_strip(&self, seg: u64, failed: usize) -> Result<Block, ArrayError> {
        if seg >= self.geometry.segment_count {
            return Err(ArrayError::NoSuchSegment(seg));
        }
        let lba = self.geometry.slot_lba(seg, 0);
        let mut out = [0u8; BLOCK_SIZE];
        for (d, dev) in self.devices.iter().enumerate() {
            if d == failed {
                continue;
            }
            if !dev.is_online() {
                return Err(ArrayError::DataLoss);
            }
            let b = self.counted_read(Location { device: d, lba })?;
            xor_into(&mut out, &b);
        }
        Ok(out)
    }

    /// Copy to read for a RAID 10 strip: the online device with fewer
    /// in-flight operations, ties to the lower id.
    pub fn mirror_read_select(&self, seg: u64, strip: usize) -> Option<Location> {
        let a = Location {
            device: self.geometry.data_device(seg, strip),
            lba: self.geometry.slot_lba(seg, 0),
        };
        let b = Location {
            device: self.geometry.mirror_device(seg, strip),
            lba: self.geometry.slot_lba(seg, 1),
        };
        let ok = |l: &Location| self.devices[l.device].is_online();
        match (ok(&a), ok(&b)) {
            (true, true) => {
                let key = |l: &Location| (self.devices[l.device].inflight(), l.device);
                Some(if key(&b) < key(&a) { b } else { a })
            }
            (true, false) => Some(a),
            (false, true) => Some(b),
            (false, false) => None,
        }
    }

    /// Migrates up to `max` of the oldest journal records and frees rows.
    pub fn migrate_batch(&mut self, max: usize) -> Result<usize, ArrayError> {
        let recs = self.journal.oldest(max);
        self.migrate_records(recs, self.config.migration_workers)
    }

    pub(crate) fn migrate_records(&mut self, recs: Vec<JournalRecord>, workers: usize) -> Result<usize, ArrayError> {
        let mut done = 0;
        let mut live = Vec::with_capacity(recs.len());
        for r in recs {
            if self.journal.is_superseded(&r) {
                self.journal.complete(r.seq);
                done += 1;
            } else {
                live.push(r);
            }
        }
        let n = self.geometry.n() as u64;
        let workers = workers.max(1);
        let mut buckets: Vec<Vec<JournalRecord>> = vec![Vec::new(); workers];
        for r in live {
            let seg = r.user_lba / n;
            buckets[(seg % workers as u64) as usize].push(r);
        }
        let io = self.stripe_io();
        let run = |batch: &[JournalRecord]| {
            let mut out = Vec::with_capacity(batch.len());
            for r in batch {
                let res = io.update(r.user_lba, &r.payload, r.hint);
                let stop = res.is_err();
                out.push((r.seq, r.user_lba / n, res));
                if stop {
                    break;
                }
            }
            out
        };
        let results: Vec<_> = if buckets.iter().filter(|b| !b.is_empty()).count() <= 1 {
            buckets.iter().flat_map(|b| run(b)).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = buckets
                    .iter()
                    .filter(|b| !b.is_empty())
                    .map(|b| s.spawn(|| run(b)))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("migration worker panicked"))
                    .collect()
            })
        };
        let mut first_err = None;
        for (seq, seg, res) in results {
            match res {
                Ok(degraded) => {
                    self.journal.complete(seq);
                    if degraded {
                        self.dirty.insert(seg);
                    }
                    done += 1;
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        self.journal.reclaim(&self.devices)?;
        Ok(done)
    }

    /// Drains the journal completely.
    pub fn flush(&mut self) -> Result<(), ArrayError> {
        if !self.journal.enabled() {
            return Ok(());
        }
        self.journal.seal(&self.devices)?;
        while !self.journal.is_empty() {
            self.migrate_batch(usize::MAX)?;
        }
        self.journal.reclaim(&self.devices)?;
        Ok(())
    }

    /// Takes one device offline. A second concurrent failure is refused.
    pub fn set_offline(&mut self, device: usize) -> Result<(), ArrayError> {
        if device >= self.devices.len() {
            return Err(ArrayError::NoSuchDevice(device));
        }
        if let Some(other) = self.offline_device() {
            if other != device {
                return Err(ArrayError::SecondFailure(device, other));
            }
            return Ok(());
        }
        self.devices[device].set_state(DeviceState::Offline);
        Ok(())
    }

    /// Brings a device back and resynchronizes everything written without it.
    pub fn set_online(&mut self, device: usize) -> Result<usize, ArrayError> {
        if device >= self.devices.len() {
            return Err(ArrayError::NoSuchDevice(device));
        }
        if self.devices[device].is_online() {
            return Ok(0);
        }
        self.devices[device].set_state(DeviceState::Online);
        self.journal.resync_device(&self.devices, device)?;
        self.persist_bitmap()?;
        for seg in 0..self.geometry.segment_count {
            self.cleanup_segment(seg, Some(device))?;
        }
        let dirty: Vec<u64> = self.dirty.iter().copied().collect();
        for &seg in &dirty {
            self.resync_segment(seg, device)?;
            self.dirty.remove(&seg);
        }
        Ok(dirty.len())
    }

    fn resync_segment(&mut self, seg: u64, device: usize) -> Result<(), ArrayError> {
        let g = &self.geometry;
        let s1 = g.slot_lba(seg, 0);
        let s2 = g.slot_lba(seg, 1);
        match self.bitmap.level(seg) {
            Level::R5 => {
                let mut out = [0u8; BLOCK_SIZE];
                for d in (0..g.devices).filter(|&d| d != device) {
                    xor_into(&mut out, &self.resync_read(d, s1)?);
                }
                let hint = if device == g.parity_device(seg) {
                    stripe::parity_hint(self.config.parity_ratio, g, &self.devices, seg)
                } else {
                    None
                };
                self.resync_write(device, s1, &out, hint)?;
            }
            Level::R10 => {
                if let Some(strip) = g.strip_of_device(seg, device) {
                    self.resync_copy(g.mirror_device(seg, strip), s2, device, s1)?;
                }
                if let Some(strip) = (0..g.n()).find(|&s| g.mirror_device(seg, s) == device) {
                    self.resync_copy(g.data_device(seg, strip), s1, device, s2)?;
                }
            }
        }
        Ok(())
    }

    fn resync_copy(&self, src: usize, src_lba: u64, dst: usize, dst_lba: u64) -> Result<(), ArrayError> {
        match self.devices[src].stored_len(src_lba)? {
            Some(len) => {
                let b = self.resync_read(src, src_lba)?;
                self.resync_write(dst, dst_lba, &b, Some(SizeHint::Bytes(len)))
            }
            None => {
                self.devices[dst].trim(dst_lba..dst_lba + 1)?;
                Ok(())
            }
        }
    }

    fn resync_read(&self, dev: usize, lba: u64) -> Result<Block, ArrayError> {
        let b = self.devices[dev].read(lba)?;
        AmpCells::add(&self.cells.resync_reads, 1);
        Ok(b)
    }

    fn resync_write(&self, dev: usize, lba: u64, data: &Block, hint: Option<SizeHint>) -> Result<(), ArrayError> {
        self.devices[dev].write_hinted(lba, data, hint)?;
        AmpCells::add(&self.cells.resync_writes, 1);
        Ok(())
    }

    /// Writes the in-memory level bitmap to every online device under the
    /// next sequence number. The first complete replica is the commit point.
    pub(crate) fn persist_bitmap(&mut self) -> Result<(), ArrayError> {
        let seq = self.bitmap.seq() + 1;
        let blocks = self.bitmap.encode(seq);
        let base = (seq % 2) * self.geometry.bitmap_slot_blocks;
        for dev in self.devices.iter().filter(|d| d.is_online()) {
            for (i, b) in blocks.iter().enumerate() {
                dev.write(base + i as u64, b)?;
                AmpCells::add(&self.cells.metadata_writes, 1);
            }
        }
        self.bitmap.set_seq(seq);
        Ok(())
    }

    pub fn segment_ratios(&self, seg: u64) -> Result<SegmentRatios, ArrayError> {
        if seg >= self.geometry.segment_count {
            return Err(ArrayError::NoSuchSegment(seg));
        }
        let g = &self.geometry;
        let lba = g.slot_lba(seg, 0);
        let mut stored = 0u64;
        let mut known = false;
        for strip in 0..g.n() {
            let d = &self.devices[g.data_device(seg, strip)];
            if d.is_online() {
                known = true;
                stored += d.stored_len(lba)?.unwrap_or(0) as u64;
            }
        }
        let alpha_usr = (known && stored > 0).then(|| (g.n() * BLOCK_SIZE) as f64 / stored as f64);
        let alpha_pty = if self.bitmap.level(seg) == Level::R5 {
            let p = &self.devices[g.parity_device(seg)];
            match p.is_online().then(|| p.stored_len(lba)).transpose()?.flatten() {
                Some(len) => Some(BLOCK_SIZE as f64 / len as f64),
                None => None,
            }
        } else {
            None
        };
        Ok(SegmentRatios { alpha_usr, alpha_pty })
    }

    pub fn stats(&self) -> ArrayStats {
        let c = self.counters();
        let j = self.journal.counters();
        let flash = self.geometry.device_flash_bytes();
        ArrayStats {
            user_reads: c.user_reads,
            user_writes: c.user_writes,
            device_reads: c.device_reads,
            device_writes: c.device_writes,
            wa: c.wa(),
            ra: c.ra(),
            read_ra: c.read_ra(),
            write_ra: c.write_ra(),
            mode: self.mode(),
            segments: self.geometry.segment_count,
            raid10_segments: self.bitmap.raid10_count(),
            coverage: self.coverage(),
            user_capacity_bytes: self.geometry.user_capacity_bytes,
            counters: c,
            journal: JournalReport {
                rows: self.journal.rows(),
                occupied_rows: self.journal.occupied_rows(),
                pending_records: self.journal.pending_len(),
                record_writes: j.record_writes,
                parity_writes: j.parity_writes,
            },
            per_device: self
                .devices
                .iter()
                .map(|d| {
                    let s = d.stats();
                    DeviceReport {
                        id: d.id(),
                        state: d.state(),
                        physical_used_bytes: s.physical_used_bytes,
                        flash_capacity_bytes: flash,
                        utilization: s.physical_used_bytes as f64 / flash as f64,
                        logical_mapped_blocks: s.logical_mapped_blocks,
                        read_ops: s.read_ops,
                        write_ops: s.write_ops,
                        trim_ops: s.trim_ops,
                    }
                })
                .collect(),
        }
    }
}
