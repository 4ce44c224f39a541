//! In-place RAID level conversion of one segment.
//!
//! Promote (RAID 5 to RAID 10): read the data strips, write the skewed copy
//! into slot-2, flip and persist the level bit, trim the parity block.
//! Demote (RAID 10 to RAID 5): read copy A, compute parity, write it into
//! slot-1, flip and persist the level bit, trim slot-2.
//!
//! Nothing live is overwritten before the flip, so a crash at any point
//! leaves a segment that is valid at whichever level recovery adopts.

mod workers;

use serde::{Deserialize, Serialize};

use crate::czdev::{Block, SizeHint, BLOCK_SIZE};
use crate::iopath::counters::AmpCells;
use crate::iopath::stripe::parity_hint;
use crate::iopath::{ArrayError, ElasticArray};
use crate::layout::Level;
use crate::xor_into;

pub use workers::{
    run_conversion_workers, CostModel, DirectionReport, ProgressEvent, ThrottleConfig, TokenBucket, WorkerReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Promote,
    Demote,
}

impl Direction {
    pub fn target(self) -> Level {
        match self {
            Direction::Promote => Level::R10,
            Direction::Demote => Level::R5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Copying,
    Committed,
    Trimmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionTask {
    pub seg: u64,
    pub direction: Direction,
    pub state: TaskState,
}

impl ConversionTask {
    pub fn new(seg: u64, direction: Direction) -> Self {
        Self {
            seg,
            direction,
            state: TaskState::Pending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Write,
    Xor,
    Bitmap,
    Trim,
}

/// Operations of one step; all may run in parallel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: OpKind,
    /// Target device of each operation (for `Xor`, one entry per strip folded).
    pub devices: Vec<usize>,
}

/// What a completed conversion did to the devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionTrace {
    pub seg: u64,
    pub direction: Direction,
    pub phases: Vec<Phase>,
    /// User bytes covered by the segment.
    pub bytes: u64,
    /// Change of the segment's stored bytes summed over all devices.
    pub physical_delta: i64,
}

impl ElasticArray {
    fn segment_physical(&self, seg: u64) -> Result<i64, ArrayError> {
        let mut total = 0i64;
        for slot in 0..2 {
            let lba = self.geometry.slot_lba(seg, slot);
            for d in &self.devices {
                total += d.stored_len(lba)?.unwrap_or(0) as i64;
            }
        }
        Ok(total)
    }

    fn check_convertible(&self, seg: u64, from: Level) -> Result<(), ArrayError> {
        if seg >= self.geometry.segment_count {
            return Err(ArrayError::NoSuchSegment(seg));
        }
        if self.bitmap.level(seg) != from {
            return Err(ArrayError::WrongLevel {
                seg,
                level: self.bitmap.level(seg),
            });
        }
        if self.offline_device().is_some() {
            return Err(ArrayError::ConversionDegraded);
        }
        Ok(())
    }

    /// Physical bytes each device would gain (or lose) if `seg` were promoted.
    pub fn promote_delta(&self, seg: u64) -> Result<Vec<i64>, ArrayError> {
        let g = &self.geometry;
        let s1 = g.slot_lba(seg, 0);
        let mut delta = vec![0i64; g.devices];
        for strip in 0..g.n() {
            if let Some(len) = self.devices[g.data_device(seg, strip)].stored_len(s1)? {
                delta[g.mirror_device(seg, strip)] += len as i64;
            }
        }
        let p = g.parity_device(seg);
        delta[p] -= self.devices[p].stored_len(s1)?.unwrap_or(0) as i64;
        Ok(delta)
    }

    /// Largest growth of each device while `seg` is being promoted: copies
    /// land before the parity strip is trimmed.
    pub fn promote_peak(&self, seg: u64) -> Result<Vec<i64>, ArrayError> {
        let mut delta = self.promote_delta(seg)?;
        let p = self.geometry.parity_device(seg);
        delta[p] += self.devices[p].stored_len(self.geometry.slot_lba(seg, 0))?.unwrap_or(0) as i64;
        Ok(delta)
    }

    /// Best-effort removal of blocks written by an aborted conversion.
    fn abort_cleanup(&self, written: &[(usize, u64)]) {
        for &(d, lba) in written {
            let _ = self.devices[d].trim(lba..lba + 1);
        }
    }

    fn flip(&mut self, seg: u64, level: Level) -> Result<(), ArrayError> {
        let prev = self.bitmap.level(seg);
        self.bitmap.set(seg, level);
        if let Err(e) = self.persist_bitmap() {
            self.bitmap.set(seg, prev);
            return Err(e);
        }
        Ok(())
    }

    fn bitmap_phase(&self) -> Phase {
        let per = self.geometry.bitmap_slot_blocks as usize;
        Phase {
            kind: OpKind::Bitmap,
            devices: (0..self.geometry.devices).flat_map(|d| std::iter::repeat_n(d, per)).collect(),
        }
    }

    pub fn promote_segment(&mut self, seg: u64) -> Result<ConversionTrace, ArrayError> {
        let mut task = ConversionTask::new(seg, Direction::Promote);
        self.run_task(&mut task)
    }

    pub fn demote_segment(&mut self, seg: u64) -> Result<ConversionTrace, ArrayError> {
        let mut task = ConversionTask::new(seg, Direction::Demote);
        self.run_task(&mut task)
    }

    /// Drives a pending task to `Trimmed`, updating its state as it goes.
    pub fn run_task(&mut self, task: &mut ConversionTask) -> Result<ConversionTrace, ArrayError> {
        match task.direction {
            Direction::Promote => self.promote(task),
            Direction::Demote => self.demote(task),
        }
    }

    fn promote(&mut self, task: &mut ConversionTask) -> Result<ConversionTrace, ArrayError> {
        let seg = task.seg;
        self.check_convertible(seg, Level::R5)?;
        let before = self.segment_physical(seg)?;
        let g = self.geometry.clone();
        let s1 = g.slot_lba(seg, 0);
        let s2 = g.slot_lba(seg, 1);
        task.state = TaskState::Copying;
        let mut copies: Vec<(usize, Block, u32)> = Vec::with_capacity(g.n());
        let mut reads = Vec::new();
        for strip in 0..g.n() {
            let d = g.data_device(seg, strip);
            if let Some(len) = self.devices[d].stored_len(s1)? {
                let b = self.devices[d].read(s1)?;
                AmpCells::add(&self.cells.conversion_reads, 1);
                reads.push(d);
                copies.push((g.mirror_device(seg, strip), b, len));
            }
        }
        let mut written = Vec::new();
        for (dst, block, len) in &copies {
            if let Err(e) = self.devices[*dst].write_hinted(s2, block, Some(SizeHint::Bytes(*len))) {
                self.abort_cleanup(&written);
                return Err(e.into());
            }
            AmpCells::add(&self.cells.conversion_writes, 1);
            written.push((*dst, s2));
        }
        if let Err(e) = self.flip(seg, Level::R10) {
            self.abort_cleanup(&written);
            return Err(e);
        }
        task.state = TaskState::Committed;
        let p = g.parity_device(seg);
        self.devices[p].trim(s1..s1 + 1)?;
        AmpCells::add(&self.cells.conversion_trims, 1);
        task.state = TaskState::Trimmed;
        let after = self.segment_physical(seg)?;
        Ok(ConversionTrace {
            seg,
            direction: Direction::Promote,
            phases: vec![
                Phase {
                    kind: OpKind::Read,
                    devices: reads,
                },
                Phase {
                    kind: OpKind::Write,
                    devices: copies.iter().map(|c| c.0).collect(),
                },
                self.bitmap_phase(),
                Phase {
                    kind: OpKind::Trim,
                    devices: vec![p],
                },
            ],
            bytes: (g.n() * BLOCK_SIZE) as u64,
            physical_delta: after - before,
        })
    }

    fn demote(&mut self, task: &mut ConversionTask) -> Result<ConversionTrace, ArrayError> {
        let seg = task.seg;
        self.check_convertible(seg, Level::R10)?;
        let before = self.segment_physical(seg)?;
        let g = self.geometry.clone();
        let s1 = g.slot_lba(seg, 0);
        let s2 = g.slot_lba(seg, 1);
        task.state = TaskState::Copying;
        let mut parity = [0u8; BLOCK_SIZE];
        let mut reads = Vec::new();
        for strip in 0..g.n() {
            let d = g.data_device(seg, strip);
            if self.devices[d].is_mapped(s1) {
                let b = self.devices[d].read(s1)?;
                AmpCells::add(&self.cells.conversion_reads, 1);
                xor_into(&mut parity, &b);
                reads.push(d);
            }
        }
        let p = g.parity_device(seg);
        let mut written = Vec::new();
        if !reads.is_empty() {
            let hint = parity_hint(self.config.parity_ratio, &g, &self.devices, seg);
            self.devices[p].write_hinted(s1, &parity, hint)?;
            AmpCells::add(&self.cells.conversion_writes, 1);
            written.push((p, s1));
        }
        if let Err(e) = self.flip(seg, Level::R5) {
            self.abort_cleanup(&written);
            return Err(e);
        }
        task.state = TaskState::Committed;
        let mut trims = Vec::new();
        for strip in 0..g.n() {
            let d = g.mirror_device(seg, strip);
            self.devices[d].trim(s2..s2 + 1)?;
            AmpCells::add(&self.cells.conversion_trims, 1);
            trims.push(d);
        }
        task.state = TaskState::Trimmed;
        let after = self.segment_physical(seg)?;
        Ok(ConversionTrace {
            seg,
            direction: Direction::Demote,
            phases: vec![
                Phase {
                    kind: OpKind::Read,
                    devices: reads.clone(),
                },
                Phase {
                    kind: OpKind::Xor,
                    devices: reads,
                },
                Phase {
                    kind: OpKind::Write,
                    devices: written.iter().map(|w| w.0).collect(),
                },
                self.bitmap_phase(),
                Phase {
                    kind: OpKind::Trim,
                    devices: trims,
                },
            ],
            bytes: (g.n() * BLOCK_SIZE) as u64,
            physical_delta: after - before,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::czdev::CompressMode;
    use crate::iopath::{ArrayConfig, ParityRatio};
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(parity: ParityRatio) -> (ElasticArray, Vec<Block>) {
        let cfg = ArrayConfig {
            devices: 4,
            flash_capacity_bytes: 32 * 4096,
            alpha_exp: 1.0,
            journal_fraction: 0.0,
            compress_mode: CompressMode::modeled(2.0),
            parity_ratio: parity,
            ..ArrayConfig::default()
        };
        let mut a = ElasticArray::create(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Block> = (0..a.user_blocks())
            .map(|_| {
                let mut b = [0u8; BLOCK_SIZE];
                rng.fill_bytes(&mut b);
                b
            })
            .collect();
        for (lba, b) in data.iter().enumerate() {
            a.write(lba as u64, b).unwrap();
        }
        (a, data)
    }

    #[test]
    fn promote_copies_and_trims_parity() {
        let (mut a, data) = filled(ParityRatio::Natural);
        let t = a.promote_segment(3).unwrap();
        assert_eq!(a.level(3), Level::R10);
        assert_eq!(t.phases[0].devices.len(), 3);
        let g = a.geometry().clone();
        for strip in 0..3 {
            let ca = a.devices()[g.data_device(3, strip)].inspect(g.slot_lba(3, 0)).unwrap();
            let cb = a.devices()[g.mirror_device(3, strip)].inspect(g.slot_lba(3, 1)).unwrap();
            assert_eq!(ca, cb);
            assert_eq!(ca, data[9 + strip]);
        }
        assert!(!a.devices()[g.parity_device(3)].is_mapped(g.slot_lba(3, 0)));
        assert!(a.scrub().unwrap().is_clean());
        assert!(matches!(a.promote_segment(3), Err(ArrayError::WrongLevel { .. })));
    }

    #[test]
    fn round_trip_preserves_bytes_and_parity() {
        let (mut a, data) = filled(ParityRatio::Natural);
        for seg in 0..a.segment_count() {
            a.promote_segment(seg).unwrap();
        }
        for seg in 0..a.segment_count() {
            a.demote_segment(seg).unwrap();
        }
        assert!(a.scrub().unwrap().is_clean());
        for (lba, b) in data.iter().enumerate() {
            assert_eq!(&a.read(lba as u64).unwrap(), b);
        }
    }

    #[test]
    fn promote_physical_delta_matches_ratios() {
        let (mut a, _) = filled(ParityRatio::Fixed(1.25));
        let predicted: i64 = a.promote_delta(5).unwrap().iter().sum();
        let t = a.promote_segment(5).unwrap();
        // n * 4096/2.0 - ceil(4096/1.25)
        assert_eq!(t.physical_delta, 3 * 2048 - 3277);
        assert_eq!(predicted, t.physical_delta);
        let back = a.demote_segment(5).unwrap();
        assert_eq!(back.physical_delta, -t.physical_delta);
    }

    #[test]
    fn conversion_refused_when_degraded() {
        let (mut a, _) = filled(ParityRatio::Natural);
        a.set_offline(1).unwrap();
        assert!(matches!(a.promote_segment(0), Err(ArrayError::ConversionDegraded)));
    }

    #[test]
    fn task_state_reaches_trimmed() {
        let (mut a, _) = filled(ParityRatio::Natural);
        let mut t = ConversionTask::new(2, Direction::Promote);
        a.run_task(&mut t).unwrap();
        assert_eq!(t.state, TaskState::Trimmed);
        let mut t = ConversionTask::new(2, Direction::Demote);
        a.faults().arm(2);
        assert!(a.run_task(&mut t).is_err());
        assert!(t.state < TaskState::Committed);
    }
}
