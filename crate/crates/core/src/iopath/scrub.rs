use serde::{Deserialize, Serialize};

use super::{ArrayError, ElasticArray};
use crate::czdev::BLOCK_SIZE;
use crate::layout::{Level, Location};
use crate::xor_into;

/// Result of a read-only consistency pass over every segment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub segments_checked: u64,
    /// Segments whose redundancy could not be verified because a member is offline.
    pub skipped_degraded: u64,
    pub parity_mismatches: Vec<u64>,
    pub mirror_mismatches: Vec<u64>,
    /// Mapped blocks at positions the segment's level leaves trimmed.
    pub stray_blocks: Vec<Location>,
}

impl ScrubReport {
    pub fn is_clean(&self) -> bool {
        self.parity_mismatches.is_empty() && self.mirror_mismatches.is_empty() && self.stray_blocks.is_empty()
    }
}

impl ElasticArray {
    /// Checks parity, mirror agreement and trimmed positions. Uses uncounted
    /// reads and mutates nothing.
    pub fn scrub(&self) -> Result<ScrubReport, ArrayError> {
        let g = &self.geometry;
        let mut rep = ScrubReport::default();
        let online: Vec<bool> = self.devices.iter().map(|d| d.is_online()).collect();
        for seg in 0..g.segment_count {
            rep.segments_checked += 1;
            let level = self.bitmap.level(seg);
            let plan = g.segment_locations(seg, level);
            for loc in plan.trimmed() {
                if online[loc.device] && self.devices[loc.device].is_mapped(loc.lba) {
                    rep.stray_blocks.push(loc);
                }
            }
            let s1 = g.slot_lba(seg, 0);
            match level {
                Level::R5 => {
                    if online.iter().any(|o| !o) {
                        rep.skipped_degraded += 1;
                        continue;
                    }
                    let mut acc = [0u8; BLOCK_SIZE];
                    for dev in &self.devices {
                        xor_into(&mut acc, &dev.inspect(s1)?);
                    }
                    if acc.iter().any(|&b| b != 0) {
                        rep.parity_mismatches.push(seg);
                    }
                }
                Level::R10 => {
                    let s2 = g.slot_lba(seg, 1);
                    let mut skipped = false;
                    for strip in 0..g.n() {
                        let a = g.data_device(seg, strip);
                        let b = g.mirror_device(seg, strip);
                        if !online[a] || !online[b] {
                            skipped = true;
                            continue;
                        }
                        if self.devices[a].inspect(s1)? != self.devices[b].inspect(s2)? {
                            rep.mirror_mismatches.push(seg);
                            break;
                        }
                    }
                    if skipped {
                        rep.skipped_degraded += 1;
                    }
                }
            }
        }
        Ok(rep)
    }
}
