//! Bloated stripe allocation.
//!
//! Every device's logical space is split into three regions:
//!
//! ```text
//! [0, meta)                 two alternating level-bitmap replica slots
//! [meta, meta + 2S)         segment space: slot-1 at +2k, slot-2 at +2k+1
//! [meta + 2S, .. + rows)    write journal rows
//! ```
//!
//! A segment owns one strip position per device in each of its two slots.
//! In RAID 5 the stripe lives in slot-1 and slot-2 is trimmed. In RAID 10
//! slot-1 keeps copy A with the parity position trimmed, and slot-2 holds
//! copy B rotated by one device, so no device ever holds both copies of a
//! strip.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::czdev::{Block, BLOCK_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "raid5")]
    R5,
    #[serde(rename = "raid10")]
    R10,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayoutError {
    #[error("need at least 2 devices, got {0}")]
    TooFewDevices(usize),
    #[error("capacity too small for a single segment")]
    NoSegments,
    #[error("user lba {lba} out of range (capacity {capacity} blocks)")]
    OutOfRange { lba: u64, capacity: u64 },
    #[error("alpha_exp must be >= 1, got {0}")]
    BadExpansion(f64),
}

/// A block address on one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub device: usize,
    pub lba: u64,
}

/// Immutable array shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Total devices, `n + 1`.
    pub devices: usize,
    pub strip_size: usize,
    pub segment_count: u64,
    /// Formatted user capacity `alpha_exp * n * C_flash`, rounded down to whole stripes.
    pub user_capacity_bytes: u64,
    /// Per-device flash budget for segment space (C_flash).
    pub flash_capacity_bytes: u64,
    pub alpha_exp: f64,
    pub bitmap_slot_blocks: u64,
    pub journal_rows: u64,
}

impl ArrayGeometry {
    pub fn new(devices: usize, flash_capacity_bytes: u64, alpha_exp: f64, journal_rows: u64) -> Result<Self, LayoutError> {
        if devices < 2 {
            return Err(LayoutError::TooFewDevices(devices));
        }
        if !(alpha_exp >= 1.0) {
            return Err(LayoutError::BadExpansion(alpha_exp));
        }
        let segment_count = (alpha_exp * flash_capacity_bytes as f64 / BLOCK_SIZE as f64).floor() as u64;
        if segment_count == 0 {
            return Err(LayoutError::NoSegments);
        }
        let n = devices as u64 - 1;
        Ok(Self {
            devices,
            strip_size: BLOCK_SIZE,
            segment_count,
            user_capacity_bytes: segment_count * n * BLOCK_SIZE as u64,
            flash_capacity_bytes,
            alpha_exp,
            bitmap_slot_blocks: bitmap_slot_blocks(segment_count),
            journal_rows,
        })
    }

    /// Data strips per stripe.
    pub fn n(&self) -> usize {
        self.devices - 1
    }

    pub fn user_blocks(&self) -> u64 {
        self.segment_count * self.n() as u64
    }

    pub fn meta_blocks(&self) -> u64 {
        2 * self.bitmap_slot_blocks
    }

    pub fn segment_base(&self) -> u64 {
        self.meta_blocks()
    }

    pub fn journal_base(&self) -> u64 {
        self.segment_base() + 2 * self.segment_count
    }

    pub fn device_logical_blocks(&self) -> u64 {
        self.journal_base() + self.journal_rows
    }

    /// Physical bytes reserved on each device for metadata and journal, on top of C_flash.
    pub fn reserve_bytes(&self) -> u64 {
        (self.meta_blocks() + self.journal_rows) * BLOCK_SIZE as u64
    }

    pub fn device_flash_bytes(&self) -> u64 {
        self.flash_capacity_bytes + self.reserve_bytes()
    }

    /// Parity position of a segment's slot-1; rotates left-symmetrically.
    pub fn parity_device(&self, seg: u64) -> usize {
        let d = self.devices as u64;
        ((self.n() as u64 + d - seg % d) % d) as usize
    }

    /// Device holding copy A (the RAID 5 data position) of `strip`.
    pub fn data_device(&self, seg: u64, strip: usize) -> usize {
        (self.parity_device(seg) + 1 + strip) % self.devices
    }

    /// Device holding copy B of `strip` in RAID 10: copy A shifted by one.
    pub fn mirror_device(&self, seg: u64, strip: usize) -> usize {
        (self.data_device(seg, strip) + 1) % self.devices
    }

    /// Slot-2 position left unused in RAID 10.
    pub fn mirror_gap_device(&self, seg: u64) -> usize {
        (self.parity_device(seg) + 1) % self.devices
    }

    /// Device lba of `seg`'s slot (0 = slot-1, 1 = slot-2).
    pub fn slot_lba(&self, seg: u64, slot: u8) -> u64 {
        debug_assert!(slot < 2);
        self.segment_base() + 2 * seg + slot as u64
    }

    pub fn strip_of_device(&self, seg: u64, device: usize) -> Option<usize> {
        let p = self.parity_device(seg);
        if device == p {
            None
        } else {
            Some((device + self.devices - p - 1) % self.devices)
        }
    }

    pub fn split_user_lba(&self, user_lba: u64) -> Result<(u64, usize), LayoutError> {
        if user_lba >= self.user_blocks() {
            return Err(LayoutError::OutOfRange {
                lba: user_lba,
                capacity: self.user_blocks(),
            });
        }
        let n = self.n() as u64;
        Ok((user_lba / n, (user_lba % n) as usize))
    }

    /// Resolves a user block given the level of its segment.
    pub fn map_user_lba(&self, user_lba: u64, level: Level) -> Result<UserMapping, LayoutError> {
        let (seg, strip) = self.split_user_lba(user_lba)?;
        let primary = Location {
            device: self.data_device(seg, strip),
            lba: self.slot_lba(seg, 0),
        };
        let (mirror, parity) = match level {
            Level::R5 => (
                None,
                Some(Location {
                    device: self.parity_device(seg),
                    lba: self.slot_lba(seg, 0),
                }),
            ),
            Level::R10 => (
                Some(Location {
                    device: self.mirror_device(seg, strip),
                    lba: self.slot_lba(seg, 1),
                }),
                None,
            ),
        };
        Ok(UserMapping {
            seg,
            strip,
            level,
            primary,
            mirror,
            parity,
        })
    }

    /// Full placement of one segment at one level.
    pub fn segment_locations(&self, seg: u64, level: Level) -> SegmentPlan {
        let p = self.parity_device(seg);
        let mut slot1 = vec![Placement::Trimmed; self.devices];
        let mut slot2 = vec![Placement::Trimmed; self.devices];
        for strip in 0..self.n() {
            slot1[self.data_device(seg, strip)] = Placement::Data(strip);
        }
        match level {
            Level::R5 => slot1[p] = Placement::Parity,
            Level::R10 => {
                for strip in 0..self.n() {
                    slot2[self.mirror_device(seg, strip)] = Placement::Data(strip);
                }
            }
        }
        SegmentPlan {
            seg,
            level,
            parity_device: p,
            slot1_lba: self.slot_lba(seg, 0),
            slot2_lba: self.slot_lba(seg, 1),
            slot1,
            slot2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserMapping {
    pub seg: u64,
    pub strip: usize,
    pub level: Level,
    /// Copy A / RAID 5 data position.
    pub primary: Location,
    /// Copy B, RAID 10 only.
    pub mirror: Option<Location>,
    /// Parity strip, RAID 5 only.
    pub parity: Option<Location>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Data(usize),
    Parity,
    Trimmed,
}

/// Per-device content of both slots of a segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub seg: u64,
    pub level: Level,
    pub parity_device: usize,
    pub slot1_lba: u64,
    pub slot2_lba: u64,
    /// Indexed by device.
    pub slot1: Vec<Placement>,
    pub slot2: Vec<Placement>,
}

impl SegmentPlan {
    /// Positions that must be unmapped at this level, as (device, lba).
    pub fn trimmed(&self) -> impl Iterator<Item = Location> + '_ {
        let s1 = self.slot1.iter().enumerate().filter(|(_, p)| **p == Placement::Trimmed).map(|(d, _)| Location {
            device: d,
            lba: self.slot1_lba,
        });
        let s2 = self.slot2.iter().enumerate().filter(|(_, p)| **p == Placement::Trimmed).map(|(d, _)| Location {
            device: d,
            lba: self.slot2_lba,
        });
        s1.chain(s2)
    }

    pub fn used_positions(&self) -> usize {
        self.slot1.iter().chain(&self.slot2).filter(|p| **p != Placement::Trimmed).count()
    }
}

/// One bit per segment (0 = RAID 5, 1 = RAID 10) plus the sequence number
/// of the last persisted replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelBitmap {
    bits: BitVec<u64, Lsb0>,
    seq: u64,
}

impl LevelBitmap {
    pub fn new(segments: u64) -> Self {
        Self {
            bits: bitvec![u64, Lsb0; 0; segments as usize],
            seq: 0,
        }
    }

    pub fn len(&self) -> u64 {
        self.bits.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn level(&self, seg: u64) -> Level {
        if self.bits[seg as usize] {
            Level::R10
        } else {
            Level::R5
        }
    }

    pub fn set(&mut self, seg: u64, level: Level) {
        self.bits.set(seg as usize, level == Level::R10);
    }

    pub(crate) fn set_seq(&mut self, seq: u64) {
        self.seq = seq;
    }

    pub fn raid10_count(&self) -> u64 {
        self.bits.count_ones() as u64
    }

    pub fn raid10_segments(&self) -> impl Iterator<Item = u64> + '_ {
        self.bits.iter_ones().map(|i| i as u64)
    }

    /// Encodes the on-device replica record padded to whole blocks:
    /// `b"ERBM"`, version u16, reserved u16, seq u64, nbits u64, bits (LSB first), crc32.
    pub fn encode(&self, seq: u64) -> Vec<Block> {
        let mut raw = Vec::with_capacity(BITMAP_HEADER + self.bits.len() / 8 + 8);
        raw.extend_from_slice(BITMAP_MAGIC);
        raw.extend_from_slice(&BITMAP_VERSION.to_le_bytes());
        raw.extend_from_slice(&0u16.to_le_bytes());
        raw.extend_from_slice(&seq.to_le_bytes());
        raw.extend_from_slice(&(self.bits.len() as u64).to_le_bytes());
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for i in self.bits.iter_ones() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        raw.extend_from_slice(&bytes);
        let crc = crc32fast::hash(&raw);
        raw.extend_from_slice(&crc.to_le_bytes());
        let blocks = bitmap_slot_blocks(self.bits.len() as u64) as usize;
        raw.resize(blocks * BLOCK_SIZE, 0);
        raw.chunks_exact(BLOCK_SIZE)
            .map(|c| c.try_into().expect("exact chunk"))
            .collect()
    }

    /// Parses a replica; `None` when torn, foreign or of the wrong size.
    pub fn decode(blocks: &[Block], segments: u64) -> Option<Self> {
        let raw: Vec<u8> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
        if raw.len() < BITMAP_HEADER || &raw[0..4] != BITMAP_MAGIC {
            return None;
        }
        if u16::from_le_bytes([raw[4], raw[5]]) != BITMAP_VERSION {
            return None;
        }
        let seq = u64::from_le_bytes(raw[8..16].try_into().ok()?);
        let nbits = u64::from_le_bytes(raw[16..24].try_into().ok()?);
        if nbits != segments {
            return None;
        }
        let nbytes = (nbits as usize).div_ceil(8);
        let end = BITMAP_HEADER + nbytes;
        if raw.len() < end + 4 {
            return None;
        }
        let crc = u32::from_le_bytes(raw[end..end + 4].try_into().ok()?);
        if crc32fast::hash(&raw[..end]) != crc {
            return None;
        }
        let mut bits = bitvec![u64, Lsb0; 0; nbits as usize];
        for i in 0..nbits as usize {
            if raw[BITMAP_HEADER + i / 8] & (1 << (i % 8)) != 0 {
                bits.set(i, true);
            }
        }
        Some(Self { bits, seq })
    }
}

pub const BITMAP_MAGIC: &[u8; 4] = b"ERBM";
pub const BITMAP_VERSION: u16 = 1;
const BITMAP_HEADER: usize = 24;

fn bitmap_slot_blocks(segments: u64) -> u64 {
    let bytes = BITMAP_HEADER as u64 + segments.div_ceil(8) + 4;
    bytes.div_ceil(BLOCK_SIZE as u64)
}
