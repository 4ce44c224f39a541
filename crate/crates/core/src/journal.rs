//! Append-only write journal striped over all devices with RAID 5 parity.
//!
//! The region occupies `rows` blocks at the tail of every device. A journal
//! row is one block per device: up to `n` record blocks plus one rotating
//! parity block, written once the row fills (or is sealed early, in which
//! case missing members count as zero blocks). Each block carries a 64-byte
//! out-of-band header:
//!
//! ```text
//! record (bytes 0..32):
//!   magic    u32  "JRNL"
//!   kind     u8   1 = record
//!   device   u8
//!   flags    u16  0
//!   seq      u64
//!   user_lba u64
//!   row      u32  low 32 bits of the absolute row number
//!   crc32    u32  over bytes 0..28 followed by the payload
//!   bytes 32..64 zero
//!
//! parity (bytes 0..32, then 32..64):
//!   magic    u32  "JRNL"
//!   kind     u8   2 = parity
//!   device   u8
//!   members  u16  bitmask of devices whose records are folded in
//!   row      u64  absolute row number
//!   reserved 8 bytes zero
//!   crc32    u32  over bytes 0..28 followed by the payload
//!   xor of the members' 32-byte record headers
//! ```
//!
//! Rows are freed strictly in order from the tail, so replay never sees a
//! record older than one that was already released.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::czdev::{Block, CompressingDevice, DeviceError, Oob, SizeHint, BLOCK_SIZE, OOB_SIZE};
use crate::xor_into;

pub const JOURNAL_MAGIC: &[u8; 4] = b"JRNL";
const KIND_RECORD: u8 = 1;
const KIND_PARITY: u8 = 2;
const HEADER: usize = 32;
/// The member bitmask is 16 bits wide.
pub const MAX_JOURNAL_DEVICES: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal full")]
    Full,
    #[error("journal disabled")]
    Disabled,
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone)]
pub struct JournalRecord {
    pub seq: u64,
    pub user_lba: u64,
    pub payload: Arc<Block>,
    pub hint: Option<SizeHint>,
    pub row: u64,
    pub device: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalCounters {
    pub record_writes: u64,
    pub parity_writes: u64,
    pub row_trims: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub torn: usize,
    pub reconstructed: usize,
    /// Records on an offline device whose row had no usable parity.
    pub unrecoverable_rows: usize,
}

#[derive(Debug)]
struct Row {
    abs: u64,
    parity_device: usize,
    /// Next candidate data position, as an offset after the parity device.
    cursor: usize,
    members: u16,
    member_headers: [u8; HEADER],
    xor: Box<Block>,
    outstanding: usize,
    sealed: bool,
    parity_written: bool,
}

impl Row {
    fn new(abs: u64, devices: usize) -> Self {
        Self {
            abs,
            parity_device: (abs % devices as u64) as usize,
            cursor: 0,
            members: 0,
            member_headers: [0; HEADER],
            xor: Box::new([0; BLOCK_SIZE]),
            outstanding: 0,
            sealed: false,
            parity_written: false,
        }
    }
}

#[derive(Debug)]
pub struct Journal {
    devices: usize,
    base_lba: u64,
    rows: u64,
    parity_hint: Option<SizeHint>,
    next_seq: u64,
    next_row: u64,
    ring: VecDeque<Row>,
    pending: BTreeMap<u64, JournalRecord>,
    index: HashMap<u64, u64>,
    counters: JournalCounters,
}

impl Journal {
    pub fn new(devices: usize, base_lba: u64, rows: u64, parity_hint: Option<SizeHint>) -> Self {
        assert!(devices <= MAX_JOURNAL_DEVICES, "journal supports at most 16 devices");
        Self {
            devices,
            base_lba,
            rows,
            parity_hint,
            next_seq: 1,
            next_row: 0,
            ring: VecDeque::new(),
            pending: BTreeMap::new(),
            index: HashMap::new(),
            counters: JournalCounters::default(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.rows > 0
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn capacity_records(&self) -> u64 {
        self.rows * (self.devices as u64 - 1)
    }

    pub fn counters(&self) -> JournalCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = JournalCounters::default();
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Oldest occupied row (absolute number), if any.
    pub fn tail_row(&self) -> Option<u64> {
        self.ring.front().map(|r| r.abs)
    }

    /// Newest occupied row (absolute number), if any.
    pub fn head_row(&self) -> Option<u64> {
        self.ring.back().map(|r| r.abs)
    }

    pub fn occupied_rows(&self) -> usize {
        self.ring.len()
    }

    /// Newest un-migrated payload for `user_lba`.
    pub fn lookup(&self, user_lba: u64) -> Option<&JournalRecord> {
        self.index.get(&user_lba).and_then(|seq| self.pending.get(seq))
    }

    pub fn newest_seq(&self, user_lba: u64) -> Option<u64> {
        self.index.get(&user_lba).copied()
    }

    fn row_lba(&self, abs: u64) -> u64 {
        self.base_lba + abs % self.rows
    }

    /// Makes the record durable in the journal region and indexes it.
    pub fn append(
        &mut self,
        devices: &[Arc<CompressingDevice>],
        user_lba: u64,
        payload: &Block,
        hint: Option<SizeHint>,
    ) -> Result<u64, JournalError> {
        if !self.enabled() {
            return Err(JournalError::Disabled);
        }
        loop {
            let need_row = self.ring.back().is_none_or(|r| r.sealed);
            if need_row {
                if self.ring.len() as u64 >= self.rows {
                    return Err(JournalError::Full);
                }
                let row = Row::new(self.next_row, self.devices);
                self.next_row += 1;
                self.ring.push_back(row);
            }
            let row = self.ring.back_mut().expect("row present");
            // Find the next online data position in this row.
            let mut slot = None;
            while row.cursor < self.devices - 1 {
                let dev = (row.parity_device + 1 + row.cursor) % self.devices;
                row.cursor += 1;
                if devices[dev].is_online() {
                    slot = Some(dev);
                    break;
                }
            }
            let Some(dev) = slot else {
                self.seal_back(devices)?;
                continue;
            };
            let abs = row.abs;
            let seq = self.next_seq;
            let oob = record_oob(dev, seq, user_lba, abs, payload);
            let lba = self.base_lba + abs % self.rows;
            match devices[dev].write_full(lba, payload, hint, Some(&oob)) {
                Ok(_) => {}
                Err(DeviceError::Offline { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
            self.next_seq += 1;
            self.counters.record_writes += 1;
            let row = self.ring.back_mut().expect("row present");
            xor_into(&mut row.xor, payload);
            for (a, b) in row.member_headers.iter_mut().zip(&oob[..HEADER]) {
                *a ^= b;
            }
            row.members |= 1 << dev;
            row.outstanding += 1;
            let full = row.cursor >= self.devices - 1;
            self.pending.insert(
                seq,
                JournalRecord {
                    seq,
                    user_lba,
                    payload: Arc::new(*payload),
                    hint,
                    row: abs,
                    device: dev,
                },
            );
            self.index.insert(user_lba, seq);
            if full {
                self.seal_back(devices)?;
            }
            return Ok(seq);
        }
    }

    /// Seals the open row early, writing parity over the records it holds.
    pub fn seal(&mut self, devices: &[Arc<CompressingDevice>]) -> Result<(), JournalError> {
        match self.ring.back() {
            Some(r) if !r.sealed && r.members != 0 => self.seal_back(devices),
            Some(r) if !r.sealed => {
                // Empty open row: nothing durable, just drop it.
                let _ = r;
                self.ring.pop_back();
                self.next_row -= 1;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn seal_back(&mut self, devices: &[Arc<CompressingDevice>]) -> Result<(), JournalError> {
        let lba = self.row_lba(self.ring.back().expect("row present").abs);
        let row = self.ring.back_mut().expect("row present");
        row.cursor = self.devices - 1;
        if row.members != 0 && devices[row.parity_device].is_online() {
            let oob = parity_oob(row.parity_device, row.members, row.abs, &row.xor, &row.member_headers);
            devices[row.parity_device].write_full(lba, &row.xor, self.parity_hint, Some(&oob))?;
            self.counters.parity_writes += 1;
            row.parity_written = true;
        }
        row.sealed = true;
        Ok(())
    }

    /// Up to `max` oldest records, superseded ones included.
    pub fn oldest(&self, max: usize) -> Vec<JournalRecord> {
        self.pending.values().take(max).cloned().collect()
    }

    pub fn all_pending(&self) -> Vec<JournalRecord> {
        self.pending.values().cloned().collect()
    }

    pub fn is_superseded(&self, rec: &JournalRecord) -> bool {
        self.index.get(&rec.user_lba) != Some(&rec.seq)
    }

    /// Marks a record as applied to its stripe (or skipped as superseded).
    pub fn complete(&mut self, seq: u64) {
        let Some(rec) = self.pending.remove(&seq) else {
            return;
        };
        if self.index.get(&rec.user_lba) == Some(&seq) {
            self.index.remove(&rec.user_lba);
        }
        if let Some(row) = self.ring.iter_mut().find(|r| r.abs == rec.row) {
            row.outstanding -= 1;
        }
    }

    /// Frees fully migrated sealed rows from the tail, trimming their blocks.
    pub fn reclaim(&mut self, devices: &[Arc<CompressingDevice>]) -> Result<usize, JournalError> {
        let mut freed = 0;
        while let Some(front) = self.ring.front() {
            if !front.sealed || front.outstanding > 0 {
                break;
            }
            let lba = self.row_lba(front.abs);
            for dev in devices.iter().filter(|d| d.is_online()) {
                dev.trim(lba..lba + 1)?;
            }
            self.counters.row_trims += 1;
            self.ring.pop_front();
            freed += 1;
        }
        Ok(freed)
    }

    /// Rebuilds the in-memory state from the journal region.
    ///
    /// Valid checksummed records are kept; torn ones are discarded. A record
    /// living on an offline device is rebuilt from its row parity when the
    /// other members are intact.
    pub fn replay(&mut self, devices: &[Arc<CompressingDevice>]) -> Result<ReplayReport, JournalError> {
        let mut report = ReplayReport::default();
        self.ring.clear();
        self.pending.clear();
        self.index.clear();
        if !self.enabled() {
            return Ok(report);
        }
        let mut found: Vec<(JournalRecordRaw, Block)> = Vec::new();
        for phys in 0..self.rows {
            let lba = self.base_lba + phys;
            let mut members: Vec<Option<(JournalRecordRaw, Block)>> = vec![None; self.devices];
            let mut parity: Option<(ParityRaw, Block)> = None;
            let mut offline = Vec::new();
            for (d, dev) in devices.iter().enumerate() {
                if !dev.is_online() {
                    offline.push(d);
                    continue;
                }
                let (payload, oob) = dev.read_with_oob(lba)?;
                let Some(oob) = oob else { continue };
                match parse_oob(&oob, &payload) {
                    Parsed::Record(mut r) => {
                        r.stored_len = dev.stored_len(lba)?;
                        members[d] = Some((r, payload));
                    }
                    Parsed::Parity(p) => parity = Some((p, payload)),
                    Parsed::Torn => report.torn += 1,
                    Parsed::Foreign => {}
                }
            }
            if let (Some(&missing), Some((par, ppay))) = (offline.first(), parity.as_ref()) {
                if par.members & (1 << missing) != 0 {
                    let mut block = *ppay;
                    let mut header = par.member_headers;
                    let mut ok = true;
                    for d in 0..self.devices {
                        if d == missing || par.members & (1 << d) == 0 {
                            continue;
                        }
                        match &members[d] {
                            Some((r, pay)) if r.row32 == par.row as u32 => {
                                xor_into(&mut block, pay);
                                for (a, b) in header.iter_mut().zip(&r.header) {
                                    *a ^= b;
                                }
                            }
                            _ => ok = false,
                        }
                    }
                    let mut oob = [0u8; OOB_SIZE];
                    oob[..HEADER].copy_from_slice(&header);
                    match (ok, parse_oob(&oob, &block)) {
                        (true, Parsed::Record(r)) => {
                            report.reconstructed += 1;
                            members[missing] = Some((r, block));
                        }
                        _ => report.unrecoverable_rows += 1,
                    }
                } else if offline.len() > 1 {
                    report.unrecoverable_rows += 1;
                }
            }
            found.extend(members.into_iter().flatten());
        }
        found.sort_by_key(|(r, _)| r.seq);
        let max_row = found.iter().map(|(r, _)| r.row_abs(self.rows, self.next_row)).max();
        let min_row = found.iter().map(|(r, _)| r.row_abs(self.rows, self.next_row)).min();
        if let (Some(lo), Some(hi)) = (min_row, max_row) {
            for abs in lo..=hi {
                let mut row = Row::new(abs, self.devices);
                row.sealed = true;
                row.cursor = self.devices - 1;
                self.ring.push_back(row);
            }
            self.next_row = hi + 1;
        }
        for (raw, payload) in found {
            let abs = raw.row_abs(self.rows, self.next_row);
            if let Some(row) = self.ring.iter_mut().find(|r| r.abs == abs) {
                row.outstanding += 1;
            }
            self.next_seq = self.next_seq.max(raw.seq + 1);
            self.index.insert(raw.user_lba, raw.seq);
            self.pending.insert(
                raw.seq,
                JournalRecord {
                    seq: raw.seq,
                    user_lba: raw.user_lba,
                    payload: Arc::new(payload),
                    hint: raw.stored_len.map(SizeHint::Bytes),
                    row: abs,
                    device: raw.device,
                },
            );
            report.records += 1;
        }
        Ok(report)
    }

    /// Trims the journal blocks of a device that was offline, except the
    /// ones it still legitimately holds for occupied rows.
    pub fn resync_device(&mut self, devices: &[Arc<CompressingDevice>], device: usize) -> Result<(), JournalError> {
        if !self.enabled() {
            return Ok(());
        }
        for phys in 0..self.rows {
            let keep = self.ring.iter().any(|r| {
                r.abs % self.rows == phys
                    && (r.members & (1 << device) != 0 || (r.parity_device == device && r.parity_written))
            });
            if !keep {
                let lba = self.base_lba + phys;
                devices[device].trim(lba..lba + 1)?;
            }
        }
        Ok(())
    }

    /// Trims the whole region and forgets everything. Used after a full
    /// migration during recovery, when the ring may hold rows of unknown state.
    pub fn reset_region(&mut self, devices: &[Arc<CompressingDevice>]) -> Result<(), JournalError> {
        if self.enabled() {
            for dev in devices.iter().filter(|d| d.is_online()) {
                dev.trim(self.base_lba..self.base_lba + self.rows)?;
            }
        }
        self.ring.clear();
        self.pending.clear();
        self.index.clear();
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct JournalRecordRaw {
    header: [u8; HEADER],
    device: usize,
    seq: u64,
    user_lba: u64,
    row32: u32,
    stored_len: Option<u32>,
}

impl JournalRecordRaw {
    /// Widens the stored 32-bit row number using the nearest absolute row
    /// not beyond `hint`.
    fn row_abs(&self, rows: u64, hint: u64) -> u64 {
        let _ = rows;
        let hi = hint >> 32;
        let cand = (hi << 32) | self.row32 as u64;
        if cand > hint + (1 << 31) && hi > 0 {
            ((hi - 1) << 32) | self.row32 as u64
        } else {
            cand
        }
    }
}

#[derive(Debug, Clone)]
struct ParityRaw {
    members: u16,
    row: u64,
    member_headers: [u8; HEADER],
}

enum Parsed {
    Record(JournalRecordRaw),
    Parity(ParityRaw),
    Torn,
    Foreign,
}

fn header_crc(header: &[u8], payload: &Block) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&header[..28]);
    h.update(payload);
    h.finalize()
}

fn record_oob(device: usize, seq: u64, user_lba: u64, row: u64, payload: &Block) -> Oob {
    let mut oob = [0u8; OOB_SIZE];
    oob[0..4].copy_from_slice(JOURNAL_MAGIC);
    oob[4] = KIND_RECORD;
    oob[5] = device as u8;
    oob[8..16].copy_from_slice(&seq.to_le_bytes());
    oob[16..24].copy_from_slice(&user_lba.to_le_bytes());
    oob[24..28].copy_from_slice(&(row as u32).to_le_bytes());
    let crc = header_crc(&oob, payload);
    oob[28..32].copy_from_slice(&crc.to_le_bytes());
    oob
}

fn parity_oob(device: usize, members: u16, row: u64, payload: &Block, member_headers: &[u8; HEADER]) -> Oob {
    let mut oob = [0u8; OOB_SIZE];
    oob[0..4].copy_from_slice(JOURNAL_MAGIC);
    oob[4] = KIND_PARITY;
    oob[5] = device as u8;
    oob[6..8].copy_from_slice(&members.to_le_bytes());
    oob[8..16].copy_from_slice(&row.to_le_bytes());
    let crc = header_crc(&oob, payload);
    oob[28..32].copy_from_slice(&crc.to_le_bytes());
    oob[HEADER..2 * HEADER].copy_from_slice(member_headers);
    oob
}

fn parse_oob(oob: &Oob, payload: &Block) -> Parsed {
    if &oob[0..4] != JOURNAL_MAGIC {
        return Parsed::Foreign;
    }
    let crc = u32::from_le_bytes(oob[28..32].try_into().expect("4 bytes"));
    if header_crc(oob, payload) != crc {
        return Parsed::Torn;
    }
    match oob[4] {
        KIND_RECORD => {
            let mut header = [0u8; HEADER];
            header.copy_from_slice(&oob[..HEADER]);
            Parsed::Record(JournalRecordRaw {
                header,
                device: oob[5] as usize,
                seq: u64::from_le_bytes(oob[8..16].try_into().expect("8 bytes")),
                user_lba: u64::from_le_bytes(oob[16..24].try_into().expect("8 bytes")),
                row32: u32::from_le_bytes(oob[24..28].try_into().expect("4 bytes")),
                stored_len: None,
            })
        }
        KIND_PARITY => {
            let mut member_headers = [0u8; HEADER];
            member_headers.copy_from_slice(&oob[HEADER..2 * HEADER]);
            Parsed::Parity(ParityRaw {
                members: u16::from_le_bytes([oob[6], oob[7]]),
                row: u64::from_le_bytes(oob[8..16].try_into().expect("8 bytes")),
                member_headers,
            })
        }
        _ => Parsed::Foreign,
    }
}
