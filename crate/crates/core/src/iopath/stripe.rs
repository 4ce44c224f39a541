//! Applying one block update to its stripe.

use std::sync::Arc;

use crate::czdev::{Block, CompressingDevice, SizeHint, BLOCK_SIZE};
use crate::iopath::counters::AmpCells;
use crate::iopath::{ArrayError, ParityRatio};
use crate::layout::{ArrayGeometry, Level, LevelBitmap};
use crate::xor_into;

/// Read-only view of the array used by migration workers.
pub(crate) struct StripeIo<'a> {
    pub geometry: &'a ArrayGeometry,
    pub devices: &'a [Arc<CompressingDevice>],
    pub bitmap: &'a LevelBitmap,
    pub cells: &'a AmpCells,
    pub parity: ParityRatio,
}

impl StripeIo<'_> {
    /// Writes `payload` into the stripe of `user_lba`. Returns `true` when a
    /// copy or parity had to be skipped because its device is offline.
    pub fn update(&self, user_lba: u64, payload: &Block, hint: Option<SizeHint>) -> Result<bool, ArrayError> {
        let (seg, _) = self.geometry.split_user_lba(user_lba)?;
        let level = self.bitmap.level(seg);
        let m = self.geometry.map_user_lba(user_lba, level)?;
        let online = |d: usize| self.devices[d].is_online();
        match level {
            Level::R5 => {
                let p = m.parity.expect("raid5 parity");
                match (online(m.primary.device), online(p.device)) {
                    (true, true) => {
                        let old = self.read(m.primary.device, m.primary.lba)?;
                        let mut par = self.read(p.device, p.lba)?;
                        xor_into(&mut par, &old);
                        xor_into(&mut par, payload);
                        self.write(m.primary.device, m.primary.lba, payload, hint)?;
                        let ph = self.parity_hint(seg);
                        self.write(p.device, p.lba, &par, ph)?;
                        Ok(false)
                    }
                    (false, true) => {
                        // Reconstruct-write: new parity from the surviving data strips.
                        let mut par = *payload;
                        for strip in 0..self.geometry.n() {
                            let d = self.geometry.data_device(seg, strip);
                            if d != m.primary.device {
                                let b = self.read(d, m.primary.lba)?;
                                xor_into(&mut par, &b);
                            }
                        }
                        let ph = self.parity_hint(seg);
                        self.write(p.device, p.lba, &par, ph)?;
                        Ok(true)
                    }
                    (true, false) => {
                        self.write(m.primary.device, m.primary.lba, payload, hint)?;
                        Ok(true)
                    }
                    (false, false) => Err(ArrayError::DataLoss),
                }
            }
            Level::R10 => {
                let b = m.mirror.expect("raid10 mirror");
                let mut skipped = false;
                let mut wrote = false;
                for loc in [m.primary, b] {
                    if online(loc.device) {
                        self.write(loc.device, loc.lba, payload, hint)?;
                        wrote = true;
                    } else {
                        skipped = true;
                    }
                }
                if !wrote {
                    return Err(ArrayError::DataLoss);
                }
                Ok(skipped)
            }
        }
    }

    fn read(&self, dev: usize, lba: u64) -> Result<Block, ArrayError> {
        let _g = self.devices[dev].begin_op();
        let b = self.devices[dev].read(lba)?;
        AmpCells::add(&self.cells.write_path_reads, 1);
        Ok(b)
    }

    fn write(&self, dev: usize, lba: u64, data: &Block, hint: Option<SizeHint>) -> Result<(), ArrayError> {
        let _g = self.devices[dev].begin_op();
        self.devices[dev].write_hinted(lba, data, hint)?;
        AmpCells::add(&self.cells.stripe_writes, 1);
        Ok(())
    }

    pub fn parity_hint(&self, seg: u64) -> Option<SizeHint> {
        parity_hint(self.parity, self.geometry, self.devices, seg)
    }
}

/// Size hint for a segment's parity block under the configured policy.
pub(crate) fn parity_hint(
    policy: ParityRatio,
    geometry: &ArrayGeometry,
    devices: &[Arc<CompressingDevice>],
    seg: u64,
) -> Option<SizeHint> {
    match policy {
        ParityRatio::Natural => None,
        ParityRatio::Fixed(r) => Some(SizeHint::Ratio(r)),
        ParityRatio::Linked => {
            let lba = geometry.slot_lba(seg, 0);
            let mut stored = 0u64;
            for strip in 0..geometry.n() {
                let d = geometry.data_device(seg, strip);
                if let Ok(Some(len)) = devices[d].stored_len(lba) {
                    stored += len as u64;
                }
            }
            if stored == 0 {
                return None;
            }
            let alpha_usr = (geometry.n() * BLOCK_SIZE) as f64 / stored as f64;
            Some(SizeHint::Ratio(1.0 + (alpha_usr - 1.0) / 4.0))
        }
    }
}
