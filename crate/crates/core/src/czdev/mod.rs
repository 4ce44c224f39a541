//! Simulated SSD with built-in per-4KB transparent compression.
//!
//! The device advertises a logical block space larger than its flash
//! budget. Every write is compressed on the way in and charged to the
//! physical usage counter at its compressed length; trims release that
//! charge. Writing past the flash budget fails before usage is exceeded.

mod compressor;
mod image;

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::fault::FaultInjector;

pub use compressor::{
    CompressMode, Compressor, CompressorParams, CompressorRegistry, DeflateCompressor, ModeledCompressor,
    SizeHint,
};
pub use image::{load_image, save_image, IMAGE_MAGIC, IMAGE_VERSION};

pub const BLOCK_SIZE: usize = 4096;
/// Per-block out-of-band metadata, as in NVMe extended LBA formats.
pub const OOB_SIZE: usize = 64;

pub type Block = [u8; BLOCK_SIZE];
pub type Oob = [u8; OOB_SIZE];

pub const ZERO_BLOCK: Block = [0u8; BLOCK_SIZE];

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("device {device}: out of physical space ({needed} bytes needed, {capacity} available)")]
    OutOfSpace { device: usize, needed: u64, capacity: u64 },
    #[error("device {device} is offline")]
    Offline { device: usize },
    #[error("device {device}: lba {lba} beyond logical capacity {capacity}")]
    LbaOutOfRange { device: usize, lba: u64, capacity: u64 },
    #[error("no mapped blocks in range")]
    EmptyRange,
    #[error("simulated crash")]
    Crashed,
    #[error("unknown compressor {0:?}")]
    UnknownCompressor(String),
    #[error("bad device image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    /// Physical NAND budget in bytes.
    pub flash_capacity_bytes: u64,
    /// Advertised logical space in 4KB blocks.
    pub logical_blocks: u64,
    pub compress_mode: CompressMode,
}

impl DeviceConfig {
    /// Logical space = `flash * expansion_factor`, rounded down to whole blocks.
    pub fn with_expansion(flash_capacity_bytes: u64, expansion_factor: f64, compress_mode: CompressMode) -> Self {
        let logical = (flash_capacity_bytes as f64 * expansion_factor.max(1.0)) as u64;
        Self {
            flash_capacity_bytes,
            logical_blocks: logical / BLOCK_SIZE as u64,
            compress_mode,
        }
    }

    pub fn logical_capacity_bytes(&self) -> u64 {
        self.logical_blocks * BLOCK_SIZE as u64
    }

    pub fn expansion_factor(&self) -> f64 {
        self.logical_capacity_bytes() as f64 / self.flash_capacity_bytes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceState {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceStats {
    /// Sum of stored lengths over mapped blocks.
    pub physical_used_bytes: u64,
    pub logical_mapped_blocks: u64,
    pub read_ops: u64,
    pub write_ops: u64,
    pub trim_ops: u64,
}

/// A mapped logical block.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub stored_len: u32,
    pub payload: Box<Block>,
    pub oob: Option<Box<Oob>>,
}

#[derive(Debug, Default)]
struct Store {
    blocks: HashMap<u64, BlockRecord>,
    physical_used: u64,
}

#[derive(Debug)]
pub struct CompressingDevice {
    id: usize,
    config: DeviceConfig,
    compressor: Arc<dyn Compressor>,
    store: Mutex<Store>,
    online: AtomicBool,
    read_ops: AtomicU64,
    write_ops: AtomicU64,
    trim_ops: AtomicU64,
    inflight: AtomicU64,
    faults: Option<Arc<FaultInjector>>,
}

impl CompressingDevice {
    pub fn new(id: usize, config: DeviceConfig) -> Result<Self, DeviceError> {
        Self::with_registry(id, config, &CompressorRegistry::builtin())
    }

    pub fn with_registry(id: usize, config: DeviceConfig, registry: &CompressorRegistry) -> Result<Self, DeviceError> {
        let compressor = registry
            .create(&config.compress_mode)
            .ok_or_else(|| DeviceError::UnknownCompressor(config.compress_mode.name.clone()))?;
        Ok(Self {
            id,
            config,
            compressor,
            store: Mutex::new(Store::default()),
            online: AtomicBool::new(true),
            read_ops: AtomicU64::new(0),
            write_ops: AtomicU64::new(0),
            trim_ops: AtomicU64::new(0),
            inflight: AtomicU64::new(0),
            faults: None,
        })
    }

    pub fn attach_faults(&mut self, faults: Arc<FaultInjector>) {
        self.faults = Some(faults);
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn compressor(&self) -> &Arc<dyn Compressor> {
        &self.compressor
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::Acquire)
    }

    pub fn set_state(&self, state: DeviceState) {
        self.online.store(state == DeviceState::Online, Ordering::Release);
    }

    pub fn state(&self) -> DeviceState {
        if self.is_online() {
            DeviceState::Online
        } else {
            DeviceState::Offline
        }
    }

    fn check_online(&self) -> Result<(), DeviceError> {
        if self.is_online() {
            Ok(())
        } else {
            Err(DeviceError::Offline { device: self.id })
        }
    }

    fn check_lba(&self, lba: u64) -> Result<(), DeviceError> {
        if lba < self.config.logical_blocks {
            Ok(())
        } else {
            Err(DeviceError::LbaOutOfRange {
                device: self.id,
                lba,
                capacity: self.config.logical_blocks,
            })
        }
    }

    fn admit_mutation(&self) -> Result<(), DeviceError> {
        match &self.faults {
            Some(f) => f.admit(),
            None => Ok(()),
        }
    }

    /// Compresses and stores `data` at `lba`; returns the stored length.
    pub fn write(&self, lba: u64, data: &Block) -> Result<u32, DeviceError> {
        self.write_full(lba, data, None, None)
    }

    pub fn write_hinted(&self, lba: u64, data: &Block, hint: Option<SizeHint>) -> Result<u32, DeviceError> {
        self.write_full(lba, data, hint, None)
    }

    /// Write with a size hint and out-of-band metadata.
    pub fn write_full(
        &self,
        lba: u64,
        data: &Block,
        hint: Option<SizeHint>,
        oob: Option<&Oob>,
    ) -> Result<u32, DeviceError> {
        self.check_online()?;
        self.check_lba(lba)?;
        let stored_len = self.compressor.stored_len(data, hint);
        let mut store = self.store.lock();
        let old = store.blocks.get(&lba).map_or(0, |r| r.stored_len as u64);
        let new_used = store.physical_used - old + stored_len as u64;
        if new_used > self.config.flash_capacity_bytes {
            return Err(DeviceError::OutOfSpace {
                device: self.id,
                needed: stored_len as u64,
                capacity: self.config.flash_capacity_bytes - (store.physical_used - old),
            });
        }
        self.admit_mutation()?;
        store.physical_used = new_used;
        store.blocks.insert(
            lba,
            BlockRecord {
                stored_len,
                payload: Box::new(*data),
                oob: oob.map(|o| Box::new(*o)),
            },
        );
        self.write_ops.fetch_add(1, Ordering::Relaxed);
        Ok(stored_len)
    }

    /// Returns the last written content, or zeros for an unmapped block.
    pub fn read(&self, lba: u64) -> Result<Block, DeviceError> {
        self.check_online()?;
        self.check_lba(lba)?;
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        let store = self.store.lock();
        Ok(store.blocks.get(&lba).map_or(ZERO_BLOCK, |r| *r.payload))
    }

    pub fn read_with_oob(&self, lba: u64) -> Result<(Block, Option<Oob>), DeviceError> {
        self.check_online()?;
        self.check_lba(lba)?;
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        let store = self.store.lock();
        Ok(store
            .blocks
            .get(&lba)
            .map_or((ZERO_BLOCK, None), |r| (*r.payload, r.oob.as_deref().copied())))
    }

    /// Uncounted read used by scrub and verification. Respects offline state.
    pub fn inspect(&self, lba: u64) -> Result<Block, DeviceError> {
        self.check_online()?;
        self.check_lba(lba)?;
        let store = self.store.lock();
        Ok(store.blocks.get(&lba).map_or(ZERO_BLOCK, |r| *r.payload))
    }

    /// Unmaps every block in `range`; returns the physical bytes released.
    pub fn trim(&self, range: Range<u64>) -> Result<u64, DeviceError> {
        self.check_online()?;
        if range.end > self.config.logical_blocks {
            return Err(DeviceError::LbaOutOfRange {
                device: self.id,
                lba: range.end.saturating_sub(1),
                capacity: self.config.logical_blocks,
            });
        }
        let mut store = self.store.lock();
        let mapped = range.clone().any(|lba| store.blocks.contains_key(&lba));
        if !mapped {
            self.trim_ops.fetch_add(1, Ordering::Relaxed);
            return Ok(0);
        }
        self.admit_mutation()?;
        let mut freed = 0u64;
        for lba in range {
            if let Some(r) = store.blocks.remove(&lba) {
                freed += r.stored_len as u64;
            }
        }
        store.physical_used -= freed;
        self.trim_ops.fetch_add(1, Ordering::Relaxed);
        Ok(freed)
    }

    /// `(mapped * 4096) / sum(stored_len)` over mapped blocks in `range`.
    pub fn query_ratio(&self, range: Range<u64>) -> Result<f64, DeviceError> {
        self.check_online()?;
        let store = self.store.lock();
        let (count, stored) = range
            .filter_map(|lba| store.blocks.get(&lba))
            .fold((0u64, 0u64), |(c, s), r| (c + 1, s + r.stored_len as u64));
        if count == 0 {
            return Err(DeviceError::EmptyRange);
        }
        Ok((count * BLOCK_SIZE as u64) as f64 / stored as f64)
    }

    /// Stored length of one block, `None` when unmapped.
    pub fn stored_len(&self, lba: u64) -> Result<Option<u32>, DeviceError> {
        self.check_online()?;
        Ok(self.store.lock().blocks.get(&lba).map(|r| r.stored_len))
    }

    pub fn is_mapped(&self, lba: u64) -> bool {
        self.store.lock().blocks.contains_key(&lba)
    }

    pub fn physical_used(&self) -> u64 {
        self.store.lock().physical_used
    }

    /// Physical usage recomputed from scratch by scanning every mapped block.
    pub fn recompute_physical_used(&self) -> u64 {
        self.store.lock().blocks.values().map(|r| r.stored_len as u64).sum()
    }

    pub fn stats(&self) -> DeviceStats {
        let store = self.store.lock();
        DeviceStats {
            physical_used_bytes: store.physical_used,
            logical_mapped_blocks: store.blocks.len() as u64,
            read_ops: self.read_ops.load(Ordering::Relaxed),
            write_ops: self.write_ops.load(Ordering::Relaxed),
            trim_ops: self.trim_ops.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        self.read_ops.store(0, Ordering::Relaxed);
        self.write_ops.store(0, Ordering::Relaxed);
        self.trim_ops.store(0, Ordering::Relaxed);
    }

    /// Operations currently in flight, used by mirror read balancing.
    pub fn inflight(&self) -> u64 {
        self.inflight.load(Ordering::Relaxed)
    }

    /// Marks one operation in flight until the guard drops.
    pub fn begin_op(&self) -> InflightGuard<'_> {
        self.inflight.fetch_add(1, Ordering::Relaxed);
        InflightGuard { dev: self }
    }

    /// Flips one bit of a stored payload without touching its stored length.
    /// Models media corruption or a torn write in tests.
    pub fn corrupt(&self, lba: u64, byte: usize) -> bool {
        let mut store = self.store.lock();
        match store.blocks.get_mut(&lba) {
            Some(r) => {
                r.payload[byte % BLOCK_SIZE] ^= 0x01;
                true
            }
            None => false,
        }
    }

    pub(crate) fn snapshot_records(&self) -> Vec<(u64, BlockRecord)> {
        let store = self.store.lock();
        let mut recs: Vec<_> = store.blocks.iter().map(|(l, r)| (*l, r.clone())).collect();
        recs.sort_by_key(|(l, _)| *l);
        recs
    }

    pub(crate) fn install_record(&self, lba: u64, rec: BlockRecord) {
        let mut store = self.store.lock();
        store.physical_used += rec.stored_len as u64;
        if let Some(old) = store.blocks.insert(lba, rec) {
            store.physical_used -= old.stored_len as u64;
        }
    }
}

pub struct InflightGuard<'a> {
    dev: &'a CompressingDevice,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.dev.inflight.fetch_sub(1, Ordering::Relaxed);
    }
}
