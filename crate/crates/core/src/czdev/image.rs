//! Device image files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8  b"ERDVIMG\0"
//! version          u32
//! device_id        u32
//! flash_capacity   u64
//! logical_blocks   u64
//! block_size       u32   (always 4096)
//! online           u8
//! name_len         u16
//! name             name_len bytes (compressor name, UTF-8)
//! deflate_level    u32
//! modeled_ratio    f64
//! record_count     u64
//! record_count x { lba u64, stored_len u32, has_oob u8, payload [4096], oob [64] if has_oob }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    BlockRecord, CompressMode, CompressingDevice, CompressorParams, DeviceConfig, DeviceError, DeviceState,
    BLOCK_SIZE, OOB_SIZE,
};

pub const IMAGE_MAGIC: &[u8; 8] = b"ERDVIMG\0";
pub const IMAGE_VERSION: u32 = 1;

pub fn save_image(dev: &CompressingDevice, path: &Path) -> Result<(), DeviceError> {
    let mut w = BufWriter::new(File::create(path)?);
    let cfg = dev.config();
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&IMAGE_VERSION.to_le_bytes())?;
    w.write_all(&(dev.id() as u32).to_le_bytes())?;
    w.write_all(&cfg.flash_capacity_bytes.to_le_bytes())?;
    w.write_all(&cfg.logical_blocks.to_le_bytes())?;
    w.write_all(&(BLOCK_SIZE as u32).to_le_bytes())?;
    w.write_all(&[dev.is_online() as u8])?;
    let name = cfg.compress_mode.name.as_bytes();
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&cfg.compress_mode.params.deflate_level.to_le_bytes())?;
    w.write_all(&cfg.compress_mode.params.modeled_default_ratio.to_le_bytes())?;
    let records = dev.snapshot_records();
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (lba, rec) in &records {
        w.write_all(&lba.to_le_bytes())?;
        w.write_all(&rec.stored_len.to_le_bytes())?;
        w.write_all(&[rec.oob.is_some() as u8])?;
        w.write_all(&rec.payload[..])?;
        if let Some(oob) = &rec.oob {
            w.write_all(&oob[..])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DeviceError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load_image(path: &Path) -> Result<CompressingDevice, DeviceError> {
    let mut r = BufReader::new(File::open(path)?);
    if &take::<8>(&mut r)? != IMAGE_MAGIC {
        return Err(DeviceError::BadImage("magic mismatch".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != IMAGE_VERSION {
        return Err(DeviceError::BadImage(format!("unsupported version {version}")));
    }
    let id = u32::from_le_bytes(take(&mut r)?) as usize;
    let flash_capacity_bytes = u64::from_le_bytes(take(&mut r)?);
    let logical_blocks = u64::from_le_bytes(take(&mut r)?);
    let block_size = u32::from_le_bytes(take(&mut r)?);
    if block_size as usize != BLOCK_SIZE {
        return Err(DeviceError::BadImage(format!("block size {block_size}")));
    }
    let online = take::<1>(&mut r)?[0] != 0;
    let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| DeviceError::BadImage("compressor name".into()))?;
    let deflate_level = u32::from_le_bytes(take(&mut r)?);
    let modeled_default_ratio = f64::from_le_bytes(take(&mut r)?);
    let config = DeviceConfig {
        flash_capacity_bytes,
        logical_blocks,
        compress_mode: CompressMode {
            name,
            params: CompressorParams {
                deflate_level,
                modeled_default_ratio,
            },
        },
    };
    let dev = CompressingDevice::new(id, config)?;
    let count = u64::from_le_bytes(take(&mut r)?);
    for _ in 0..count {
        let lba = u64::from_le_bytes(take(&mut r)?);
        let stored_len = u32::from_le_bytes(take(&mut r)?);
        if stored_len == 0 || stored_len as usize > BLOCK_SIZE || lba >= logical_blocks {
            return Err(DeviceError::BadImage(format!("record at lba {lba}")));
        }
        let has_oob = take::<1>(&mut r)?[0] != 0;
        let payload = Box::new(take::<BLOCK_SIZE>(&mut r)?);
        let oob = if has_oob {
            Some(Box::new(take::<OOB_SIZE>(&mut r)?))
        } else {
            None
        };
        dev.install_record(lba, BlockRecord { stored_len, payload, oob });
    }
    if dev.physical_used() > flash_capacity_bytes {
        return Err(DeviceError::BadImage("physical usage exceeds flash capacity".into()));
    }
    dev.set_state(if online { DeviceState::Online } else { DeviceState::Offline });
    Ok(dev)
}
