//! Per-block compression backends.
//!
//! A device asks its [`Compressor`] how many physical bytes a 4KB logical
//! block occupies. Backends are registered by name in a
//! [`CompressorRegistry`] and selected at runtime from the device config.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{Block, BLOCK_SIZE};

/// Caller-supplied compressibility information for a block.
///
/// Only the modeled backend honours hints; a real compressor measures the
/// payload itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeHint {
    /// Target compression ratio (>= 1).
    Ratio(f64),
    /// Exact post-compression size in bytes.
    Bytes(u32),
}

/// Tunables handed to compressor factories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorParams {
    /// zlib-style level 0..=9 for the deflate backend.
    pub deflate_level: u32,
    /// Ratio used by the modeled backend when a write carries no hint.
    pub modeled_default_ratio: f64,
}

impl Default for CompressorParams {
    fn default() -> Self {
        Self {
            deflate_level: 6,
            modeled_default_ratio: 1.0,
        }
    }
}

/// Names a registered backend plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressMode {
    pub name: String,
    pub params: CompressorParams,
}

impl CompressMode {
    pub fn deflate() -> Self {
        Self {
            name: DeflateCompressor::NAME.to_string(),
            params: CompressorParams::default(),
        }
    }

    pub fn modeled(default_ratio: f64) -> Self {
        Self {
            name: ModeledCompressor::NAME.to_string(),
            params: CompressorParams {
                modeled_default_ratio: default_ratio,
                ..CompressorParams::default()
            },
        }
    }
}

pub trait Compressor: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Physical bytes consumed by `block`, always in `1..=BLOCK_SIZE`.
    fn stored_len(&self, block: &Block, hint: Option<SizeHint>) -> u32;
}

/// Real deflate compression of every block; incompressible output is stored
/// raw at 4096 bytes.
#[derive(Debug, Clone)]
pub struct DeflateCompressor {
    level: u32,
}

impl DeflateCompressor {
    pub const NAME: &'static str = "deflate";

    pub fn new(level: u32) -> Self {
        Self { level: level.min(9) }
    }

    /// Raw deflate stream length of `data`, unclamped.
    pub fn compressed_size(&self, data: &[u8]) -> usize {
        let mut enc = DeflateEncoder::new(Vec::with_capacity(data.len() / 2), Compression::new(self.level));
        enc.write_all(data).expect("in-memory write");
        enc.finish().expect("in-memory finish").len()
    }
}

impl Default for DeflateCompressor {
    fn default() -> Self {
        Self::new(6)
    }
}

impl Compressor for DeflateCompressor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn stored_len(&self, block: &Block, _hint: Option<SizeHint>) -> u32 {
        self.compressed_size(block).clamp(1, BLOCK_SIZE) as u32
    }
}

/// Stored size derived from a per-write target ratio: `ceil(4096 / ratio)`.
#[derive(Debug, Clone)]
pub struct ModeledCompressor {
    default_ratio: f64,
}

impl ModeledCompressor {
    pub const NAME: &'static str = "modeled";

    pub fn new(default_ratio: f64) -> Self {
        Self {
            default_ratio: default_ratio.max(1.0),
        }
    }

    pub fn len_for_ratio(ratio: f64) -> u32 {
        let ratio = if ratio.is_finite() { ratio.max(1.0) } else { 1.0 };
        ((BLOCK_SIZE as f64 / ratio).ceil() as u32).clamp(1, BLOCK_SIZE as u32)
    }
}

impl Compressor for ModeledCompressor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn stored_len(&self, _block: &Block, hint: Option<SizeHint>) -> u32 {
        match hint {
            Some(SizeHint::Ratio(r)) => Self::len_for_ratio(r),
            Some(SizeHint::Bytes(b)) => b.clamp(1, BLOCK_SIZE as u32),
            None => Self::len_for_ratio(self.default_ratio),
        }
    }
}

type CompressorFactory = Box<dyn Fn(&CompressorParams) -> Arc<dyn Compressor> + Send + Sync>;

/// Name-keyed table of compressor factories.
pub struct CompressorRegistry {
    factories: BTreeMap<String, CompressorFactory>,
}

impl CompressorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry pre-loaded with `deflate` and `modeled`.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(DeflateCompressor::NAME, |p| Arc::new(DeflateCompressor::new(p.deflate_level)));
        reg.register(ModeledCompressor::NAME, |p| Arc::new(ModeledCompressor::new(p.modeled_default_ratio)));
        reg
    }

    /// Adds or replaces a factory.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&CompressorParams) -> Arc<dyn Compressor> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, mode: &CompressMode) -> Option<Arc<dyn Compressor>> {
        self.factories.get(&mode.name).map(|f| f(&mode.params))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for CompressorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl fmt::Debug for CompressorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modeled_lengths() {
        let c = ModeledCompressor::new(1.0);
        let b = [0u8; BLOCK_SIZE];
        assert_eq!(c.stored_len(&b, Some(SizeHint::Ratio(2.0))), 2048);
        assert_eq!(c.stored_len(&b, Some(SizeHint::Ratio(3.0))), 1366);
        assert_eq!(c.stored_len(&b, Some(SizeHint::Ratio(0.5))), 4096);
        assert_eq!(c.stored_len(&b, Some(SizeHint::Bytes(0))), 1);
        assert_eq!(c.stored_len(&b, None), 4096);
    }

    #[test]
    fn registry_lookup() {
        let reg = CompressorRegistry::builtin();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["deflate", "modeled"]);
        let c = reg.create(&CompressMode::modeled(4.0)).unwrap();
        assert_eq!(c.name(), "modeled");
        assert_eq!(c.stored_len(&[7u8; BLOCK_SIZE], None), 1024);
        assert!(reg
            .create(&CompressMode {
                name: "lz4".into(),
                params: CompressorParams::default()
            })
            .is_none());
    }
}
