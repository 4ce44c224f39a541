//! Elastic RAID over transparently compressing SSDs.

pub mod bench;
pub mod config;
pub mod convert;
pub mod czdev;
pub mod datagen;
pub mod fault;
pub mod iopath;
pub mod journal;
pub mod layout;
pub mod model;
pub mod scheduler;

use czdev::Block;

/// `dst ^= src`, word at a time.
pub fn xor_into(dst: &mut Block, src: &Block) {
    for (d, s) in dst.chunks_exact_mut(8).zip(src.chunks_exact(8)) {
        let v = u64::from_ne_bytes(d.try_into().unwrap()) ^ u64::from_ne_bytes(s.try_into().unwrap());
        d.copy_from_slice(&v.to_ne_bytes());
    }
}
