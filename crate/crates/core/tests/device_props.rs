use std::collections::HashMap;

use eraid_core::czdev::{
    Block, CompressMode, CompressingDevice, DeviceConfig, DeviceError, SizeHint, BLOCK_SIZE, ZERO_BLOCK,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Write { lba: u64, fill: u8, ratio: f64 },
    Trim { lba: u64, len: u64 },
}

fn op(blocks: u64) -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..blocks, any::<u8>(), 1.0f64..8.0).prop_map(|(lba, fill, ratio)| Op::Write { lba, fill, ratio }),
        1 => (0..blocks, 1u64..4).prop_map(|(lba, len)| Op::Trim { lba, len }),
    ]
}

fn device(flash: u64, blocks: u64, mode: CompressMode) -> CompressingDevice {
    CompressingDevice::new(
        0,
        DeviceConfig {
            flash_capacity_bytes: flash,
            logical_blocks: blocks,
            compress_mode: mode,
        },
    )
    .unwrap()
}

fn payload(lba: u64, fill: u8) -> Block {
    let mut b = [fill; BLOCK_SIZE];
    b[..8].copy_from_slice(&lba.to_le_bytes());
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reads_return_latest_write_and_usage_is_exact(ops in prop::collection::vec(op(32), 1..200)) {
        let dev = device(32 * 4096, 32, CompressMode::modeled(2.0));
        let mut shadow: HashMap<u64, Block> = HashMap::new();
        for o in ops {
            match o {
                Op::Write { lba, fill, ratio } => {
                    let b = payload(lba, fill);
                    dev.write_hinted(lba, &b, Some(SizeHint::Ratio(ratio))).unwrap();
                    shadow.insert(lba, b);
                }
                Op::Trim { lba, len } => {
                    let end = (lba + len).min(32);
                    dev.trim(lba..end).unwrap();
                    for l in lba..end {
                        shadow.remove(&l);
                    }
                }
            }
            prop_assert_eq!(dev.physical_used(), dev.recompute_physical_used());
        }
        for lba in 0..32 {
            let want = shadow.get(&lba).copied().unwrap_or(ZERO_BLOCK);
            prop_assert_eq!(dev.read(lba).unwrap(), want);
        }
    }

    #[test]
    fn out_of_space_fires_before_overflow(ratios in prop::collection::vec(1.0f64..4.0, 1..80)) {
        let flash = 16 * 4096;
        let dev = device(flash, 128, CompressMode::modeled(1.0));
        for (i, r) in ratios.iter().enumerate() {
            let before = dev.physical_used();
            match dev.write_hinted(i as u64, &payload(i as u64, 7), Some(SizeHint::Ratio(*r))) {
                Ok(_) => prop_assert!(dev.physical_used() <= flash),
                Err(DeviceError::OutOfSpace { .. }) => {
                    prop_assert_eq!(dev.physical_used(), before);
                    prop_assert!(dev.read(i as u64).unwrap() == ZERO_BLOCK);
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }

    #[test]
    fn higher_target_ratio_never_stores_more(a in 1.0f64..16.0, b in 1.0f64..16.0) {
        let dev = device(1 << 20, 4, CompressMode::modeled(1.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let block = payload(0, 3);
        let l_lo = dev.write_hinted(0, &block, Some(SizeHint::Ratio(lo))).unwrap();
        let l_hi = dev.write_hinted(1, &block, Some(SizeHint::Ratio(hi))).unwrap();
        prop_assert!(l_hi <= l_lo);
    }
}

#[test]
fn deflate_usage_matches_scan_after_overwrites() {
    let dev = device(1 << 20, 64, CompressMode::deflate());
    for round in 0..4u8 {
        for lba in 0..64u64 {
            let mut b = [0u8; BLOCK_SIZE];
            for (i, x) in b.iter_mut().enumerate() {
                *x = if (i / 64 + lba as usize) % (round as usize + 2) == 0 { i as u8 } else { 0 };
            }
            dev.write(lba, &b).unwrap();
        }
        dev.trim(round as u64 * 8..round as u64 * 8 + 5).unwrap();
        assert_eq!(dev.physical_used(), dev.recompute_physical_used());
    }
}
