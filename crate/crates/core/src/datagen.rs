//! Synthetic blocks at controlled compressibility and the parity
//! compressibility experiment.
//!
//! A block is 256 chunks of 16 bytes. A seeded subset of chunks is zero-filled
//! and the rest is random; the number of zero chunks is tuned against a real
//! deflate compressor until the measured ratio is close to the target.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::czdev::{Block, Compressor, DeflateCompressor, BLOCK_SIZE};
use crate::xor_into;

const CHUNK: usize = 16;
const CHUNKS: usize = BLOCK_SIZE / CHUNK;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("target ratio {target} is above the achievable ceiling {ceiling:.2}")]
    UnreachableRatio { target: f64, ceiling: f64 },
    #[error("target ratio must be >= 1, got {0}")]
    BadTarget(f64),
    #[error("corpus of {bytes} bytes is smaller than one stripe of {need} bytes")]
    CorpusTooSmall { bytes: usize, need: usize },
    #[error("stripe width must be >= 1")]
    NoDataStrips,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub target_ratio: f64,
    pub seed: u64,
    /// Share of chunks zero-filled; set by calibration.
    pub fill_fraction: f64,
}

impl BlockSpec {
    pub fn new(target_ratio: f64, seed: u64) -> Self {
        Self {
            target_ratio,
            seed,
            fill_fraction: 0.0,
        }
    }
}

/// `4096 / deflate size`, with incompressible blocks at exactly 1.0.
pub fn measured_ratio(block: &Block) -> f64 {
    BLOCK_SIZE as f64 / DeflateCompressor::default().stored_len(block, None) as f64
}

/// Block for `seed` with `fill` zero chunks. Larger `fill` zeroes a superset
/// of chunks, so the ratio is nondecreasing in `fill` up to compressor noise.
pub fn render(seed: u64, fill: usize) -> Block {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = [0u8; BLOCK_SIZE];
    rng.fill_bytes(&mut block);
    let mut order: Vec<usize> = (0..CHUNKS).collect();
    order.shuffle(&mut rng);
    for &c in &order[..fill.min(CHUNKS)] {
        block[c * CHUNK..(c + 1) * CHUNK].fill(0);
    }
    block
}

/// Finds the zero-chunk count whose ratio is closest to `spec.target_ratio`.
pub fn calibrate(spec: &BlockSpec) -> Result<(BlockSpec, Block), DatagenError> {
    let target = spec.target_ratio;
    if !(target >= 1.0 && target.is_finite()) {
        return Err(DatagenError::BadTarget(target));
    }
    let ratio_at = |k: usize| measured_ratio(&render(spec.seed, k));
    let ceiling = ratio_at(CHUNKS);
    if target > ceiling {
        return Err(DatagenError::UnreachableRatio { target, ceiling });
    }
    // Smallest k with ratio >= target.
    let (mut lo, mut hi) = (0usize, CHUNKS);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if ratio_at(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = lo;
    if lo > 0 && (ratio_at(lo - 1) - target).abs() < (ratio_at(lo) - target).abs() {
        best = lo - 1;
    }
    let out = BlockSpec {
        fill_fraction: best as f64 / CHUNKS as f64,
        ..*spec
    };
    Ok((out, render(spec.seed, best)))
}

pub fn synth_block(spec: &BlockSpec) -> Result<Block, DatagenError> {
    calibrate(spec).map(|(_, b)| b)
}

/// `blocks` independently seeded blocks at `target_ratio`, concatenated.
pub fn synthetic_corpus(blocks: usize, target_ratio: f64, seed: u64) -> Result<Vec<u8>, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..blocks).map(|_| rng.gen()).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let per = blocks.div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<u8>, DatagenError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    let mut out = Vec::with_capacity(chunk.len() * BLOCK_SIZE);
                    for &sd in chunk {
                        out.extend_from_slice(&synth_block(&BlockSpec::new(target_ratio, sd))?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("datagen worker")).collect()
    });
    let mut corpus = Vec::with_capacity(blocks * BLOCK_SIZE);
    for p in parts {
        corpus.extend(p?);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioHistogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub user_counts: Vec<u64>,
    pub parity_counts: Vec<u64>,
}

impl RatioHistogram {
    pub fn new(edges: Vec<f64>) -> Self {
        let bins = edges.len().saturating_sub(1);
        Self {
            edges,
            user_counts: vec![0; bins],
            parity_counts: vec![0; bins],
        }
    }

    fn bin(&self, ratio: f64) -> usize {
        let last = self.user_counts.len() - 1;
        self.edges[1..].iter().position(|&e| ratio < e).unwrap_or(last).min(last)
    }

    pub fn add_user(&mut self, ratio: f64) {
        let b = self.bin(ratio);
        self.user_counts[b] += 1;
    }

    pub fn add_parity(&mut self, ratio: f64) {
        let b = self.bin(ratio);
        self.parity_counts[b] += 1;
    }

    /// Count-weighted mean bin centre of one side.
    pub fn centroid(counts: &[u64], edges: &[f64]) -> f64 {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * (edges[i] + edges[i + 1]) / 2.0)
            .sum::<f64>()
            / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,user,parity\n");
        for i in 0..self.user_counts.len() {
            out.push_str(&format!(
                "{:.4},{:.4},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.user_counts[i],
                self.parity_counts[i]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityExperiment {
    pub n: usize,
    pub stripes: usize,
    pub histogram: RatioHistogram,
    pub user_ratios: Vec<f64>,
    pub parity_ratios: Vec<f64>,
    pub user_mean: f64,
    pub parity_mean: f64,
    /// One-sided Welch test of `parity_mean < user_mean`.
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// One-sided Welch t-test p-value for `mean(a) > mean(b)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se = (sa + sb).sqrt();
    if se == 0.0 {
        return if ma > mb { 0.0 } else { 1.0 };
    }
    let t = (ma - mb) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => 1.0 - dist.cdf(t),
        Err(_) => f64::NAN,
    }
}

/// Evenly spaced edges from 1.0 to the largest observed ratio.
pub fn default_edges(bins: usize, max_ratio: f64) -> Vec<f64> {
    let bins = bins.max(1);
    let hi = max_ratio.max(1.0 + 1e-9);
    (0..=bins).map(|i| 1.0 + (hi - 1.0) * i as f64 / bins as f64).collect()
}

/// Chunks `corpus` into 4KB strips, groups `n` per stripe, and compares the
/// compressibility of data strips with their XOR parity.
pub fn parity_ratio_experiment(corpus: &[u8], n: usize, bins: usize) -> Result<ParityExperiment, DatagenError> {
    if n == 0 {
        return Err(DatagenError::NoDataStrips);
    }
    let need = n * BLOCK_SIZE;
    if corpus.len() < need {
        return Err(DatagenError::CorpusTooSmall {
            bytes: corpus.len(),
            need,
        });
    }
    let stripes = corpus.len() / need;
    let mut user_ratios = Vec::with_capacity(stripes * n);
    let mut parity_ratios = Vec::with_capacity(stripes);
    for s in 0..stripes {
        let mut parity = [0u8; BLOCK_SIZE];
        for i in 0..n {
            let off = (s * n + i) * BLOCK_SIZE;
            let strip: &Block = corpus[off..off + BLOCK_SIZE].try_into().expect("4KB strip");
            xor_into(&mut parity, strip);
            user_ratios.push(measured_ratio(strip));
        }
        parity_ratios.push(measured_ratio(&parity));
    }
    let max = user_ratios.iter().chain(&parity_ratios).cloned().fold(1.0, f64::max);
    let mut histogram = RatioHistogram::new(default_edges(bins, max));
    user_ratios.iter().for_each(|&r| histogram.add_user(r));
    parity_ratios.iter().for_each(|&r| histogram.add_parity(r));
    Ok(ParityExperiment {
        n,
        stripes,
        user_mean: mean_var(&user_ratios).0,
        parity_mean: mean_var(&parity_ratios).0,
        p_value: welch_greater(&user_ratios, &parity_ratios),
        histogram,
        user_ratios,
        parity_ratios,
    })
}
