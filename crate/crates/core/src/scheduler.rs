//! When and what to convert.
//!
//! Reactive rule: promote while every device sits below `c_lower` and usage
//! is stable; demote as soon as any device exceeds `c_upper`. Proactive
//! rule: when the recent RAID 10 hit rate `beta` falls below
//! `h * |S10| / |S|`, swap cold RAID 10 segments for hot RAID 5 ones.
//! Candidates come from two access bitmaps: a plain scan over `v5` and a
//! second-chance clock over `v10`.

use std::collections::VecDeque;

use bitvec::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convert::Direction;
use crate::czdev::{DeviceError, BLOCK_SIZE};
use crate::iopath::{ArrayError, ElasticArray};
use crate::layout::{ArrayGeometry, Level};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Per-device physical usage below which promotion is allowed (bytes).
    pub c_lower: u64,
    /// Per-device physical usage above which demotion starts (bytes).
    pub c_upper: u64,
    /// Hotness factor for the proactive trigger.
    pub h: f64,
    /// User operations between two scheduler ticks.
    pub sample_period: u64,
    /// Accesses between two clears of the RAID 5 access bitmap.
    pub v5_reset_period: u64,
    pub stability_window: usize,
    /// Maximum relative spread of usage inside the window.
    pub stability_tolerance: f64,
    pub batch_size: usize,
    /// Accesses over which the hit rate is measured.
    pub beta_window: usize,
    /// Accesses required before the proactive rule may fire.
    pub min_samples: u64,
    pub probabilistic: bool,
    pub seed: u64,
}

impl SchedulerConfig {
    pub const DEFAULT_LOWER: f64 = 0.80;
    pub const DEFAULT_UPPER: f64 = 0.92;

    /// Thresholds as fractions of the segment flash budget, on top of the
    /// per-device metadata and journal reserve.
    pub fn for_geometry(geometry: &ArrayGeometry, lower: f64, upper: f64) -> Self {
        let base = geometry.reserve_bytes() as f64;
        let flash = geometry.flash_capacity_bytes as f64;
        Self {
            c_lower: (base + lower * flash) as u64,
            c_upper: (base + upper * flash) as u64,
            ..Self::default()
        }
    }

    pub fn validate(&self, device_flash_bytes: u64) -> Result<(), String> {
        if self.c_upper >= device_flash_bytes {
            return Err(format!(
                "c_upper ({}) must be below device flash capacity ({device_flash_bytes})",
                self.c_upper
            ));
        }
        if self.c_lower >= self.c_upper {
            return Err(format!("c_lower ({}) must be below c_upper ({})", self.c_lower, self.c_upper));
        }
        if !(self.h > 1.0) {
            return Err(format!("h must be > 1, got {}", self.h));
        }
        if self.stability_window == 0 || self.batch_size == 0 || self.beta_window == 0 {
            return Err("stability window, batch size and beta window must be positive".into());
        }
        Ok(())
    }
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            c_lower: 0,
            c_upper: u64::MAX,
            h: 1.5,
            sample_period: 1000,
            v5_reset_period: 1_000_000,
            stability_window: 5,
            stability_tolerance: 0.01,
            batch_size: 16,
            beta_window: 100_000,
            min_samples: 10_000,
            probabilistic: true,
            seed: 0,
        }
    }
}

/// Access bitmaps and the sliding hit-rate window.
#[derive(Debug, Clone)]
pub struct HotnessState {
    pub v5: BitVec<u64, Lsb0>,
    pub v10: BitVec<u64, Lsb0>,
    pub v10_hand: u64,
    pub v5_cursor: u64,
    window: VecDeque<bool>,
    window_cap: usize,
    window_hits: u64,
    pub total_accesses: u64,
    since_v5_reset: u64,
}

impl HotnessState {
    pub fn new(segments: u64, window: usize) -> Self {
        Self {
            v5: bitvec![u64, Lsb0; 0; segments as usize],
            v10: bitvec![u64, Lsb0; 0; segments as usize],
            v10_hand: 0,
            v5_cursor: 0,
            window: VecDeque::with_capacity(window),
            window_cap: window,
            window_hits: 0,
            total_accesses: 0,
            since_v5_reset: 0,
        }
    }

    /// RAID 10 hit rate over the window; 0 before any access.
    pub fn beta(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window_hits as f64 / self.window.len() as f64
        }
    }

    fn push(&mut self, hit: bool) {
        if self.window.len() == self.window_cap {
            if self.window.pop_front() == Some(true) {
                self.window_hits -= 1;
            }
        }
        self.window.push_back(hit);
        self.window_hits += hit as u64;
        self.total_accesses += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reactive {
    Promote,
    Demote,
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub ticks: u64,
    pub promote_triggers: u64,
    pub demote_triggers: u64,
    pub proactive_triggers: u64,
    pub promoted: u64,
    pub demoted: u64,
    pub rejected: u64,
    pub headroom_stops: u64,
    pub autonomous: u64,
    pub beta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TickOutcome {
    pub reactive: Option<Reactive>,
    pub proactive: bool,
    pub promoted: Vec<u64>,
    pub demoted: Vec<u64>,
}

/// `true` iff `beta < h * raid10 / segments`.
pub fn proactive_trigger(beta: f64, h: f64, raid10: u64, segments: u64) -> bool {
    if segments == 0 {
        return false;
    }
    beta < h * raid10 as f64 / segments as f64
}

/// Acceptance probability of a candidate whose ratio is `ratio` within a
/// pool spanning `[pool_min, pool_max]`. Unknown ratios are always accepted.
pub fn acceptance_probability(direction: Direction, ratio: Option<f64>, pool_min: f64, pool_max: f64) -> f64 {
    let Some(r) = ratio else { return 1.0 };
    if !(r > 0.0) {
        return 1.0;
    }
    let p = match direction {
        Direction::Promote => r / pool_max,
        Direction::Demote => pool_min / r,
    };
    if p.is_finite() {
        p.clamp(0.0, 1.0)
    } else {
        1.0
    }
}

fn out_of_space(e: &ArrayError) -> bool {
    matches!(e, ArrayError::Device(DeviceError::OutOfSpace { .. }))
}

/// Should an RAID 5 segment be promoted on compressibility grounds alone:
/// two copies of the data take less room than data plus parity.
pub fn autonomous_rule(n: usize, alpha_usr: f64, alpha_pty: f64) -> bool {
    alpha_usr > n as f64 * alpha_pty
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    hot: HotnessState,
    usage: Vec<VecDeque<u64>>,
    rng: ChaCha8Rng,
    stats: SchedulerStats,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, segments: u64, devices: usize) -> Self {
        Self {
            hot: HotnessState::new(segments, config.beta_window),
            usage: vec![VecDeque::new(); devices],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            stats: SchedulerStats::default(),
            config,
        }
    }

    pub fn for_array(config: SchedulerConfig, array: &ElasticArray) -> Self {
        Self::new(config, array.segment_count(), array.geometry().devices)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn hotness(&self) -> &HotnessState {
        &self.hot
    }

    pub fn hotness_mut(&mut self) -> &mut HotnessState {
        &mut self.hot
    }

    pub fn beta(&self) -> f64 {
        self.hot.beta()
    }

    pub fn stats(&self) -> SchedulerStats {
        SchedulerStats {
            beta: self.hot.beta(),
            ..self.stats.clone()
        }
    }

    /// Notes one user access to `seg`.
    pub fn record_access(&mut self, seg: u64, is_r10: bool) {
        let i = seg as usize;
        if is_r10 {
            self.hot.v10.set(i, true);
        } else {
            self.hot.v5.set(i, true);
        }
        self.hot.push(is_r10);
        self.hot.since_v5_reset += 1;
        if self.hot.since_v5_reset >= self.config.v5_reset_period {
            self.hot.v5.fill(false);
            self.hot.since_v5_reset = 0;
        }
    }

    /// Feeds one usage sample per device and applies the threshold rule.
    pub fn reactive_tick(&mut self, usage: &[u64], raid10_segments: u64) -> Reactive {
        let w = self.config.stability_window;
        for (hist, &u) in self.usage.iter_mut().zip(usage) {
            if hist.len() == w {
                hist.pop_front();
            }
            hist.push_back(u);
        }
        if raid10_segments > 0 && usage.iter().any(|&u| u > self.config.c_upper) {
            return Reactive::Demote;
        }
        let below = usage.iter().all(|&u| u < self.config.c_lower);
        let stable = self.usage.iter().all(|h| {
            h.len() == w && {
                let max = *h.iter().max().expect("non-empty");
                let min = *h.iter().min().expect("non-empty");
                (max - min) as f64 <= self.config.stability_tolerance * max as f64
            }
        });
        if below && stable {
            Reactive::Promote
        } else {
            Reactive::None
        }
    }

    pub fn proactive_check(&self, raid10_segments: u64, segments: u64) -> bool {
        self.hot.total_accesses >= self.config.min_samples
            && proactive_trigger(self.hot.beta(), self.config.h, raid10_segments, segments)
    }

    /// Up to `k` segments with their `v5` bit set for which `eligible`
    /// holds, scanning from a cursor that persists across calls.
    pub fn select_promotion_candidates(&mut self, k: usize, eligible: impl Fn(u64) -> bool) -> Vec<u64> {
        let len = self.hot.v5.len() as u64;
        let mut out = Vec::new();
        if len == 0 {
            return out;
        }
        for _ in 0..len {
            if out.len() >= k {
                break;
            }
            let seg = self.hot.v5_cursor;
            self.hot.v5_cursor = (seg + 1) % len;
            if self.hot.v5[seg as usize] && eligible(seg) {
                out.push(seg);
            }
        }
        out
    }

    /// Second-chance clock over segments for which `is_r10` holds: a set
    /// bit is cleared and skipped, a clear bit is selected. The hand keeps
    /// its position between calls; at most two revolutions per call.
    pub fn select_demotion_candidates(&mut self, k: usize, is_r10: impl Fn(u64) -> bool) -> Vec<u64> {
        let len = self.hot.v10.len() as u64;
        let mut out = Vec::new();
        if len == 0 {
            return out;
        }
        for _ in 0..2 * len {
            if out.len() >= k {
                break;
            }
            let seg = self.hot.v10_hand;
            self.hot.v10_hand = (seg + 1) % len;
            if !is_r10(seg) || out.contains(&seg) {
                continue;
            }
            if self.hot.v10[seg as usize] {
                self.hot.v10.set(seg as usize, false);
            } else {
                out.push(seg);
            }
        }
        out
    }

    /// Seeded Bernoulli draw with [`acceptance_probability`].
    pub fn probabilistic_accept(&mut self, direction: Direction, ratio: Option<f64>, pool_min: f64, pool_max: f64) -> bool {
        let p = acceptance_probability(direction, ratio, pool_min, pool_max);
        p >= 1.0 || self.rng.gen::<f64>() < p
    }

    fn filter_by_ratio(&mut self, array: &ElasticArray, cands: Vec<u64>, dir: Direction) -> Result<Vec<u64>, ArrayError> {
        if !self.config.probabilistic || cands.is_empty() {
            return Ok(cands);
        }
        let ratios: Vec<Option<f64>> = cands
            .iter()
            .map(|&s| array.segment_ratios(s).map(|r| r.alpha_usr))
            .collect::<Result<_, _>>()?;
        let known = ratios.iter().flatten();
        let pool_min = known.clone().copied().fold(f64::INFINITY, f64::min);
        let pool_max = known.copied().fold(0.0, f64::max);
        let mut out = Vec::new();
        for (seg, r) in cands.into_iter().zip(ratios) {
            if self.probabilistic_accept(dir, r, pool_min, pool_max) {
                out.push(seg);
            } else {
                self.stats.rejected += 1;
            }
        }
        Ok(out)
    }

    /// Promotes accepted candidates as long as no device would cross `c_upper`.
    fn promote_with_headroom(&mut self, array: &mut ElasticArray, cands: Vec<u64>) -> Result<Vec<u64>, ArrayError> {
        let mut usage: Vec<i64> = array.device_usage().iter().map(|&u| u as i64).collect();
        let mut done = Vec::new();
        for seg in cands {
            if array.level(seg) != Level::R5 {
                continue;
            }
            let delta = array.promote_delta(seg)?;
            let peak = array.promote_peak(seg)?;
            if usage.iter().zip(&peak).any(|(u, d)| u + d > self.config.c_upper as i64) {
                self.stats.headroom_stops += 1;
                continue;
            }
            match array.promote_segment(seg) {
                Ok(_) => {}
                Err(e) if out_of_space(&e) => {
                    self.stats.headroom_stops += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            for (u, d) in usage.iter_mut().zip(&delta) {
                *u += d;
            }
            self.hot.v5.set(seg as usize, false);
            self.hot.v10.set(seg as usize, true);
            self.stats.promoted += 1;
            done.push(seg);
        }
        Ok(done)
    }

    fn demote_all(&mut self, array: &mut ElasticArray, cands: Vec<u64>) -> Result<Vec<u64>, ArrayError> {
        let mut done = Vec::new();
        for seg in cands {
            if array.level(seg) != Level::R10 {
                continue;
            }
            // Parity lands before the second copies are trimmed.
            let p = array.geometry().parity_device(seg);
            let dev = &array.devices()[p];
            if dev.physical_used() + BLOCK_SIZE as u64 > dev.config().flash_capacity_bytes {
                self.stats.headroom_stops += 1;
                continue;
            }
            match array.demote_segment(seg) {
                Ok(_) => {}
                Err(e) if out_of_space(&e) => {
                    self.stats.headroom_stops += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            self.hot.v10.set(seg as usize, false);
            self.stats.demoted += 1;
            done.push(seg);
        }
        Ok(done)
    }

    /// One scheduling round: sample usage, apply the reactive rule, and
    /// otherwise the proactive rule. Conversions are skipped while degraded.
    pub fn tick(&mut self, array: &mut ElasticArray) -> Result<TickOutcome, ArrayError> {
        self.stats.ticks += 1;
        let mut out = TickOutcome::default();
        if array.offline_device().is_some() {
            return Ok(out);
        }
        let usage = array.device_usage();
        let decision = self.reactive_tick(&usage, array.raid10_count());
        out.reactive = Some(decision);
        let k = self.config.batch_size;
        match decision {
            Reactive::Promote => {
                self.stats.promote_triggers += 1;
                let cands = {
                    let bm = array.bitmap();
                    self.select_promotion_candidates(k, |s| bm.level(s) == Level::R5)
                };
                let cands = self.filter_by_ratio(array, cands, Direction::Promote)?;
                out.promoted = self.promote_with_headroom(array, cands)?;
            }
            Reactive::Demote => {
                self.stats.demote_triggers += 1;
                let cands = {
                    let bm = array.bitmap();
                    self.select_demotion_candidates(k, |s| bm.level(s) == Level::R10)
                };
                let cands = self.filter_by_ratio(array, cands, Direction::Demote)?;
                out.demoted = self.demote_all(array, cands)?;
            }
            Reactive::None => {
                if self.proactive_check(array.raid10_count(), array.segment_count()) {
                    self.stats.proactive_triggers += 1;
                    out.proactive = true;
                    let hot = {
                        let bm = array.bitmap();
                        self.select_promotion_candidates(k, |s| bm.level(s) == Level::R5)
                    };
                    let cold = {
                        let bm = array.bitmap();
                        self.select_demotion_candidates(hot.len(), |s| bm.level(s) == Level::R10)
                    };
                    let pairs = hot.len().min(cold.len());
                    out.demoted = self.demote_all(array, cold[..pairs].to_vec())?;
                    out.promoted = self.promote_with_headroom(array, hot[..pairs].to_vec())?;
                }
            }
        }
        Ok(out)
    }

    /// Promotes every RAID 5 segment whose data would take less room as two
    /// copies than as data plus parity.
    pub fn autonomous_scan(&mut self, array: &mut ElasticArray) -> Result<Vec<u64>, ArrayError> {
        let n = array.geometry().n();
        let mut done = Vec::new();
        if array.offline_device().is_some() {
            return Ok(done);
        }
        for seg in 0..array.segment_count() {
            if array.level(seg) != Level::R5 {
                continue;
            }
            let r = array.segment_ratios(seg)?;
            if let (Some(u), Some(p)) = (r.alpha_usr, r.alpha_pty) {
                if autonomous_rule(n, u, p) {
                    array.promote_segment(seg)?;
                    self.hot.v10.set(seg as usize, true);
                    self.stats.autonomous += 1;
                    done.push(seg);
                }
            }
        }
        Ok(done)
    }
}
