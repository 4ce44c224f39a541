//! Workload generation and measurement.
//!
//! Access distributions are trait objects looked up by name in a
//! [`DistributionRegistry`]. Costs are reported as backend device operations
//! per user operation rather than wall-clock IOPS.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::czdev::{Block, CompressMode, SizeHint, BLOCK_SIZE};
use crate::datagen::{synth_block, BlockSpec};
use crate::iopath::{AmpCounters, ArrayConfig, ArrayError, ElasticArray};
use crate::layout::Level;
use crate::scheduler::{Scheduler, SchedulerStats};

pub trait AccessDistribution: Send + fmt::Debug {
    fn name(&self) -> &str;

    /// Next LBA in `0..span`.
    fn next_lba(&mut self, rng: &mut ChaCha8Rng, span: u64) -> u64;
}

#[derive(Debug, Default)]
pub struct Uniform;

impl AccessDistribution for Uniform {
    fn name(&self) -> &str {
        "uniform"
    }

    fn next_lba(&mut self, rng: &mut ChaCha8Rng, span: u64) -> u64 {
        rng.gen_range(0..span)
    }
}

/// Two-level skew: `hot_share` of accesses go uniformly to the first
/// `hot_fraction` of the span, the rest uniformly to the remainder.
#[derive(Debug, Clone, Copy)]
pub struct HotCold {
    pub hot_fraction: f64,
    pub hot_share: f64,
}

impl HotCold {
    pub const EIGHTY_TWENTY: HotCold = HotCold {
        hot_fraction: 0.2,
        hot_share: 0.8,
    };

    pub fn hot_span(&self, span: u64) -> u64 {
        ((span as f64 * self.hot_fraction).ceil() as u64).clamp(1, span)
    }
}

impl AccessDistribution for HotCold {
    fn name(&self) -> &str {
        "8020"
    }

    fn next_lba(&mut self, rng: &mut ChaCha8Rng, span: u64) -> u64 {
        let hot = self.hot_span(span);
        if hot == span || rng.gen_bool(self.hot_share) {
            rng.gen_range(0..hot)
        } else {
            rng.gen_range(hot..span)
        }
    }
}

type DistFactory = Box<dyn Fn() -> Box<dyn AccessDistribution> + Send + Sync>;

pub struct DistributionRegistry {
    factories: BTreeMap<String, DistFactory>,
}

impl DistributionRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("uniform", || Box::new(Uniform));
        r.register("8020", || Box::new(HotCold::EIGHTY_TWENTY));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Box<dyn AccessDistribution> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str) -> Option<Box<dyn AccessDistribution>> {
        self.factories.get(name).map(|f| f())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for DistributionRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl fmt::Debug for DistributionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

/// Target compression ratio for the LBAs in one share of the span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRegion {
    pub fraction: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub op_count: u64,
    pub read_fraction: f64,
    pub distribution: String,
    /// Leading share of the user LBA space that is accessed.
    pub lba_span: f64,
    pub seed: u64,
    /// Consecutive regions of the span; LBAs past the last region use its ratio.
    pub data_ratio_profile: Vec<RatioRegion>,
    /// Independent op streams interleaved round-robin.
    pub submitters: usize,
    /// Ops between coverage samples; 0 picks about 100 samples per run.
    pub sample_every: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            op_count: 0,
            read_fraction: 0.0,
            distribution: "uniform".into(),
            lba_span: 1.0,
            seed: 0,
            data_ratio_profile: Vec::new(),
            submitters: 1,
            sample_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("unknown distribution {0:?}")]
    UnknownDistribution(String),
    #[error("invalid workload: {0}")]
    BadSpec(String),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(BenchError::BadSpec(format!("read_fraction {} not in [0,1]", self.read_fraction)));
        }
        if !(self.lba_span > 0.0 && self.lba_span <= 1.0) {
            return Err(BenchError::BadSpec(format!("lba_span {} not in (0,1]", self.lba_span)));
        }
        if self.data_ratio_profile.iter().any(|r| !(r.ratio >= 1.0) || !(r.fraction >= 0.0)) {
            return Err(BenchError::BadSpec("ratio regions need ratio >= 1 and fraction >= 0".into()));
        }
        Ok(())
    }

    fn ratio_at(&self, lba: u64, span: u64) -> Option<f64> {
        let pos = lba as f64 / span as f64;
        let mut acc = 0.0;
        for r in &self.data_ratio_profile {
            acc += r.fraction;
            if pos < acc {
                return Some(r.ratio);
            }
        }
        self.data_ratio_profile.last().map(|r| r.ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub op: u64,
    pub coverage: f64,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub failed: u64,
    /// Failed ops by error text.
    pub errors: BTreeMap<String, u64>,
    pub wa: f64,
    pub ra: f64,
    pub read_ra: f64,
    pub write_ra: f64,
    /// Device reads plus writes per user op.
    pub backend_cost: f64,
    pub counters: AmpCounters,
    pub samples: Vec<Sample>,
    pub scheduler: Option<SchedulerStats>,
}

impl RunReport {
    /// Rebuilds the derived metrics from the raw counters.
    pub fn derive(&mut self) {
        let c = &self.counters;
        self.wa = c.wa();
        self.ra = c.ra();
        self.read_ra = c.read_ra();
        self.write_ra = c.write_ra();
        self.backend_cost = c.backend_cost();
    }
}

/// Seeded payload pools per target ratio.
struct Payloads {
    pools: BTreeMap<u64, Vec<Block>>,
}

impl Payloads {
    const VARIANTS: usize = 8;

    fn new(ratios: &[f64], seed: u64, real: bool) -> Self {
        let mut pools = BTreeMap::new();
        for &r in ratios {
            let key = r.to_bits();
            if pools.contains_key(&key) {
                continue;
            }
            let blocks = (0..Self::VARIANTS as u64)
                .map(|v| {
                    if real {
                        synth_block(&BlockSpec::new(r, seed ^ (v << 32) ^ key)).unwrap_or([0xA5; BLOCK_SIZE])
                    } else {
                        [v as u8 + 1; BLOCK_SIZE]
                    }
                })
                .collect();
            pools.insert(key, blocks);
        }
        Self { pools }
    }

    fn get(&self, ratio: Option<f64>, pick: usize, lba: u64, op: u64) -> Block {
        let base = ratio
            .and_then(|r| self.pools.get(&r.to_bits()))
            .map(|p| p[pick % p.len()])
            .unwrap_or([(pick % 251) as u8 + 1; BLOCK_SIZE]);
        let mut b = base;
        b[..8].copy_from_slice(&lba.to_le_bytes());
        b[8..16].copy_from_slice(&op.to_le_bytes());
        b
    }
}

/// Issues `spec.op_count` ops against `array`. Array errors are tallied in
/// the report; the run continues past them.
pub fn run_workload(
    spec: &WorkloadSpec,
    array: &mut ElasticArray,
    mut scheduler: Option<&mut Scheduler>,
    registry: &DistributionRegistry,
) -> Result<RunReport, BenchError> {
    spec.validate()?;
    let mut report = RunReport::default();
    if spec.op_count == 0 {
        return Ok(report);
    }
    let span = ((array.user_blocks() as f64 * spec.lba_span).floor() as u64).max(1);
    let submitters = spec.submitters.max(1);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut streams: Vec<(ChaCha8Rng, Box<dyn AccessDistribution>)> = Vec::with_capacity(submitters);
    for _ in 0..submitters {
        let dist = registry
            .create(&spec.distribution)
            .ok_or_else(|| BenchError::UnknownDistribution(spec.distribution.clone()))?;
        streams.push((ChaCha8Rng::seed_from_u64(master.gen()), dist));
    }
    let real = array.config().compress_mode.name != CompressMode::modeled(1.0).name;
    let ratios: Vec<f64> = spec.data_ratio_profile.iter().map(|r| r.ratio).collect();
    let payloads = Payloads::new(&ratios, spec.seed, real);
    let every = if spec.sample_every > 0 {
        spec.sample_every
    } else {
        (spec.op_count / 100).max(1)
    };
    let before = array.counters();
    for op in 0..spec.op_count {
        let (rng, dist) = &mut streams[(op % submitters as u64) as usize];
        let lba = dist.next_lba(rng, span);
        let is_read = rng.gen_bool(spec.read_fraction);
        let pick = rng.gen_range(0..Payloads::VARIANTS);
        let res = if is_read {
            report.reads += 1;
            array.read(lba).map(|_| ())
        } else {
            report.writes += 1;
            let ratio = spec.ratio_at(lba, span);
            let data = payloads.get(ratio, pick, lba, op);
            array.write_hinted(lba, &data, ratio.map(SizeHint::Ratio))
        };
        report.ops += 1;
        if let Err(e) = res {
            tally(&mut report, &e);
        }
        if let Some(s) = scheduler.as_deref_mut() {
            if let Ok(seg) = array.segment_of(lba) {
                s.record_access(seg, array.level(seg) == Level::R10);
            }
            let period = s.config().sample_period.max(1);
            if (op + 1) % period == 0 {
                if let Err(e) = s.tick(array) {
                    tally(&mut report, &e);
                }
            }
        }
        if (op + 1) % every == 0 || op + 1 == spec.op_count {
            report.samples.push(Sample {
                op: op + 1,
                coverage: array.coverage(),
                beta: scheduler.as_deref().map(|s| s.beta()),
            });
        }
    }
    report.counters = diff(array.counters(), before);
    report.scheduler = scheduler.map(|s| s.stats());
    report.derive();
    Ok(report)
}

fn tally(report: &mut RunReport, e: &ArrayError) {
    report.failed += 1;
    let key = match e {
        ArrayError::DegradedReject { .. } => "degraded_reject".to_string(),
        other => other.to_string(),
    };
    *report.errors.entry(key).or_default() += 1;
}

fn diff(a: AmpCounters, b: AmpCounters) -> AmpCounters {
    AmpCounters {
        user_reads: a.user_reads - b.user_reads,
        user_writes: a.user_writes - b.user_writes,
        device_reads: a.device_reads - b.device_reads,
        device_writes: a.device_writes - b.device_writes,
        read_path_reads: a.read_path_reads - b.read_path_reads,
        write_path_reads: a.write_path_reads - b.write_path_reads,
        stripe_writes: a.stripe_writes - b.stripe_writes,
        journal_writes: a.journal_writes - b.journal_writes,
        conversion_reads: a.conversion_reads - b.conversion_reads,
        conversion_writes: a.conversion_writes - b.conversion_writes,
        conversion_trims: a.conversion_trims - b.conversion_trims,
        metadata_writes: a.metadata_writes - b.metadata_writes,
        resync_reads: a.resync_reads - b.resync_reads,
        resync_writes: a.resync_writes - b.resync_writes,
    }
}

/// Writes every user block once and clears the counters.
pub fn prefill(array: &mut ElasticArray, ratio: Option<f64>) -> Result<(), ArrayError> {
    for lba in 0..array.user_blocks() {
        let mut b = [(lba % 251) as u8 + 1; BLOCK_SIZE];
        b[..8].copy_from_slice(&lba.to_le_bytes());
        array.write_hinted(lba, &b, ratio.map(SizeHint::Ratio))?;
    }
    array.flush()?;
    array.reset_counters();
    Ok(())
}

/// How RAID 10 slots are assigned to segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accuracy {
    /// Uniformly random membership.
    Random,
    /// The classifier's top-ranked hot-set-sized group holds this share of
    /// the truly hot segments.
    Fraction(f64),
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Accuracy::Random => f.write_str("random"),
            Accuracy::Fraction(a) => write!(f, "{a}"),
        }
    }
}

/// Hot segments placed in RAID 10 when `budget` of `segments` slots are
/// filled from a ranking whose top `hot` entries hold `a * hot` hot ones;
/// the hot segments it misses are spread evenly over the rest.
pub fn hot_in_raid10(a: f64, budget: u64, hot: u64, segments: u64) -> u64 {
    let (b, h, s) = (budget as f64, hot as f64, segments as f64);
    let x = if b <= h {
        a * b
    } else if s > h {
        a * h + (1.0 - a) * h * (b - h) / (s - h)
    } else {
        h
    };
    (x.round() as u64).min(hot).min(budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub accuracy: Accuracy,
    pub coverage: f64,
    pub hot_raid10: u64,
    pub cold_raid10: u64,
    /// Share of writes that land on RAID 10 segments.
    pub raid10_hit_fraction: f64,
    /// Device reads plus writes per user write.
    pub cost_per_write: f64,
    /// `f * c10 + (1 - f) * c5` with `f` from the placement.
    pub expected_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySetup {
    pub devices: usize,
    pub segments: u64,
    pub ops: u64,
    pub seed: u64,
}

impl Default for AccuracySetup {
    fn default() -> Self {
        Self {
            devices: 4,
            segments: 1000,
            ops: 40_000,
            seed: 12,
        }
    }
}

fn experiment_array(setup: &AccuracySetup) -> Result<ElasticArray, ArrayError> {
    let cfg = ArrayConfig {
        devices: setup.devices,
        flash_capacity_bytes: setup.segments * BLOCK_SIZE as u64,
        alpha_exp: 1.0,
        journal_fraction: 0.0,
        compress_mode: CompressMode::modeled(4.0),
        ..ArrayConfig::default()
    };
    ElasticArray::create(cfg)
}

/// Picks the RAID 10 set for one grid cell: hot segments are
/// `0..hot`, matching the leading hot region of the 80/20 generator.
pub fn place_raid10(accuracy: Accuracy, coverage: f64, segments: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let budget = ((coverage * segments as f64).round() as u64).min(segments);
    let hot = HotCold::EIGHTY_TWENTY.hot_span(segments);
    match accuracy {
        Accuracy::Random => sample(rng, segments as usize, budget as usize)
            .into_iter()
            .map(|s| s as u64)
            .collect(),
        Accuracy::Fraction(a) => {
            let h = hot_in_raid10(a, budget, hot, segments);
            let c = (budget - h).min(segments - hot);
            let h = budget - c;
            let mut out: Vec<u64> = sample(rng, hot as usize, h as usize).into_iter().map(|s| s as u64).collect();
            out.extend(sample(rng, (segments - hot) as usize, c as usize).into_iter().map(|s| hot + s as u64));
            out
        }
    }
}

/// 80/20 writes against a fixed RAID 10 placement; no journal so every
/// write is a direct stripe update.
pub fn accuracy_cell(setup: &AccuracySetup, accuracy: Accuracy, coverage: f64) -> Result<AccuracyCell, ArrayError> {
    let mut array = experiment_array(setup)?;
    prefill(&mut array, None)?;
    let segments = array.segment_count();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ coverage.to_bits());
    let placed = place_raid10(accuracy, coverage, segments, &mut rng);
    for &s in &placed {
        array.promote_segment(s)?;
    }
    array.reset_counters();
    let hot = HotCold::EIGHTY_TWENTY.hot_span(segments);
    let hot_raid10 = placed.iter().filter(|&&s| s < hot).count() as u64;
    let cold_raid10 = placed.len() as u64 - hot_raid10;
    let spec = WorkloadSpec {
        op_count: setup.ops,
        distribution: "8020".into(),
        seed: setup.seed,
        ..WorkloadSpec::default()
    };
    // Whole segments per region keeps the hot LBA range aligned.
    let n = array.geometry().n() as u64;
    debug_assert_eq!(HotCold::EIGHTY_TWENTY.hot_span(segments * n), hot * n);
    let report = run_workload(&spec, &mut array, None, &DistributionRegistry::builtin()).expect("builtin workload");
    let f = expected_raid10_hits(hot_raid10, cold_raid10, hot, segments);
    let (c5, c10) = direct_write_costs();
    Ok(AccuracyCell {
        accuracy,
        coverage,
        hot_raid10,
        cold_raid10,
        raid10_hit_fraction: f,
        cost_per_write: report.backend_cost,
        expected_cost: f * c10 + (1.0 - f) * c5,
    })
}

/// Share of 80/20 accesses that hit RAID 10 for a given placement.
pub fn expected_raid10_hits(hot_raid10: u64, cold_raid10: u64, hot: u64, segments: u64) -> f64 {
    let hc = HotCold::EIGHTY_TWENTY;
    let ph = hot_raid10 as f64 / hot as f64;
    let pc = if segments > hot {
        cold_raid10 as f64 / (segments - hot) as f64
    } else {
        0.0
    };
    hc.hot_share * ph + (1.0 - hc.hot_share) * pc
}

/// Backend ops per un-journaled user write: RAID 5 read-modify-write
/// (2 reads, 2 writes) and RAID 10 mirrored write (2 writes).
pub fn direct_write_costs() -> (f64, f64) {
    (4.0, 2.0)
}

pub const ACCURACY_GRID: [Accuracy; 4] = [
    Accuracy::Random,
    Accuracy::Fraction(0.5),
    Accuracy::Fraction(0.75),
    Accuracy::Fraction(1.0),
];
pub const COVERAGE_GRID: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

pub fn classification_accuracy_experiment(setup: &AccuracySetup) -> Result<Vec<AccuracyCell>, ArrayError> {
    let mut out = Vec::new();
    for a in ACCURACY_GRID {
        for c in COVERAGE_GRID {
            out.push(accuracy_cell(setup, a, c)?);
        }
    }
    Ok(out)
}

/// Read cost per user read with one device offline, for a given share of
/// RAID 10 segments.
pub fn degraded_read_cost(setup: &AccuracySetup, coverage: f64, offline: usize) -> Result<f64, ArrayError> {
    let mut array = experiment_array(setup)?;
    prefill(&mut array, None)?;
    let segments = array.segment_count();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    for s in place_raid10(Accuracy::Random, coverage, segments, &mut rng) {
        array.promote_segment(s)?;
    }
    array.set_offline(offline)?;
    array.reset_counters();
    let spec = WorkloadSpec {
        op_count: setup.ops,
        read_fraction: 1.0,
        seed: setup.seed,
        ..WorkloadSpec::default()
    };
    let r = run_workload(&spec, &mut array, None, &DistributionRegistry::builtin()).expect("builtin workload");
    Ok(r.read_ra)
}
