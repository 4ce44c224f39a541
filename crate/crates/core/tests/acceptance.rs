//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so the lines are always printed.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eraid_core::bench::{
    classification_accuracy_experiment, degraded_read_cost, prefill, run_workload, Accuracy, AccuracySetup,
    DistributionRegistry, WorkloadSpec, COVERAGE_GRID,
};
use eraid_core::convert::{run_conversion_workers, ConversionTask, CostModel, Direction, ThrottleConfig};
use eraid_core::czdev::{Block, CompressMode, DeviceState, SizeHint, BLOCK_SIZE};
use eraid_core::datagen::{parity_ratio_experiment, synthetic_corpus, RatioHistogram};
use eraid_core::iopath::{ArrayConfig, ArrayError, ElasticArray, ParityRatio};
use eraid_core::journal::Journal;
use eraid_core::layout::Level;
use eraid_core::model::{raid10_fraction, ModelParams};
use eraid_core::scheduler::{
    acceptance_probability, autonomous_rule, proactive_trigger, Scheduler, SchedulerConfig,
};
use eraid_core::xor_into;

// Tolerances.
const AMP_REL_TOL: f64 = 0.02;
const AMP_OPS: u64 = 100_000;
const AMP_BUDGET: Duration = Duration::from_secs(60);
const ANCHOR_TOL: f64 = 0.02;
const AGREEMENT_ABS_TOL: f64 = 0.03;
const SIM_LOWER: f64 = 0.997;
const SIM_UPPER: f64 = 0.998;
const AGREEMENT_BUDGET: Duration = Duration::from_secs(600);
const CRASH_BUDGET: Duration = Duration::from_secs(300);
const PARITY_P_MAX: f64 = 0.01;
const PARITY_STRIPES: usize = 1000;
const ACCEPT_TRIALS: u64 = 100_000;
const ACCEPT_TOL: f64 = 0.01;
const THROTTLE_OVERSHOOT: f64 = 1.10;
const THROTTLE_SECONDS: f64 = 3.0;
const COST_REL_TOL: f64 = 0.03;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(out: &mut Vec<Outcome>, id: &'static str, name: &'static str, pass: bool, detail: String) {
    println!("{} {:<3} {:<28} {}", if pass { "PASS" } else { "FAIL" }, id, name, detail);
    out.push(Outcome {
        id,
        name,
        pass,
        detail,
    });
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn pattern(lba: u64, tag: u8) -> Block {
    let mut b = [tag; BLOCK_SIZE];
    b[..8].copy_from_slice(&lba.to_le_bytes());
    b[8] = tag;
    b
}

// 1 -------------------------------------------------------------------------

fn amp_array(level: Level) -> ElasticArray {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 4096 * 4096,
        alpha_exp: 1.0,
        journal_fraction: 0.01,
        compress_mode: CompressMode::modeled(2.0),
        initial_level: level,
        ..ArrayConfig::default()
    })
    .expect("array");
    prefill(&mut a, None).expect("prefill");
    a
}

fn uniform(ops: u64, read_fraction: f64, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        op_count: ops,
        read_fraction,
        seed,
        ..WorkloadSpec::default()
    }
}

fn criterion_amplification(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let reg = DistributionRegistry::builtin();
    let mut ok = true;
    let mut notes = Vec::new();

    let mut a = amp_array(Level::R5);
    let r = run_workload(&uniform(AMP_OPS, 0.0, 1), &mut a, None, &reg).expect("workload");
    a.flush().expect("flush");
    let c = a.counters();
    let (wa, ra) = (c.wa(), c.ra());
    ok &= r.failed == 0 && rel(wa, 2.0 + 4.0 / 3.0) <= AMP_REL_TOL && rel(ra, 2.0) <= AMP_REL_TOL;
    notes.push(format!("r5 write WA={wa:.4} RA={ra:.4}"));

    let mut a = amp_array(Level::R10);
    run_workload(&uniform(AMP_OPS, 0.0, 2), &mut a, None, &reg).expect("workload");
    a.flush().expect("flush");
    let c = a.counters();
    ok &= c.device_reads == 0;
    notes.push(format!("r10 write RA={} WA={:.4}", c.ra(), c.wa()));

    let mut a = amp_array(Level::R5);
    a.set_offline(2).expect("offline");
    a.reset_counters();
    run_workload(&uniform(AMP_OPS, 1.0, 3), &mut a, None, &reg).expect("workload");
    let ra = a.counters().ra();
    ok &= rel(ra, 1.5) <= AMP_REL_TOL;
    notes.push(format!("r5 degraded read RA={ra:.4}"));

    let mut a = amp_array(Level::R10);
    a.set_offline(2).expect("offline");
    a.reset_counters();
    run_workload(&uniform(AMP_OPS, 1.0, 4), &mut a, None, &reg).expect("workload");
    let ra = a.counters().ra();
    ok &= ra == 1.0;
    notes.push(format!("r10 degraded read RA={ra}"));

    let el = t0.elapsed();
    ok &= el < AMP_BUDGET;
    notes.push(format!("{:.1}s", el.as_secs_f64()));
    line(out, "1", "amplification", ok, notes.join("; "));
}

// 2 -------------------------------------------------------------------------

fn criterion_anchors(out: &mut Vec<Outcome>) {
    let at = |beta| {
        raid10_fraction(&ModelParams {
            n: 3,
            alpha_exp: 1.8,
            beta_util: beta,
            alpha_usr: 2.0,
            alpha_pty: 1.25,
        })
        .raid10_fraction
    };
    let (f10, f09, f08) = (at(1.0), at(0.9), at(0.8));
    let ok = f10.abs() < 0.005 && (f09 - 0.24).abs() <= ANCHOR_TOL && (f08 - 0.68).abs() <= ANCHOR_TOL;
    line(
        out,
        "2",
        "coverage model anchors",
        ok,
        format!("beta 1.0 -> {f10:.4}, 0.9 -> {f09:.4}, 0.8 -> {f08:.4}"),
    );
}

// 3 -------------------------------------------------------------------------

/// Fills `beta` of the segments at ratio `u`, then lets the reactive
/// scheduler promote until it stops making progress.
fn simulated_coverage(alpha_exp: f64, beta: f64, u: f64) -> f64 {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 8 << 20,
        alpha_exp,
        journal_fraction: 0.0,
        compress_mode: CompressMode::modeled(u),
        parity_ratio: ParityRatio::Linked,
        ..ArrayConfig::default()
    })
    .expect("array");
    let segs = a.segment_count();
    let data_segs = (beta * segs as f64).round() as u64;
    let n = a.geometry().n() as u64;
    let mut written = BTreeSet::new();
    for seg in 0..data_segs {
        let mut full = true;
        for i in 0..n {
            let lba = seg * n + i;
            match a.write_hinted(lba, &pattern(lba, 7), Some(SizeHint::Ratio(u))) {
                Ok(()) => {}
                Err(ArrayError::Device(_)) => full = false,
                Err(e) => panic!("fill: {e}"),
            }
        }
        if full {
            written.insert(seg);
        }
    }
    // Thresholds leave a few blocks between c_upper and the flash limit for
    // conversion transients. Accesses only reach RAID 5 segments, so the
    // hit-rate rule is switched off: it would only swap segments.
    let mut cfg = SchedulerConfig::for_geometry(a.geometry(), SIM_LOWER, SIM_UPPER);
    cfg.probabilistic = false;
    cfg.batch_size = 64;
    cfg.min_samples = u64::MAX;
    let mut s = Scheduler::for_array(cfg, &a);
    let mut idle = 0;
    for _ in 0..20_000 {
        for &seg in &written {
            if a.level(seg) == Level::R5 {
                s.record_access(seg, false);
            }
        }
        let t = s.tick(&mut a).expect("tick");
        if t.promoted.is_empty() && t.demoted.is_empty() {
            idle += 1;
            if idle > 12 {
                break;
            }
        } else {
            idle = 0;
        }
    }
    if data_segs == 0 {
        return 0.0;
    }
    a.raid10_count() as f64 / data_segs as f64
}

fn criterion_agreement(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for alpha_exp in [1.2, 1.5, 1.8] {
        for beta in [0.8, 0.9, 1.0] {
            for u in [1.5, 1.8, 2.2] {
                let model = raid10_fraction(&ModelParams::linked(3, alpha_exp, beta, u)).raid10_fraction;
                let sim = simulated_coverage(alpha_exp, beta, u);
                let d = (sim - model).abs();
                if d >= worst.0 {
                    worst = (d, format!("a_exp {alpha_exp} beta {beta} u {u}: sim {sim:.4} model {model:.4}"));
                }
            }
        }
    }
    let el = t0.elapsed();
    let ok = worst.0 <= AGREEMENT_ABS_TOL && el < AGREEMENT_BUDGET;
    line(
        out,
        "3",
        "model-simulator agreement",
        ok,
        format!("max |diff| {:.4} at {}; {:.1}s", worst.0, worst.1, el.as_secs_f64()),
    );
}

// 4 -------------------------------------------------------------------------

fn crash_array() -> (ElasticArray, Vec<Block>) {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 64 * 4096,
        alpha_exp: 1.0,
        journal_fraction: 0.05,
        compress_mode: CompressMode::modeled(2.0),
        migration_workers: 1,
        ..ArrayConfig::default()
    })
    .expect("array");
    let data: Vec<Block> = (0..a.user_blocks()).map(|l| pattern(l, (l % 200) as u8 + 1)).collect();
    for (l, b) in data.iter().enumerate() {
        a.write(l as u64, b).expect("fill");
    }
    a.flush().expect("flush");
    for seg in [9, 20, 41] {
        a.promote_segment(seg).expect("promote");
    }
    (a, data)
}

fn all_reads_match(a: &ElasticArray, data: &[Block]) -> Result<(), String> {
    for (l, b) in data.iter().enumerate() {
        match a.read(l as u64) {
            Ok(got) if &got == b => {}
            Ok(_) => return Err(format!("lba {l} mismatch")),
            Err(e) => return Err(format!("lba {l}: {e}")),
        }
    }
    Ok(())
}

/// Crashes one conversion after `k` mutations, loses `device` either before
/// or after recovery, and checks levels, data and scrub. Returns whether the
/// conversion crashed.
fn crash_case(dir: Direction, seg: u64, k: u64, device: usize, before_recovery: bool) -> Result<bool, String> {
    let (mut a, data) = crash_array();
    let from = a.level(seg);
    a.faults().arm(k);
    let res = match dir {
        Direction::Promote => a.promote_segment(seg),
        Direction::Demote => a.demote_segment(seg),
    };
    let crashed = a.faults().crashed();
    a.faults().disarm();
    if !crashed {
        res.map_err(|e| format!("conversion failed without crash: {e}"))?;
    }
    if before_recovery {
        a.devices()[device].set_state(DeviceState::Offline);
    }
    let (mut a, _) = a.reopen().map_err(|e| format!("recovery: {e}"))?;
    let level = a.level(seg);
    if level != from && level != dir.target() {
        return Err(format!("level {level:?}"));
    }
    if !crashed && level != dir.target() {
        return Err("completed conversion not durable".into());
    }
    if !before_recovery {
        if !a.scrub().map_err(|e| e.to_string())?.is_clean() {
            return Err("scrub after recovery".into());
        }
        all_reads_match(&a, &data)?;
        a.set_offline(device).map_err(|e| e.to_string())?;
    }
    all_reads_match(&a, &data).map_err(|e| format!("degraded: {e}"))?;
    a.set_online(device).map_err(|e| e.to_string())?;
    if !a.scrub().map_err(|e| e.to_string())?.is_clean() {
        return Err("scrub after rejoin".into());
    }
    all_reads_match(&a, &data)?;
    let (a, _) = a.reopen().map_err(|e| format!("second recovery: {e}"))?;
    if a.level(seg) != level {
        return Err("level changed on clean reopen".into());
    }
    all_reads_match(&a, &data)?;
    Ok(crashed)
}

fn criterion_conversion_safety(out: &mut Vec<Outcome>) {
    let t0 = Instant::now();
    let mut cases = 0;
    let mut failures = Vec::new();
    for (dir, seg) in [(Direction::Promote, 12u64), (Direction::Demote, 20u64)] {
        for before in [false, true] {
            for device in 0..4 {
                let mut k = 0;
                loop {
                    cases += 1;
                    match crash_case(dir, seg, k, device, before) {
                        Ok(true) => k += 1,
                        Ok(false) => break,
                        Err(e) => {
                            failures.push(format!("{dir:?} k={k} dev={device} before={before}: {e}"));
                            k += 1;
                            if k > 200 {
                                break;
                            }
                        }
                    }
                }
            }
        }
    }
    let el = t0.elapsed();
    let ok = failures.is_empty() && el < CRASH_BUDGET;
    let first = failures.first().cloned().unwrap_or_default();
    line(
        out,
        "4",
        "conversion crash safety",
        ok,
        format!("{cases} cases, {} failures {first}; {:.1}s", failures.len(), el.as_secs_f64()),
    );
}

// 5 -------------------------------------------------------------------------

fn segment_consistent(a: &ElasticArray, seg: u64) -> bool {
    let lba = a.geometry().slot_lba(seg, 0);
    let mut acc = [0u8; BLOCK_SIZE];
    for d in a.devices() {
        xor_into(&mut acc, &d.inspect(lba).expect("inspect"));
    }
    acc.iter().all(|&b| b == 0)
}

fn write_hole_case(k: u64) -> Result<bool, String> {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 64 * 4096,
        alpha_exp: 1.0,
        journal_fraction: 0.1,
        compress_mode: CompressMode::modeled(2.0),
        migration_workers: 1,
        ..ArrayConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut data: Vec<Block> = (0..a.user_blocks()).map(|l| pattern(l, 1)).collect();
    for (l, b) in data.iter().enumerate() {
        a.write(l as u64, b).map_err(|e| e.to_string())?;
    }
    a.flush().map_err(|e| e.to_string())?;
    for seg in [3, 4] {
        a.promote_segment(seg).map_err(|e| e.to_string())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cap = a.journal().capacity_records() as usize;
    for i in 0..cap.saturating_sub(2) {
        let lba = if i % 3 == 0 { 10 + i as u64 % 4 } else { rng.gen_range(0..a.user_blocks()) };
        let mut b = [0u8; BLOCK_SIZE];
        rng.fill_bytes(&mut b);
        a.write(lba, &b).map_err(|e| e.to_string())?;
        data[lba as usize] = b;
    }
    a.faults().arm(k);
    let flushed = a.flush();
    let crashed = a.faults().crashed();
    a.faults().disarm();
    if !crashed {
        flushed.map_err(|e| e.to_string())?;
    }
    let g = a.geometry().clone();
    let mut durable = Journal::new(g.devices, g.journal_base(), g.journal_rows, None);
    durable.replay(a.devices()).map_err(|e| format!("replay: {e}"))?;
    let n = g.n() as u64;
    let covered: BTreeSet<u64> = durable.all_pending().iter().map(|r| r.user_lba / n).collect();
    for seg in 0..g.segment_count {
        if a.level(seg) == Level::R5 && !segment_consistent(&a, seg) && !covered.contains(&seg) {
            return Err(format!("segment {seg} parity stale with no journal record"));
        }
    }
    let (a, _) = a.reopen().map_err(|e| format!("recovery: {e}"))?;
    if !a.scrub().map_err(|e| e.to_string())?.is_clean() {
        return Err("scrub after recovery".into());
    }
    all_reads_match(&a, &data)?;
    Ok(crashed)
}

fn criterion_write_hole(out: &mut Vec<Outcome>) {
    let mut cases = 0;
    let mut failures = Vec::new();
    let mut k = 0;
    loop {
        cases += 1;
        match write_hole_case(k) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => failures.push(format!("k={k}: {e}")),
        }
        k += 1;
        if k > 2_000 {
            failures.push("migration never completed".into());
            break;
        }
    }
    let first = failures.first().cloned().unwrap_or_default();
    line(
        out,
        "5",
        "write hole",
        failures.is_empty(),
        format!("{cases} crash points, {} failures {first}", failures.len()),
    );
}

// 6 -------------------------------------------------------------------------

fn criterion_parity(out: &mut Vec<Outcome>) {
    let corpus = synthetic_corpus(PARITY_STRIPES * 3, 3.0, 2024).expect("corpus");
    let e = parity_ratio_experiment(&corpus, 3, 20).expect("experiment");
    let h = &e.histogram;
    let cu = RatioHistogram::centroid(&h.user_counts, &h.edges);
    let cp = RatioHistogram::centroid(&h.parity_counts, &h.edges);
    let ok = e.stripes >= PARITY_STRIPES && e.parity_mean < e.user_mean && e.p_value < PARITY_P_MAX && cp < cu;
    line(
        out,
        "6",
        "parity compressibility",
        ok,
        format!(
            "{} stripes: user mean {:.3}, parity mean {:.3}, p={:.2e}",
            e.stripes, e.user_mean, e.parity_mean, e.p_value
        ),
    );
    match std::env::var("ERAID_CORPUS") {
        Ok(paths) => {
            let mut bytes = Vec::new();
            for p in paths.split(':').filter(|p| !p.is_empty()) {
                bytes.extend(std::fs::read(p).unwrap_or_default());
            }
            match parity_ratio_experiment(&bytes, 3, 20) {
                Ok(e) => {
                    let h = &e.histogram;
                    let cu = RatioHistogram::centroid(&h.user_counts, &h.edges);
                    let cp = RatioHistogram::centroid(&h.parity_counts, &h.edges);
                    line(
                        out,
                        "6b",
                        "parity histogram (corpus)",
                        cp < cu,
                        format!("user centroid {cu:.3}, parity centroid {cp:.3}"),
                    );
                }
                Err(err) => line(out, "6b", "parity histogram (corpus)", false, err.to_string()),
            }
        }
        Err(_) => println!("SKIP 6b  parity histogram (corpus)    set ERAID_CORPUS=file[:file] to run"),
    }
}

// 7 -------------------------------------------------------------------------

fn criterion_scheduler(out: &mut Vec<Outcome>) {
    let mut notes = Vec::new();
    let mut ok = true;

    // beta, h, raid10 segments, segments, expected
    let table = [
        (0.25, 1.5, 200, 1000, true),
        (0.30, 1.5, 200, 1000, false),
        (0.35, 1.5, 200, 1000, false),
        (0.00, 1.5, 0, 1000, false),
        (0.10, 2.0, 100, 1000, true),
        (0.90, 1.2, 1000, 1000, true),
        (1.00, 1.0, 1000, 1000, false),
        (0.49, 1.0, 500, 1000, true),
    ];
    let tt = table.iter().all(|&(b, h, r, s, want)| proactive_trigger(b, h, r, s) == want);
    let mut gate = Scheduler::new(SchedulerConfig::default(), 10, 4);
    for _ in 0..9_999 {
        gate.record_access(0, false);
    }
    let before = gate.proactive_check(5, 10);
    gate.record_access(0, false);
    let gated = !before && gate.proactive_check(5, 10);
    ok &= tt && gated;
    notes.push(format!("truth table {}", if tt && gated { "exact" } else { "MISMATCH" }));

    let sched = |refs: &[u64], r10: bool| {
        let mut s = Scheduler::new(SchedulerConfig::default(), 8, 4);
        for &r in refs {
            s.record_access(r, r10);
        }
        s
    };
    let mut s = sched(&[0, 2, 3, 6], true);
    let t1 = s.select_demotion_candidates(3, |_| true);
    let t2 = s.select_demotion_candidates(3, |_| true);
    let mut s = sched(&[3, 5], true);
    let t3 = s.select_demotion_candidates(2, |x| x % 2 == 1);
    let mut s = sched(&[0, 1, 2, 3, 4, 5, 6, 7], true);
    let t4 = s.select_demotion_candidates(2, |_| true);
    let mut s = sched(&[2], true);
    let t5 = s.select_demotion_candidates(3, |x| x == 2);
    let mut s = sched(&[1, 4, 6], false);
    let p1 = s.select_promotion_candidates(2, |_| true);
    let p2 = s.select_promotion_candidates(2, |_| true);
    let traces = t1 == [1, 4, 5]
        && t2 == [7, 0, 1]
        && t3 == [1, 7]
        && t4 == [0, 1]
        && t5 == [2]
        && p1 == [1, 4]
        && p2 == [6, 1];
    ok &= traces;
    notes.push(format!(
        "clock traces {}",
        if traces { "match".to_string() } else { format!("{t1:?} {t2:?} {t3:?} {t4:?} {t5:?} {p1:?} {p2:?}") }
    ));

    let mut worst: f64 = 0.0;
    let cases = [
        (Direction::Promote, 1.5, 1.0, 3.0),
        (Direction::Promote, 2.7, 1.0, 3.0),
        (Direction::Demote, 2.0, 1.2, 3.0),
        (Direction::Demote, 4.0, 1.0, 4.0),
    ];
    let mut s = Scheduler::new(
        SchedulerConfig {
            seed: 31,
            ..SchedulerConfig::default()
        },
        8,
        4,
    );
    for (dir, r, lo, hi) in cases {
        let p = acceptance_probability(dir, Some(r), lo, hi);
        let hits = (0..ACCEPT_TRIALS).filter(|_| s.probabilistic_accept(dir, Some(r), lo, hi)).count();
        worst = worst.max((hits as f64 / ACCEPT_TRIALS as f64 - p).abs());
    }
    ok &= worst <= ACCEPT_TOL;
    notes.push(format!("acceptance max dev {worst:.4}"));

    let (fix, detail) = autonomous_fixpoint();
    ok &= fix;
    notes.push(detail);
    line(out, "7", "scheduler semantics", ok, notes.join("; "));
}

fn autonomous_fixpoint() -> (bool, String) {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 64 * 4096,
        alpha_exp: 1.0,
        journal_fraction: 0.0,
        compress_mode: CompressMode::modeled(1.0),
        parity_ratio: ParityRatio::Fixed(1.0),
        ..ArrayConfig::default()
    })
    .expect("array");
    let n = a.geometry().n();
    for lba in 0..a.user_blocks() {
        let seg = lba / n as u64;
        let ratio = [4.0, 2.0, 3.5, 1.2][seg as usize % 4];
        a.write_hinted(lba, &pattern(lba, 3), Some(SizeHint::Ratio(ratio))).expect("fill");
    }
    let rule = |a: &ElasticArray, seg: u64| {
        let r = a.segment_ratios(seg).expect("ratios");
        matches!((r.alpha_usr, r.alpha_pty), (Some(u), Some(p)) if autonomous_rule(n, u, p))
    };
    let expected: Vec<u64> = (0..a.segment_count()).filter(|&s| rule(&a, s)).collect();
    // Conversions are segment-local, so each delta holds whatever order the scan uses.
    let monotone = expected
        .iter()
        .all(|&seg| a.promote_delta(seg).expect("delta").iter().sum::<i64>() <= 0);
    let before: u64 = a.device_usage().iter().sum();
    let mut s = Scheduler::for_array(SchedulerConfig::default(), &a);
    let done = s.autonomous_scan(&mut a).expect("scan");
    let monotone = monotone && done == expected && a.device_usage().iter().sum::<u64>() <= before;
    let again = s.autonomous_scan(&mut a).expect("scan");
    let fix = (0..a.segment_count()).all(|seg| a.level(seg) == Level::R10 || !rule(&a, seg));
    let ok = !expected.is_empty() && monotone && again.is_empty() && fix;
    (
        ok,
        format!(
            "autonomous {} promoted, fixpoint {}, usage non-increasing {}",
            expected.len(),
            fix && again.is_empty(),
            monotone
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn throttle_array() -> ElasticArray {
    let mut a = ElasticArray::create(ArrayConfig {
        devices: 4,
        flash_capacity_bytes: 2048 * 4096,
        alpha_exp: 1.0,
        journal_fraction: 0.0,
        compress_mode: CompressMode::modeled(2.0),
        ..ArrayConfig::default()
    })
    .expect("array");
    prefill(&mut a, None).expect("prefill");
    a
}

fn round_trip_tasks(segments: u64, total: usize) -> Vec<ConversionTask> {
    let mut v = Vec::with_capacity(total);
    let mut round = 0;
    while v.len() < total {
        let dir = if round % 2 == 0 { Direction::Promote } else { Direction::Demote };
        for s in 0..segments {
            if v.len() == total {
                break;
            }
            v.push(ConversionTask::new(s, dir));
        }
        round += 1;
    }
    v
}

fn criterion_throttle(out: &mut Vec<Outcome>) {
    let mut ok = true;
    let mut notes = Vec::new();
    for mbps in [100u64, 200, 400] {
        let cap = mbps * 1_000_000;
        let mut a = throttle_array();
        let task_bytes = (a.geometry().n() * BLOCK_SIZE) as f64;
        let total = ((cap as f64 * THROTTLE_SECONDS) / task_bytes).ceil() as usize;
        // Whole promote/demote rounds so every task finds its segment at the right level.
        let segs = a.segment_count();
        let total = total.div_ceil(segs as usize) * segs as usize;
        let tasks = round_trip_tasks(segs, total);
        let r = run_conversion_workers(
            &mut a,
            &tasks,
            ThrottleConfig {
                max_bytes_per_sec: Some(cap),
                worker_count: 24,
            },
            CostModel::default(),
        );
        let peak = r.max_window_bytes(1.0) as f64;
        let good = r.failed == 0 && peak <= THROTTLE_OVERSHOOT * cap as f64;
        ok &= good;
        notes.push(format!(
            "{mbps}MB/s: peak 1s {:.1}MB, avg {:.1}MB/s",
            peak / 1e6,
            r.throughput_bps / 1e6
        ));
    }
    let mut tp = Vec::new();
    for workers in [8, 24] {
        let mut a = throttle_array();
        let tasks = round_trip_tasks(a.segment_count(), a.segment_count() as usize * 2);
        let r = run_conversion_workers(
            &mut a,
            &tasks,
            ThrottleConfig {
                max_bytes_per_sec: None,
                worker_count: workers,
            },
            CostModel::default(),
        );
        tp.push(r.throughput_bps);
    }
    ok &= tp[1] > tp[0];
    notes.push(format!("8 workers {:.0}MB/s < 24 workers {:.0}MB/s", tp[0] / 1e6, tp[1] / 1e6));
    line(out, "8", "throttling and scaling", ok, notes.join("; "));
}

// 9 -------------------------------------------------------------------------

fn criterion_skew(out: &mut Vec<Outcome>) {
    let setup = AccuracySetup::default();
    let cells = classification_accuracy_experiment(&setup).expect("experiment");
    let cost = |a: Accuracy, c: f64| {
        cells
            .iter()
            .find(|x| x.accuracy == a && x.coverage == c)
            .map(|x| x.cost_per_write)
            .expect("cell")
    };
    let mut ok = true;
    let mut decreasing = true;
    for a in [Accuracy::Random, Accuracy::Fraction(0.5), Accuracy::Fraction(0.75), Accuracy::Fraction(1.0)] {
        for w in COVERAGE_GRID.windows(2) {
            decreasing &= cost(a, w[1]) < cost(a, w[0]);
        }
    }
    let gap = |c| cost(Accuracy::Fraction(0.5), c) - cost(Accuracy::Fraction(1.0), c);
    let (g2, g8) = (gap(0.2), gap(0.8));
    let oracle = cells.iter().map(|c| rel(c.cost_per_write, c.expected_cost)).fold(0.0, f64::max);
    let degraded: Vec<f64> = [0.0, 0.2, 0.4, 0.8, 1.0]
        .iter()
        .map(|&c| degraded_read_cost(&setup, c, 1).expect("degraded"))
        .collect();
    let deg_ok = degraded.windows(2).all(|w| w[1] < w[0]);
    ok &= decreasing && g8 < g2 && oracle <= COST_REL_TOL && deg_ok;
    line(
        out,
        "9",
        "skew benefit ordering",
        ok,
        format!(
            "cost decreasing {decreasing}; gap@0.2 {g2:.3} > gap@0.8 {g8:.3}; max oracle dev {:.2}%; degraded read cost {:?}",
            oracle * 100.0,
            degraded.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

fn main() {
    let t0 = Instant::now();
    let mut out = Vec::new();
    criterion_amplification(&mut out);
    criterion_anchors(&mut out);
    criterion_agreement(&mut out);
    criterion_conversion_safety(&mut out);
    criterion_write_hole(&mut out);
    criterion_parity(&mut out);
    criterion_scheduler(&mut out);
    criterion_throttle(&mut out);
    criterion_skew(&mut out);
    let failed: Vec<&Outcome> = out.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} passed, {} failed ({:.1}s)",
        out.len() - failed.len(),
        failed.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed {} {}: {}", f.id, f.name, f.detail);
        }
        std::process::exit(1);
    }
}
