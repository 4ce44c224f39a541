use std::fs;
use std::io::{self, Write};
use std::path::Path;

use eraid_core::bench::{self, DistributionRegistry, RatioRegion, WorkloadSpec};
use eraid_core::config::{parse_compress, parse_level, parse_size, ArrayConfigFile};
use eraid_core::convert::{run_conversion_workers, ConversionTask, CostModel, Direction, ProgressEvent};
use eraid_core::datagen::{self, RatioHistogram};
use eraid_core::iopath::{ArrayError, ElasticArray, ParityRatio, RecoveryReport};
use eraid_core::layout::Level;
use eraid_core::model::{linspace_step, ModelParams, ParitySweep, SweepSpec};
use eraid_core::scheduler::Scheduler;
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::store::{State, Store};
use crate::{ArrayArgs, BenchArgs, Cli, Command, ConvertArgs, DegradeArgs, HistArgs, MkraidArgs, SweepArgs};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Command::Mkraid(a) => mkraid(cli, a),
        Command::Bench(a) => bench_cmd(cli, a),
        Command::Convert(a) => convert(cli, a),
        Command::Degrade(a) => degrade(cli, a),
        Command::Scrub => scrub(cli),
        Command::Stats => stats(cli),
        Command::ModelSweep(a) => model_sweep(a),
        Command::ParityHist(a) => parity_hist(cli, a),
    }
}

/// Writes to stdout; a closed pipe (`eraid stats | head`) is not an error.
fn out(text: &str) {
    let mut o = io::stdout().lock();
    let _ = o.write_all(text.as_bytes()).and_then(|_| o.flush());
}

fn emit<T: Serialize>(v: &T) {
    out(&format!("{}\n", serde_json::to_string_pretty(v).expect("report serializes")));
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Device(format!("{}: {e}", path.display())))
}

fn file_config(cli: &Cli) -> Result<ArrayConfigFile, CliError> {
    match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            Ok(ArrayConfigFile::parse(&text)?)
        }
        None => Ok(ArrayConfigFile::default()),
    }
}

/// An opened array plus where (if anywhere) it lives on disk.
struct Session {
    cfg: ArrayConfigFile,
    array: ElasticArray,
    store: Option<Store>,
    state: State,
    recovery: Option<RecoveryReport>,
}

impl Session {
    fn open(cli: &Cli) -> Result<Self, CliError> {
        match &cli.persist {
            Some(dir) => {
                let store = Store::new(dir);
                if !store.exists() {
                    return Err(CliError::config(format!(
                        "no array in {}; create one with `eraid --persist {} mkraid`",
                        dir.display(),
                        dir.display()
                    )));
                }
                let mut cfg = store.load_config()?;
                if let Some(s) = cli.seed {
                    cfg.seed = s;
                }
                let (array, recovery, state) = store.open(&cfg)?;
                Ok(Self {
                    cfg,
                    array,
                    store: Some(store),
                    state,
                    recovery: Some(recovery),
                })
            }
            None => {
                let mut cfg = file_config(cli)?;
                if let Some(s) = cli.seed {
                    cfg.seed = s;
                }
                let array = ElasticArray::create(cfg.array.clone())?;
                Ok(Self {
                    cfg,
                    array,
                    store: None,
                    state: State::default(),
                    recovery: None,
                })
            }
        }
    }

    fn save(&self) -> Result<(), CliError> {
        match &self.store {
            Some(s) => s.save(&self.array, &self.state),
            None => Ok(()),
        }
    }
}

fn apply_array_args(cfg: &mut ArrayConfigFile, a: &ArrayArgs) -> Result<(), CliError> {
    let c = &mut cfg.array;
    if let Some(d) = a.devices {
        c.devices = d;
    }
    if let Some(f) = &a.flash {
        c.flash_capacity_bytes = parse_size(f).map_err(|e| CliError::config(format!("--flash: {e}")))?;
    }
    if let Some(x) = a.alpha_exp {
        c.alpha_exp = x;
    }
    if let Some(m) = &a.compress {
        c.compress_mode = parse_compress(m).map_err(|e| CliError::config(format!("--compress: {e}")))?;
    }
    if let Some(j) = a.journal_fraction {
        c.journal_fraction = j;
    }
    if let Some(p) = &a.parity_ratio {
        c.parity_ratio = p
            .parse::<ParityRatio>()
            .map_err(|e| CliError::config(format!("--parity-ratio: {e}")))?;
    }
    if let Some(l) = &a.initial_level {
        c.initial_level = parse_level(l).map_err(|e| CliError::config(format!("--initial-level: {e}")))?;
    }
    Ok(())
}

fn mkraid(cli: &Cli, a: &MkraidArgs) -> Result<(), CliError> {
    let mut cfg = file_config(cli)?;
    apply_array_args(&mut cfg, &a.array)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let store = cli.persist.as_deref().map(Store::new);
    if let Some(s) = &store {
        if s.exists() && !a.force {
            return Err(CliError::config(format!(
                "{} already holds an array; pass --force to overwrite",
                s.config_path().display()
            )));
        }
    }
    let array = ElasticArray::create(cfg.array.clone())?;
    if let Some(s) = &store {
        s.create(&cfg, &array)?;
    }
    let g = array.geometry();
    emit(&json!({
        "devices": g.devices,
        "data_strips": g.n(),
        "flash_capacity_bytes": g.flash_capacity_bytes,
        "device_flash_bytes": g.device_flash_bytes(),
        "alpha_exp": g.alpha_exp,
        "segments": g.segment_count,
        "user_blocks": g.user_blocks(),
        "user_capacity_bytes": g.user_capacity_bytes,
        "journal_rows": g.journal_rows,
        "raid10_segments": array.raid10_count(),
        "persisted": cli.persist.as_ref().map(|p| p.display().to_string()),
    }));
    eprintln!(
        "mkraid: {} devices, {} segments, {} bytes user capacity",
        g.devices, g.segment_count, g.user_capacity_bytes
    );
    Ok(())
}

fn parse_rw(s: &str) -> Result<f64, CliError> {
    let bad = || CliError::config(format!("--rw expects READ:WRITE such as 70:30, got {s:?}"));
    let (r, w) = s.split_once(':').ok_or_else(bad)?;
    let r: f64 = r.trim().parse().map_err(|_| bad())?;
    let w: f64 = w.trim().parse().map_err(|_| bad())?;
    if r < 0.0 || w < 0.0 || r + w <= 0.0 {
        return Err(bad());
    }
    Ok(r / (r + w))
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<(), CliError> {
    let read_fraction = parse_rw(&a.rw)?;
    let mut s = Session::open(cli)?;
    if a.prefill {
        bench::prefill(&mut s.array, a.ratio)?;
    }
    if let Some(d) = a.offline {
        s.array.set_offline(d)?;
    }
    let spec = WorkloadSpec {
        op_count: a.ops,
        read_fraction,
        distribution: a.dist.clone(),
        lba_span: a.span,
        seed: s.cfg.seed,
        data_ratio_profile: a
            .ratio
            .map(|ratio| vec![RatioRegion { fraction: 1.0, ratio }])
            .unwrap_or_default(),
        submitters: a.submitters,
        sample_every: a.sample_every,
    };
    let mut sched = a
        .scheduler
        .then(|| Scheduler::for_array(s.cfg.scheduler(s.array.geometry()), &s.array));
    let report = bench::run_workload(&spec, &mut s.array, sched.as_mut(), &DistributionRegistry::builtin())?;
    s.array.flush()?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(p) = &a.report {
        write_file(p, &text)?;
    }
    out(&format!("{text}\n"));
    eprintln!(
        "bench: {} ops ({} reads, {} writes, {} failed) wa={:.3} ra={:.3} backend_cost={:.3} coverage={:.3}",
        report.ops,
        report.reads,
        report.writes,
        report.failed,
        report.wa,
        report.ra,
        report.backend_cost,
        s.array.coverage()
    );
    s.state.last_bench = Some(report);
    s.save()
}

/// `0-9,12,20` style segment lists.
fn parse_segments(s: &str, count: u64) -> Result<Vec<u64>, CliError> {
    let bad = |part: &str| CliError::config(format!("bad segment list entry {part:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((lo, hi)) => (lo.parse::<u64>(), hi.parse::<u64>()),
            None => (part.parse::<u64>(), part.parse::<u64>()),
        };
        let (lo, hi) = (lo.map_err(|_| bad(part))?, hi.map_err(|_| bad(part))?);
        if lo > hi || hi >= count {
            return Err(CliError::config(format!(
                "segment range {part:?} outside 0..{count}"
            )));
        }
        out.extend(lo..=hi);
    }
    Ok(out)
}

fn convert(cli: &Cli, a: &ConvertArgs) -> Result<(), CliError> {
    let mut s = Session::open(cli)?;
    if let Some(d) = s.array.offline_device() {
        return Err(CliError::Device(format!(
            "{}; restore device {d} first",
            ArrayError::ConversionDegraded
        )));
    }
    let count = s.array.segment_count();
    let mut tasks = Vec::new();
    if let Some(p) = &a.promote {
        tasks.extend(parse_segments(p, count)?.into_iter().map(|seg| ConversionTask::new(seg, Direction::Promote)));
    }
    if let Some(d) = &a.demote {
        tasks.extend(parse_segments(d, count)?.into_iter().map(|seg| ConversionTask::new(seg, Direction::Demote)));
    }
    if let Some(l) = &a.all {
        let target = parse_level(l).map_err(|e| CliError::config(format!("--all: {e}")))?;
        let dir = match target {
            Level::R10 => Direction::Promote,
            Level::R5 => Direction::Demote,
        };
        tasks.extend(
            (0..count)
                .filter(|&seg| s.array.level(seg) != target)
                .map(|seg| ConversionTask::new(seg, dir)),
        );
    }
    if tasks.is_empty() && !a.auto && a.ticks.is_none() {
        return Err(CliError::config(
            "nothing to convert; pass --promote, --demote, --all, --auto or --ticks",
        ));
    }
    let mut throttle = s.cfg.throttle();
    if let Some(mb) = a.throttle_mbps {
        throttle.max_bytes_per_sec = (mb > 0.0).then(|| (mb * 1e6) as u64);
    }
    if let Some(w) = a.workers {
        throttle.worker_count = w;
    }
    let workers = run_conversion_workers(&mut s.array, &tasks, throttle, CostModel::default());
    let mut sched = Scheduler::for_array(s.cfg.scheduler(s.array.geometry()), &s.array);
    let autonomous = if a.auto { sched.autonomous_scan(&mut s.array)? } else { Vec::new() };
    let (mut promoted, mut demoted) = (Vec::new(), Vec::new());
    for _ in 0..a.ticks.unwrap_or(0) {
        let t = sched.tick(&mut s.array)?;
        promoted.extend(t.promoted);
        demoted.extend(t.demoted);
    }
    if let Some(p) = &a.events {
        write_file(p, &workers.to_ndjson())?;
    }
    let out_of_space = workers.events.iter().any(|e| {
        matches!(e, ProgressEvent::Failed { error, .. } if error.contains("out of physical space"))
    });
    let summary = json!({
        "tasks": workers.tasks,
        "failed": workers.failed,
        "bytes": workers.bytes,
        "makespan_s": workers.makespan_s,
        "throughput_bps": workers.throughput_bps,
        "promote": workers.promote,
        "demote": workers.demote,
        "autonomous": autonomous,
        "scheduler": {
            "promoted": promoted,
            "demoted": demoted,
            "stats": sched.stats(),
        },
        "raid10_segments": s.array.raid10_count(),
        "coverage": s.array.coverage(),
    });
    emit(&summary);
    eprintln!(
        "convert: {} tasks done, {} failed, coverage {:.3}",
        workers.tasks + autonomous.len() + promoted.len() + demoted.len(),
        workers.failed,
        s.array.coverage()
    );
    s.state.last_convert = Some(summary);
    s.save()?;
    if out_of_space {
        return Err(CliError::Infeasible(
            "some promotions ran out of flash; demote cold segments or lower alpha_exp".into(),
        ));
    }
    Ok(())
}

fn degrade(cli: &Cli, a: &DegradeArgs) -> Result<(), CliError> {
    if cli.persist.is_none() {
        return Err(CliError::config(
            "degrade needs --persist DIR to have a lasting effect; use `bench --offline` for one-shot runs",
        ));
    }
    let mut s = Session::open(cli)?;
    let resynced = if a.restore {
        s.array.set_online(a.device)?
    } else {
        s.array.set_offline(a.device)?;
        0
    };
    emit(&json!({
        "mode": s.array.mode(),
        "offline_device": s.array.offline_device(),
        "resynced_segments": resynced,
        "dirty_segments": s.array.dirty_segments(),
    }));
    match s.array.offline_device() {
        Some(d) => eprintln!("degrade: device {d} offline; RAID 5 writes are rejected until restored"),
        None => eprintln!("degrade: all devices online, {resynced} segments resynchronized"),
    }
    s.save()
}

fn scrub(cli: &Cli) -> Result<(), CliError> {
    let s = Session::open(cli)?;
    let report = s.array.scrub()?;
    emit(&json!({
        "clean": report.is_clean(),
        "scrub": report,
        "recovery": s.recovery,
    }));
    eprintln!(
        "scrub: {} segments, {} skipped, {} parity / {} mirror mismatches, {} stray blocks",
        report.segments_checked,
        report.skipped_degraded,
        report.parity_mismatches.len(),
        report.mirror_mismatches.len(),
        report.stray_blocks.len()
    );
    Ok(())
}

fn stats(cli: &Cli) -> Result<(), CliError> {
    let s = Session::open(cli)?;
    let st = s.array.stats();
    eprintln!(
        "stats: {:?}, coverage {:.3} ({} of {} segments RAID 10)",
        st.mode, st.coverage, st.raid10_segments, st.segments
    );
    emit(&json!({
        "array": st,
        "dirty_segments": s.array.dirty_list(),
        "recovery": s.recovery,
        "last_bench": s.state.last_bench,
        "last_convert": s.state.last_convert,
    }));
    Ok(())
}

/// `a,b,c` or `START:END:STEP`.
fn parse_values(flag: &str, s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::config(format!("--{flag}: expected numbers or START:END:STEP, got {s:?}"));
    if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match parts[..] {
            [start, end, step] if step > 0.0 => Ok(linspace_step(start, end, step)),
            _ => Err(bad()),
        }
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    }
}

fn model_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let spec = if a.fig7 {
        SweepSpec::fig7()
    } else if a.fig8 {
        SweepSpec::fig8()
    } else {
        let n = a
            .n
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::config(format!("--n: expected integers, got {:?}", a.n)))?;
        let parity = if a.pty.trim() == "linked" {
            ParitySweep::Linked
        } else {
            ParitySweep::Fixed(parse_values("pty", &a.pty)?)
        };
        SweepSpec {
            n,
            alpha_exp: parse_values("alpha-exp", &a.alpha_exp)?,
            beta_util: parse_values("beta", &a.beta)?,
            alpha_usr: parse_values("usr", &a.usr)?,
            parity,
        }
    };
    let rows = spec.rows();
    for r in &rows {
        r.params
            .validate()
            .map_err(|e| CliError::config(format!("{e} (at {})", describe(&r.params))))?;
    }
    let csv = eraid_core::model::rows_to_csv(&rows);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => out(&csv),
    }
    let infeasible = rows.iter().filter(|r| !r.result.feasible).count();
    eprintln!("model-sweep: {} rows, {infeasible} infeasible", rows.len());
    Ok(())
}

fn describe(p: &ModelParams) -> String {
    format!(
        "n={} alpha_exp={} beta_util={} alpha_usr={} alpha_pty={}",
        p.n, p.alpha_exp, p.beta_util, p.alpha_usr, p.alpha_pty
    )
}

fn parity_hist(cli: &Cli, a: &HistArgs) -> Result<(), CliError> {
    let corpus = match (&a.corpus, a.synthetic) {
        (Some(p), _) => fs::read(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        (None, Some(blocks)) => datagen::synthetic_corpus(blocks, a.ratio, cli.seed.unwrap_or(0))?,
        (None, None) => return Err(CliError::config("pass --corpus FILE or --synthetic BLOCKS")),
    };
    let exp = datagen::parity_ratio_experiment(&corpus, a.n, a.bins)?;
    let h = &exp.histogram;
    let summary = json!({
        "n": exp.n,
        "stripes": exp.stripes,
        "user_mean": exp.user_mean,
        "parity_mean": exp.parity_mean,
        "user_centroid": RatioHistogram::centroid(&h.user_counts, &h.edges),
        "parity_centroid": RatioHistogram::centroid(&h.parity_counts, &h.edges),
        "p_value": exp.p_value,
    });
    match &a.out {
        Some(p) => {
            write_file(p, &h.to_csv())?;
            emit(&summary);
        }
        None => out(&h.to_csv()),
    }
    eprintln!(
        "parity-hist: {} stripes, user mean {:.3}, parity mean {:.3}, p = {:.3e}",
        exp.stripes, exp.user_mean, exp.parity_mean, exp.p_value
    );
    Ok(())
}
