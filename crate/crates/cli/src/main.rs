//! `eraid`: command-line front end for the elastic RAID simulator.
//!
//! JSON or CSV goes to stdout, a one-line human summary to stderr. Failures
//! exit with 2 (ConfigInvalid), 3 (DeviceError) or 4 (Infeasible).

mod commands;
mod error;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "eraid", version, about = "Elastic RAID 5/10 over simulated compressing SSDs")]
pub struct Cli {
    /// Array config file (key = value).
    #[arg(long, global = true, env = "ERAID_CONFIG")]
    pub config: Option<PathBuf>,
    /// Keep the array in DIR as device images between invocations.
    #[arg(long, global = true, value_name = "DIR")]
    pub persist: Option<PathBuf>,
    /// Seed for every randomized choice; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Format a new array and print its geometry.
    Mkraid(MkraidArgs),
    /// Run a synthetic workload and report amplification.
    Bench(BenchArgs),
    /// Convert segments between RAID 5 and RAID 10.
    Convert(ConvertArgs),
    /// Take a device offline or bring it back.
    Degrade(DegradeArgs),
    /// Check parity, mirrors and trimmed positions without changing anything.
    Scrub,
    /// Print array statistics as JSON.
    Stats,
    /// Evaluate the coverage model over a parameter grid as CSV.
    ModelSweep(SweepArgs),
    /// Compare data and parity compressibility over a corpus.
    ParityHist(HistArgs),
}

#[derive(Debug, Args, Default)]
pub struct ArrayArgs {
    #[arg(long)]
    pub devices: Option<usize>,
    /// Per-device flash, e.g. 1GiB.
    #[arg(long)]
    pub flash: Option<String>,
    #[arg(long)]
    pub alpha_exp: Option<f64>,
    /// deflate, deflate:LEVEL or modeled:RATIO.
    #[arg(long)]
    pub compress: Option<String>,
    #[arg(long)]
    pub journal_fraction: Option<f64>,
    /// natural, linked or a fixed ratio.
    #[arg(long)]
    pub parity_ratio: Option<String>,
    /// r5 or r10.
    #[arg(long)]
    pub initial_level: Option<String>,
}

#[derive(Debug, Args)]
pub struct MkraidArgs {
    #[command(flatten)]
    pub array: ArrayArgs,
    /// Overwrite an existing array in the persist directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    pub ops: u64,
    /// Read:write mix, e.g. 70:30.
    #[arg(long, default_value = "70:30")]
    pub rw: String,
    /// Access distribution: uniform or 8020.
    #[arg(long, default_value = "uniform")]
    pub dist: String,
    /// Leading share of user space that is accessed.
    #[arg(long, default_value_t = 1.0)]
    pub span: f64,
    /// Target compression ratio of written data.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Write every user block once before measuring.
    #[arg(long)]
    pub prefill: bool,
    #[arg(long, default_value_t = 1)]
    pub submitters: usize,
    /// Run the conversion scheduler alongside the workload.
    #[arg(long)]
    pub scheduler: bool,
    /// Take this device offline before the run (in-memory arrays).
    #[arg(long)]
    pub offline: Option<usize>,
    /// Ops between coverage samples; 0 picks about 100 samples.
    #[arg(long, default_value_t = 0)]
    pub sample_every: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Segments to promote, e.g. 0-9,12.
    #[arg(long)]
    pub promote: Option<String>,
    /// Segments to demote, e.g. 0-9,12.
    #[arg(long)]
    pub demote: Option<String>,
    /// Convert every segment to this level (r5 or r10).
    #[arg(long)]
    pub all: Option<String>,
    /// Promote every segment whose data is cheaper mirrored than with parity.
    #[arg(long)]
    pub auto: bool,
    /// Run this many scheduler rounds.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Conversion bandwidth cap in MB/s; 0 is unthrottled.
    #[arg(long)]
    pub throttle_mbps: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write progress events as line-delimited JSON.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub device: usize,
    /// Bring the device back online and resynchronize it.
    #[arg(long)]
    pub restore: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, conflicts_with = "fig8")]
    pub fig7: bool,
    #[arg(long)]
    pub fig8: bool,
    /// Data strips per stripe, comma separated.
    #[arg(long, default_value = "3")]
    pub n: String,
    /// Values or START:END:STEP.
    #[arg(long, default_value = "1.4")]
    pub alpha_exp: String,
    #[arg(long, default_value = "1.0")]
    pub beta: String,
    #[arg(long, default_value = "1:3:0.1")]
    pub usr: String,
    /// `linked` or parity ratios.
    #[arg(long, default_value = "linked")]
    pub pty: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    /// Input file, chunked into 4KB strips.
    #[arg(long, conflicts_with = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Generate this many blocks instead of reading a corpus.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Target ratio of synthetic blocks.
    #[arg(long, default_value_t = 3.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Histogram CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eraid: {e}");
            e.exit_code()
        }
    }
}
