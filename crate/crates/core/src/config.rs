//! Plain-text `key = value` array configuration.
//!
//! Blank lines and `#` comments are ignored. Sizes accept `KiB`/`MiB`/`GiB`/
//! `TiB` (and `K`/`M`/`G`/`T`) suffixes; `KB`/`MB`/`GB` are decimal.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::convert::ThrottleConfig;
use crate::czdev::CompressMode;
use crate::iopath::{ArrayConfig, ParityRatio};
use crate::layout::{ArrayGeometry, Level};
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Parses `1GiB`, `512M`, `4096`, `2GB`.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let v: f64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" => 1 << 10,
        "m" | "mib" => 1 << 20,
        "g" | "gib" => 1 << 30,
        "t" | "tib" => 1 << 40,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        "tb" => 1_000_000_000_000,
        other => return Err(format!("unknown size unit {other:?}")),
    };
    Ok((v * mult as f64).round() as u64)
}

pub fn parse_level(s: &str) -> Result<Level, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "r5" | "raid5" | "5" => Ok(Level::R5),
        "r10" | "raid10" | "10" => Ok(Level::R10),
        other => Err(format!("level must be r5 or r10, got {other:?}")),
    }
}

/// `deflate`, `deflate:LEVEL` or `modeled:RATIO`.
pub fn parse_compress(s: &str) -> Result<CompressMode, String> {
    let s = s.trim();
    let (name, arg) = s.split_once(':').unwrap_or((s, ""));
    match name {
        "deflate" => {
            let mut m = CompressMode::deflate();
            if !arg.is_empty() {
                m.params.deflate_level = arg.parse().map_err(|_| format!("bad deflate level {arg:?}"))?;
            }
            Ok(m)
        }
        "modeled" => {
            let r = if arg.is_empty() { 1.0 } else { arg.parse().map_err(|_| format!("bad ratio {arg:?}"))? };
            if !(r >= 1.0) {
                return Err(format!("modeled ratio must be >= 1, got {r}"));
            }
            Ok(CompressMode::modeled(r))
        }
        other => Err(format!("unknown compressor {other:?}")),
    }
}

fn compress_text(m: &CompressMode) -> String {
    if m.name == "modeled" {
        format!("modeled:{}", m.params.modeled_default_ratio)
    } else {
        format!("{}:{}", m.name, m.params.deflate_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfigFile {
    pub array: ArrayConfig,
    /// Promotion threshold as a share of per-device segment flash.
    pub lower: f64,
    /// Demotion threshold as a share of per-device segment flash.
    pub upper: f64,
    pub h: f64,
    pub sample_period: u64,
    pub batch_size: usize,
    pub probabilistic: bool,
    /// Conversion throttle in bytes per second; `None` is unthrottled.
    pub throttle_bytes_per_sec: Option<u64>,
    pub conversion_workers: usize,
    pub seed: u64,
}

impl Default for ArrayConfigFile {
    fn default() -> Self {
        let s = SchedulerConfig::default();
        Self {
            array: ArrayConfig::default(),
            lower: SchedulerConfig::DEFAULT_LOWER,
            upper: SchedulerConfig::DEFAULT_UPPER,
            h: s.h,
            sample_period: s.sample_period,
            batch_size: s.batch_size,
            probabilistic: s.probabilistic,
            throttle_bytes_per_sec: None,
            conversion_workers: ThrottleConfig::default().worker_count,
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse {v:?}")))
}

impl ArrayConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            c.set(i + 1, k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let a = &mut self.array;
        match key {
            "devices" => a.devices = num(key, v)?,
            "flash" | "flash_capacity" => a.flash_capacity_bytes = parse_size(v).map_err(|e| invalid(key, e))?,
            "alpha_exp" => a.alpha_exp = num(key, v)?,
            "strip_size" => a.strip_size = parse_size(v).map_err(|e| invalid(key, e))? as usize,
            "journal_fraction" => a.journal_fraction = num(key, v)?,
            "compress" => a.compress_mode = parse_compress(v).map_err(|e| invalid(key, e))?,
            "parity_ratio" => a.parity_ratio = v.parse::<ParityRatio>().map_err(|e| invalid(key, e))?,
            "migration_workers" => a.migration_workers = num(key, v)?,
            "migration_batch" => a.migration_batch = num(key, v)?,
            "initial_level" => a.initial_level = parse_level(v).map_err(|e| invalid(key, e))?,
            "lower" => self.lower = num(key, v)?,
            "upper" => self.upper = num(key, v)?,
            "h" => self.h = num(key, v)?,
            "sample_period" => self.sample_period = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "probabilistic" => self.probabilistic = num(key, v)?,
            "throttle_mbps" => {
                let mb: f64 = num(key, v)?;
                self.throttle_bytes_per_sec = (mb > 0.0).then(|| (mb * 1e6) as u64);
            }
            "conversion_workers" => self.conversion_workers = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Checks every downstream constraint, naming the first offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.array.validate().map_err(|e| invalid("array", e.to_string()))?;
        if !(0.0 < self.lower && self.lower < self.upper) {
            return Err(invalid("lower", format!("must be in (0, upper={}), got {}", self.upper, self.lower)));
        }
        if self.upper >= 1.0 {
            return Err(invalid("upper", format!("must be below 1 (C_u < C_flash), got {}", self.upper)));
        }
        if self.conversion_workers == 0 {
            return Err(invalid("conversion_workers", "must be >= 1"));
        }
        if self.sample_period == 0 {
            return Err(invalid("sample_period", "must be >= 1"));
        }
        let g = self.array.geometry().map_err(|e| invalid("array", e.to_string()))?;
        self.scheduler(&g)
            .validate(g.device_flash_bytes())
            .map_err(|e| invalid("scheduler", e))?;
        Ok(())
    }

    pub fn scheduler(&self, geometry: &ArrayGeometry) -> SchedulerConfig {
        SchedulerConfig {
            h: self.h,
            sample_period: self.sample_period,
            batch_size: self.batch_size,
            probabilistic: self.probabilistic,
            seed: self.seed,
            ..SchedulerConfig::for_geometry(geometry, self.lower, self.upper)
        }
    }

    pub fn throttle(&self) -> ThrottleConfig {
        ThrottleConfig {
            max_bytes_per_sec: self.throttle_bytes_per_sec,
            worker_count: self.conversion_workers,
        }
    }

    pub fn to_text(&self) -> String {
        let a = &self.array;
        let mut s = String::new();
        let level = match a.initial_level {
            Level::R5 => "r5",
            Level::R10 => "r10",
        };
        let _ = writeln!(s, "devices = {}", a.devices);
        let _ = writeln!(s, "flash = {}", a.flash_capacity_bytes);
        let _ = writeln!(s, "alpha_exp = {}", a.alpha_exp);
        let _ = writeln!(s, "strip_size = {}", a.strip_size);
        let _ = writeln!(s, "journal_fraction = {}", a.journal_fraction);
        let _ = writeln!(s, "compress = {}", compress_text(&a.compress_mode));
        let _ = writeln!(s, "parity_ratio = {}", a.parity_ratio);
        let _ = writeln!(s, "migration_workers = {}", a.migration_workers);
        let _ = writeln!(s, "migration_batch = {}", a.migration_batch);
        let _ = writeln!(s, "initial_level = {level}");
        let _ = writeln!(s, "lower = {}", self.lower);
        let _ = writeln!(s, "upper = {}", self.upper);
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "sample_period = {}", self.sample_period);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "probabilistic = {}", self.probabilistic);
        let mbps = self.throttle_bytes_per_sec.map_or(0.0, |b| b as f64 / 1e6);
        let _ = writeln!(s, "throttle_mbps = {mbps}");
        let _ = writeln!(s, "conversion_workers = {}", self.conversion_workers);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1GiB"), Ok(1 << 30));
        assert_eq!(parse_size("512M"), Ok(512 << 20));
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("2GB"), Ok(2_000_000_000));
        assert!(parse_size("3 parsecs").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = ArrayConfigFile::default();
        c.array.compress_mode = CompressMode::modeled(2.5);
        c.array.parity_ratio = ParityRatio::Fixed(1.25);
        c.throttle_bytes_per_sec = Some(200_000_000);
        c.seed = 77;
        let back = ArrayConfigFile::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_blanks() {
        let c = ArrayConfigFile::parse("# array\n\ndevices = 6 # wide\nflash=1MiB\n").unwrap();
        assert_eq!((c.array.devices, c.array.flash_capacity_bytes), (6, 1 << 20));
    }

    #[test]
    fn named_errors() {
        let e = ArrayConfigFile::parse("upper = 1.0").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "upper"), "{e}");
        let e = ArrayConfigFile::parse("lower = 0.95").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "lower"), "{e}");
        let e = ArrayConfigFile::parse("devices = 1").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "array"), "{e}");
        let e = ArrayConfigFile::parse("colour = blue").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 1,
                key: "colour".into()
            }
        );
        assert!(matches!(ArrayConfigFile::parse("devices 4"), Err(ConfigError::Syntax { line: 1, .. })));
    }
}
