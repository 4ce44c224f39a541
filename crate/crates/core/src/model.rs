//! Closed-form capacity model.
//!
//! Per stripe of `n` user strips, physical cost in strip units is
//! `c5 = n/alpha_usr + 1/alpha_pty` for RAID 5 and `c10 = 2n/alpha_usr` for
//! RAID 10. The array stores `beta_util * alpha_exp * n * C_flash` bytes of
//! user data on `(n+1) * C_flash` bytes of flash, so each stripe may use
//! `budget = (n+1) / (beta_util * alpha_exp)` strips on average.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub alpha_exp: f64,
    pub beta_util: f64,
    pub alpha_usr: f64,
    pub alpha_pty: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("n must be >= 1")]
    NoDataStrips,
    #[error("{0} must be >= 1, got {1}")]
    RatioBelowOne(&'static str, f64),
    #[error("beta_util must be in (0, 1], got {0}")]
    BadUtilization(f64),
}

/// Parity ratio tied to the user ratio: 1 when user data is incompressible,
/// 1.5 when it compresses 3:1.
pub fn linked_parity_ratio(alpha_usr: f64) -> f64 {
    1.0 + (alpha_usr - 1.0) / 4.0
}

impl ModelParams {
    pub fn linked(n: usize, alpha_exp: f64, beta_util: f64, alpha_usr: f64) -> Self {
        Self {
            n,
            alpha_exp,
            beta_util,
            alpha_usr,
            alpha_pty: linked_parity_ratio(alpha_usr),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 {
            return Err(ModelError::NoDataStrips);
        }
        for (name, v) in [
            ("alpha_exp", self.alpha_exp),
            ("alpha_usr", self.alpha_usr),
            ("alpha_pty", self.alpha_pty),
        ] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(ModelError::RatioBelowOne(name, v));
            }
        }
        if !(self.beta_util > 0.0 && self.beta_util <= 1.0) {
            return Err(ModelError::BadUtilization(self.beta_util));
        }
        Ok(())
    }

    pub fn c5(&self) -> f64 {
        self.n as f64 / self.alpha_usr + 1.0 / self.alpha_pty
    }

    pub fn c10(&self) -> f64 {
        2.0 * self.n as f64 / self.alpha_usr
    }

    pub fn budget(&self) -> f64 {
        (self.n + 1) as f64 / (self.beta_util * self.alpha_exp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub raid10_fraction: f64,
    /// Whether the cheapest level mix fits at all.
    pub feasible: bool,
    /// Blended ratio of an all-RAID-5 array, `(n+1)/c5`.
    pub alpha_avg: f64,
    /// User ratio at which every stripe fits as RAID 10.
    pub alpha_full: f64,
}

/// User ratio at which `c10 == budget`.
pub fn alpha_full(n: usize, alpha_exp: f64, beta_util: f64) -> f64 {
    2.0 * n as f64 * beta_util * alpha_exp / (n + 1) as f64
}

/// Largest RAID 10 share `x` with `x*c10 + (1-x)*c5 <= budget`.
pub fn raid10_fraction(p: &ModelParams) -> CoverageResult {
    let (c5, c10, budget) = (p.c5(), p.c10(), p.budget());
    let feasible = c5.min(c10) <= budget;
    let x = if c10 > c5 {
        ((budget - c5) / (c10 - c5)).clamp(0.0, 1.0)
    } else if budget >= c10 {
        1.0
    } else {
        0.0
    };
    CoverageResult {
        raid10_fraction: x,
        feasible,
        alpha_avg: (p.n + 1) as f64 / c5,
        alpha_full: alpha_full(p.n, p.alpha_exp, p.beta_util),
    }
}

/// User-consumable bytes of an all-RAID-5 array: proportional to the blended
/// ratio until it reaches `alpha_exp`, then capped at the formatted size.
pub fn effective_capacity(p: &ModelParams, flash_capacity_bytes: u64) -> u64 {
    let n = p.n as f64;
    let c_raid = p.alpha_exp * n * flash_capacity_bytes as f64;
    let alpha = (p.n + 1) as f64 / p.c5();
    c_raid.min(alpha * n * flash_capacity_bytes as f64).round() as u64
}

/// How parity ratios are chosen in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParitySweep {
    Linked,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n: Vec<usize>,
    pub alpha_exp: Vec<f64>,
    pub beta_util: Vec<f64>,
    pub alpha_usr: Vec<f64>,
    pub parity: ParitySweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: ModelParams,
    pub result: CoverageResult,
}

pub const CSV_HEADER: &str = "n,alpha_exp,beta_util,alpha_usr,alpha_pty,fraction,feasible";

/// `start, start+step, ..` up to and including `end` (within rounding).
pub fn linspace_step(start: f64, end: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || end < start {
        return Vec::new();
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    (0..=count).map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6).collect()
}

impl SweepSpec {
    /// Coverage against user ratio for several expansion factors and array widths.
    pub fn fig7() -> Self {
        Self {
            n: vec![3, 5],
            alpha_exp: vec![1.0, 1.4, 1.8],
            beta_util: vec![1.0],
            alpha_usr: linspace_step(1.0, 3.0, 0.05),
            parity: ParitySweep::Linked,
        }
    }

    /// Coverage against user ratio for several utilization factors.
    pub fn fig8() -> Self {
        Self {
            n: vec![3],
            alpha_exp: vec![1.8],
            beta_util: vec![1.0, 0.9, 0.8],
            alpha_usr: linspace_step(1.0, 3.0, 0.05),
            parity: ParitySweep::Linked,
        }
    }

    pub fn rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for &n in &self.n {
            for &alpha_exp in &self.alpha_exp {
                for &beta_util in &self.beta_util {
                    for &alpha_usr in &self.alpha_usr {
                        let ptys = match &self.parity {
                            ParitySweep::Linked => vec![linked_parity_ratio(alpha_usr)],
                            ParitySweep::Fixed(v) => v.clone(),
                        };
                        for alpha_pty in ptys {
                            let params = ModelParams {
                                n,
                                alpha_exp,
                                beta_util,
                                alpha_usr,
                                alpha_pty,
                            };
                            rows.push(SweepRow {
                                params,
                                result: raid10_fraction(&params),
                            });
                        }
                    }
                }
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows())
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let p = &r.params;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{}\n",
            p.n, p.alpha_exp, p.beta_util, p.alpha_usr, p.alpha_pty, r.result.raid10_fraction, r.result.feasible
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Packs `stripes` stripes of integer byte costs into `(n+1) * flash`
    /// bytes, all RAID 5 first, then converting one stripe at a time.
    fn greedy_allocator(p: &ModelParams, stripes: u64) -> Option<f64> {
        let strip = 4096.0;
        let c5 = (p.n as f64 * (strip / p.alpha_usr).ceil() + (strip / p.alpha_pty).ceil()) as u64;
        let c10 = (2.0 * p.n as f64 * (strip / p.alpha_usr).ceil()) as u64;
        // Formatted stripes = alpha_exp * flash / 4096, of which beta_util hold data.
        let flash = (stripes as f64 / p.beta_util / p.alpha_exp * strip).round() as u64;
        let cap = (p.n as u64 + 1) * flash;
        let mut used = stripes * c5.min(c10);
        if used > cap {
            return None;
        }
        if c10 <= c5 {
            return Some(1.0);
        }
        let mut converted = 0;
        while converted < stripes && used + (c10 - c5) <= cap {
            used += c10 - c5;
            converted += 1;
        }
        Some(converted as f64 / stripes as f64)
    }

    #[test]
    fn utilization_anchors() {
        let r = |b| raid10_fraction(&ModelParams::linked(3, 1.8, b, 2.0));
        assert_eq!(ModelParams::linked(3, 1.8, 0.9, 2.0).alpha_pty, 1.25);
        let full = r(1.0);
        assert_eq!(full.raid10_fraction, 0.0);
        assert!(!full.feasible);
        assert!((r(0.9).raid10_fraction - 0.2414).abs() < 1e-3);
        assert!((r(0.8).raid10_fraction - 0.6825).abs() < 1e-3);
    }

    #[test]
    fn incompressible_boundary() {
        let p = ModelParams::linked(3, 1.0, 1.0, 1.0);
        assert_eq!(p.budget(), 4.0);
        assert_eq!(p.c5(), 4.0);
        let r = raid10_fraction(&p);
        assert_eq!(r.raid10_fraction, 0.0);
        assert!(r.feasible);
    }

    #[test]
    fn alpha_full_closed_form_and_allocator() {
        assert!((alpha_full(3, 1.8, 1.0) - 2.7).abs() < 1e-12);
        let at = ModelParams::linked(3, 1.8, 1.0, 2.7);
        assert!((raid10_fraction(&at).raid10_fraction - 1.0).abs() < 1e-9);
        let below = ModelParams::linked(3, 1.8, 1.0, 2.6);
        assert!(raid10_fraction(&below).raid10_fraction < 1.0);
        // The allocator uses whole bytes, so it reaches full coverage just above 2.7.
        assert_eq!(greedy_allocator(&ModelParams::linked(3, 1.8, 1.0, 2.71), 10_000), Some(1.0));
        assert!(greedy_allocator(&below, 10_000).unwrap() < 1.0);
    }

    #[test]
    fn formula_matches_greedy_allocator() {
        for spec in [SweepSpec::fig7(), SweepSpec::fig8()] {
            for row in spec.rows() {
                let brute = greedy_allocator(&row.params, 20_000);
                match brute {
                    None => assert!(!row.result.feasible, "{row:?}"),
                    Some(x) => assert!(
                        (x - row.result.raid10_fraction).abs() < 0.01,
                        "{row:?} allocator {x}"
                    ),
                }
            }
        }
    }

    #[test]
    fn effective_capacity_regimes() {
        let c = 1u64 << 30;
        let p = ModelParams {
            n: 3,
            alpha_exp: 2.0,
            beta_util: 1.0,
            alpha_usr: 1.0,
            alpha_pty: 1.0,
        };
        assert_eq!(effective_capacity(&p, c), 3 * c);
        // Blended ratio exactly alpha_exp: (n+1)/c5 = 2 with c5 = 2.
        let p = ModelParams {
            alpha_usr: 2.0,
            alpha_pty: 2.0,
            ..p
        };
        assert_eq!(effective_capacity(&p, c), 6 * c);
        let p = ModelParams {
            alpha_usr: 4.0,
            alpha_pty: 2.0,
            ..p
        };
        assert_eq!(effective_capacity(&p, c), 6 * c);
    }

    #[test]
    fn csv_shapes() {
        let single = SweepSpec {
            n: vec![3],
            alpha_exp: vec![1.8],
            beta_util: vec![0.9],
            alpha_usr: vec![2.0],
            parity: ParitySweep::Linked,
        };
        let csv = single.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("3,1.8,0.9,2,1.25,0.241"));
        let empty = SweepSpec {
            alpha_usr: vec![],
            ..single
        };
        assert_eq!(empty.to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn fig8_columns_monotone() {
        let rows = SweepSpec::fig8().rows();
        for beta in [1.0, 0.9, 0.8] {
            let col: Vec<f64> = rows
                .iter()
                .filter(|r| r.params.beta_util == beta)
                .map(|r| r.result.raid10_fraction)
                .collect();
            assert!(col.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        }
    }

    /// Smallest user ratio (to 1e-6) with coverage above `level`.
    fn onset(n: usize, a_exp: f64, beta: f64, level: f64) -> f64 {
        let (mut lo, mut hi) = (1.0, 16.0);
        while hi - lo > 1e-6 {
            let mid = (lo + hi) / 2.0;
            if raid10_fraction(&ModelParams::linked(n, a_exp, beta, mid)).raid10_fraction > level {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn wider_arrays_grow_slower() {
        for a_exp in [1.0, 1.4, 1.8] {
            for beta in [0.8, 0.9, 1.0] {
                let span = |n| onset(n, a_exp, beta, 1.0 - 1e-9) - onset(n, a_exp, beta, 0.0);
                assert!(span(5) > span(3), "a_exp {a_exp} beta {beta}");
                assert!(alpha_full(5, a_exp, beta) > alpha_full(3, a_exp, beta));
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_each_parameter(
            n in 1usize..8,
            a_exp in 1.0f64..3.0,
            beta in 0.3f64..1.0,
            u in 1.0f64..6.0,
            du in 0.0f64..1.0,
            da in 0.0f64..1.0,
            db in 0.0f64..0.3,
        ) {
            let f = |n, a, b, u| raid10_fraction(&ModelParams::linked(n, a, b, u)).raid10_fraction;
            let base = f(n, a_exp, beta, u);
            prop_assert!(f(n, a_exp, beta, u + du) >= base - 1e-12);
            prop_assert!(f(n, a_exp + da, beta, u) <= base + 1e-12);
            prop_assert!(f(n, a_exp, (beta + db).min(1.0), u) <= base + 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }
}
