//! Wider arrays against narrower ones on the widths-and-expansions sweep grid.

use eraid_core::model::{raid10_fraction, ModelParams, SweepSpec};

fn fraction(n: usize, a: f64, b: f64, u: f64) -> f64 {
    raid10_fraction(&ModelParams::linked(n, a, b, u)).raid10_fraction
}

/// Pointwise: at every grid point where the n=3 array is not fully
/// mirrored, the n=5 array covers no more.
#[test]
fn five_never_exceeds_three_below_full_coverage() {
    let s = SweepSpec::fig7();
    let mut violations = Vec::new();
    for &a in &s.alpha_exp {
        for &b in &s.beta_util {
            for &u in &s.alpha_usr {
                let (f3, f5) = (fraction(3, a, b, u), fraction(5, a, b, u));
                if f3 < 1.0 && f5 > f3 + 1e-12 {
                    violations.push(format!("alpha_exp {a} alpha_usr {u}: n=3 {f3:.4} n=5 {f5:.4}"));
                }
            }
        }
    }
    assert!(violations.is_empty(), "{} points:\n{}", violations.len(), violations.join("\n"));
}

/// The slope reading: from first coverage to full coverage, the wider array
/// needs a longer stretch of user compression ratio.
#[test]
fn five_needs_more_ratio_to_reach_full() {
    for a in [1.0, 1.4, 1.8] {
        let first = |n| (100..=600).map(|i| i as f64 / 100.0).find(|&u| fraction(n, a, 1.0, u) > 0.0).unwrap();
        let full = |n| (100..=600).map(|i| i as f64 / 100.0).find(|&u| fraction(n, a, 1.0, u) >= 1.0).unwrap();
        assert!(full(5) - first(5) > full(3) - first(3), "alpha_exp {a}");
    }
}
