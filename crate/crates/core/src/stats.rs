//! One-sided Wilcoxon signed-rank test and significance stars.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CoreError, Result};

/// Largest sample size handled by exact sign enumeration; larger samples use
/// the tie-corrected normal approximation.
pub const EXACT_LIMIT: usize = 25;

/// Minimum number of non-zero paired differences.
pub const MIN_PAIRS: usize = 5;

/// Ranks of absolute differences with average ranks on ties.
fn average_ranks(abs_d: &[f64]) -> Vec<f64> {
    let n = abs_d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[idx[j + 1]] == abs_d[idx[i]] {
            j += 1;
        }
        // Average of ranks i+1 ..= j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided Wilcoxon signed-rank test with alternative "x > y".
///
/// Zero differences are dropped; fewer than [`MIN_PAIRS`] remaining pairs is
/// an error. Up to [`EXACT_LIMIT`] pairs the p-value comes from the exact
/// sign-permutation distribution (ties handled through average ranks);
/// beyond that a tie-corrected normal approximation is used.
pub fn wilcoxon_one_sided(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::invalid(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(CoreError::DegenerateInput(format!(
            "only {n} non-zero paired differences (need at least {MIN_PAIRS})"
        )));
    }

    let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs_d);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    if n <= EXACT_LIMIT {
        // Average ranks are multiples of 1/2, so doubled ranks are integers
        // and the permutation distribution fits a dense count table.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        let at_least: u64 = counts[observed..].iter().sum();
        Ok(at_least as f64 / (1u64 << n) as f64)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
        let mut tie_term = 0.0f64;
        let mut sorted = abs_d.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0usize;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(CoreError::DegenerateInput(
                "variance vanished: all differences tie".into(),
            ));
        }
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        Ok(1.0 - normal.cdf(z))
    }
}

/// Significance levels reported as stars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stars {
    None,
    One,
    Two,
    Three,
}

impl std::fmt::Display for Stars {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
            Stars::Three => "***",
        })
    }
}

/// Stars at the p < 0.05 / 0.01 / 0.001 thresholds.
pub fn significance_stars(p: f64) -> Result<Stars> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::invalid(format!("p-value {p} outside [0, 1]")));
    }
    Ok(if p < 0.001 {
        Stars::Three
    } else if p < 0.01 {
        Stars::Two
    } else if p < 0.05 {
        Stars::One
    } else {
        Stars::None
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng as _;

    #[test]
    fn five_positive_differences_give_one_in_thirtytwo() {
        let x = [2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 1.5, 2.0, 2.5, 3.0];
        let p = wilcoxon_one_sided(&x, &y).unwrap();
        assert_eq!(p, 1.0 / 32.0);
    }

    #[test]
    fn equal_samples_are_insufficient_data() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(
            wilcoxon_one_sided(&x, &x),
            Err(CoreError::DegenerateInput(_))
        ));
    }

    #[test]
    fn too_few_nonzero_pairs_rejected() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 2.0, 3.0, 4.0, 4.0];
        assert!(wilcoxon_one_sided(&x, &y).is_err());
    }

    /// Exhaustive oracle: every sign assignment of the absolute differences,
    /// with its own ranking code.
    fn exact_oracle(x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(a, b)| a - b)
            .filter(|v| *v != 0.0)
            .collect();
        let n = d.len();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        // Simple O(n^2) average ranking.
        let rank = |i: usize| -> f64 {
            let mut less = 0usize;
            let mut equal = 0usize;
            for (j, a) in abs.iter().enumerate() {
                if *a < abs[i] {
                    less += 1;
                } else if *a == abs[i] && j != i {
                    equal += 1;
                }
            }
            let first = less + 1;
            let last = less + equal + 1;
            (first + last) as f64 / 2.0
        };
        let ranks: Vec<f64> = (0..n).map(rank).collect();
        let observed: f64 = d
            .iter()
            .zip(&ranks)
            .filter(|(v, _)| **v > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let mut at_least = 0u64;
        for signs in 0..(1u64 << n) {
            let w: f64 = (0..n)
                .filter(|i| signs >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if w >= observed - 1e-9 {
                at_least += 1;
            }
        }
        at_least as f64 / (1u64 << n) as f64
    }

    #[test]
    fn exact_mode_matches_enumeration_oracle() {
        let mut rng = derive_rng(4, &[90]);
        for n in 5..=12usize {
            for trial in 0..4 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect();
                let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                // Occasionally force ties in |d|.
                if trial % 2 == 0 && n >= 6 {
                    let d0 = x[0] - y[0];
                    y[1] = x[1] - d0;
                    y[2] = x[2] + d0;
                }
                let got = wilcoxon_one_sided(&x, &y).unwrap();
                let want = exact_oracle(&x, &y);
                assert!(
                    (got - want).abs() < 1e-12,
                    "n={n} trial={trial}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        let mut rng = derive_rng(5, &[91]);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 0.4).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = wilcoxon_one_sided(&x, &y).unwrap();
        assert!(p > 0.0 && p < 0.05, "expected a small p, got {p}");
        // Opposite direction must be non-significant.
        let p_rev = wilcoxon_one_sided(&y, &x).unwrap();
        assert!(p_rev > 0.5, "reverse alternative p {p_rev}");
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(significance_stars(0.04).unwrap(), Stars::One);
        assert_eq!(significance_stars(0.0005).unwrap(), Stars::Three);
        assert_eq!(significance_stars(0.5).unwrap(), Stars::None);
        assert_eq!(significance_stars(0.009).unwrap(), Stars::Two);
        assert_eq!(significance_stars(0.05).unwrap(), Stars::None);
        assert_eq!(significance_stars(0.01).unwrap(), Stars::One);
        assert_eq!(significance_stars(0.001).unwrap(), Stars::Two);
        assert!(significance_stars(1.5).is_err());
    }
}
