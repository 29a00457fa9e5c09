//! Friedman's rank test and the chi-square tail it is referred to.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Lower regularized incomplete gamma by its power series; converges
/// quickly for `x < a + 1`.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper regularized incomplete gamma by its continued fraction (modified
/// Lentz); used for `x >= a + 1`.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        (1.0 - gamma_p_series(a, x)).clamp(0.0, 1.0)
    } else {
        gamma_q_continued_fraction(a, x).clamp(0.0, 1.0)
    }
}

/// Upper-tail probability of a chi-square variate with `df` degrees of
/// freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(df / 2.0, x / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub n_blocks: usize,
    pub k_treatments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FriedmanOptions {
    /// Divide the statistic by `1 - Σ(t³ - t) / (n k (k² - 1))`.
    pub tie_correction: bool,
}

/// Ranks ascending, 1-based, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn validate(data: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = data.len();
    let k = data.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::validation(format!(
            "Friedman test needs at least 2 blocks and 2 treatments, got {n}x{k}"
        )));
    }
    if let Some(i) = data.iter().position(|row| row.len() != k) {
        return Err(Error::validation(format!(
            "block {i} has {} values, expected {k}",
            data[i].len()
        )));
    }
    if data.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::validation("data contains NaN"));
    }
    Ok((n, k))
}

fn statistic(rank_sums: &[f64], n: usize, k: usize) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0)
}

/// Friedman test on an `n_blocks x k_treatments` table (rows are blocks).
pub fn friedman(data: &[Vec<f64>]) -> Result<FriedmanResult> {
    friedman_with(data, FriedmanOptions::default())
}

pub fn friedman_with(data: &[Vec<f64>], opts: FriedmanOptions) -> Result<FriedmanResult> {
    let (n, k) = validate(data)?;
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for row in data {
        let ranks = average_ranks(row);
        for (sum, r) in rank_sums.iter_mut().zip(&ranks) {
            *sum += r;
        }
        if opts.tie_correction {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            for group in sorted.chunk_by(|a, b| a == b) {
                let t = group.len() as f64;
                tie_term += t * t * t - t;
            }
        }
    }
    let mut chi2 = statistic(&rank_sums, n, k);
    if opts.tie_correction {
        let (nf, kf) = (n as f64, k as f64);
        let denom = 1.0 - tie_term / (nf * kf * (kf * kf - 1.0));
        chi2 = if denom > 0.0 { chi2 / denom } else { 0.0 };
    }
    let df = k - 1;
    Ok(FriedmanResult {
        chi2,
        df,
        p: chi_square_sf(chi2, df as f64),
        n_blocks: n,
        k_treatments: k,
    })
}

/// Monte Carlo permutation p-value for the Friedman statistic: ranks are
/// shuffled within each block `iterations` times. Includes the observed
/// table, so the result is never 0.
pub fn friedman_permutation_p(data: &[Vec<f64>], iterations: usize, seed: u64) -> Result<f64> {
    let (n, k) = validate(data)?;
    let ranks: Vec<Vec<f64>> = data.iter().map(|row| average_ranks(row)).collect();
    let sums = |ranks: &[Vec<f64>]| {
        let mut s = vec![0.0; k];
        for row in ranks {
            for (a, r) in s.iter_mut().zip(row) {
                *a += r;
            }
        }
        s
    };
    let observed = statistic(&sums(&ranks), n, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = ranks.clone();
    let mut at_least = 1usize;
    for _ in 0..iterations {
        for row in &mut work {
            row.shuffle(&mut rng);
        }
        if statistic(&sums(&work), n, k) >= observed - 1e-9 {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / (iterations + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n = {n}");
            fact *= n as f64;
        }
        // Γ(1/2) = √π
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn chi_square_even_df_closed_form() {
        // For even df = 2m, sf(x) = e^{-x/2} Σ_{i<m} (x/2)^i / i!.
        for m in 1..6 {
            for x in [0.1, 1.0, 3.0, 6.0, 11.07, 25.0, 60.0] {
                let h: f64 = x / 2.0;
                let mut term = 1.0;
                let mut sum = 0.0;
                for i in 0..m {
                    if i > 0 {
                        term *= h / i as f64;
                    }
                    sum += term;
                }
                let expected = (-h).exp() * sum;
                let got = chi_square_sf(x, 2.0 * m as f64);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "df {} x {x}: {got} vs {expected}",
                    2 * m
                );
            }
        }
        assert_eq!(chi_square_sf(0.0, 3.0), 1.0);
    }

    #[test]
    fn chi_square_matches_statrs() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        for df in [1.0, 3.0, 5.0, 7.5, 12.0] {
            let d = ChiSquared::new(df).unwrap();
            for x in [0.01, 0.5, 2.0, 4.5, 9.0, 20.0, 45.0] {
                let expected = d.sf(x);
                assert!(
                    (chi_square_sf(x, df) - expected).abs() < 1e-10,
                    "df {df} x {x}"
                );
            }
        }
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 8.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[2.0, 2.0, 2.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn fixtures() {
        let r = friedman(&vec![vec![1.0, 2.0, 3.0]; 3]).unwrap();
        assert!((r.chi2 - 6.0).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - (-3.0f64).exp()).abs() < 1e-9);

        let r = friedman(&vec![vec![4.0; 6]; 3]).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p, 1.0);
        let r = friedman_with(
            &vec![vec![4.0; 6]; 3],
            FriedmanOptions {
                tie_correction: true,
            },
        )
        .unwrap();
        assert_eq!((r.chi2, r.p), (0.0, 1.0));
    }

    #[test]
    fn tie_correction_increases_statistic() {
        let data = vec![
            vec![1.0, 1.0, 3.0],
            vec![2.0, 2.0, 5.0],
            vec![1.0, 2.0, 9.0],
        ];
        let plain = friedman(&data).unwrap();
        let corrected = friedman_with(
            &data,
            FriedmanOptions {
                tie_correction: true,
            },
        )
        .unwrap();
        assert!(corrected.chi2 > plain.chi2);
    }

    #[test]
    fn degenerate_dimensions_rejected() {
        assert!(friedman(&[vec![1.0, 2.0]]).is_err());
        assert!(friedman(&[vec![1.0], vec![2.0]]).is_err());
        assert!(friedman(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(friedman(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn permutation_p_on_fixture() {
        // All three blocks share one ordering in 6 of the 6^3 arrangements.
        let p = friedman_permutation_p(&vec![vec![1.0, 2.0, 3.0]; 3], 20_000, 1).unwrap();
        assert!((p - 1.0 / 36.0).abs() < 0.005, "{p}");
    }
}
