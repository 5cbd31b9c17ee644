//! Exact binomial confidence limits and the goodness-of-fit tests used by the
//! initialization self-checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

/// Solves `beta_reg(a, b, x) = p` for `x` by bisection.
fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One-sided Clopper–Pearson upper limit at the given confidence.
pub fn clopper_pearson_upper(successes: u64, trials: u64, confidence: f64) -> f64 {
    assert!(successes <= trials && trials > 0);
    if successes == trials {
        return 1.0;
    }
    beta_quantile(successes as f64 + 1.0, (trials - successes) as f64, confidence)
}

/// One-sided Clopper–Pearson lower limit at the given confidence.
pub fn clopper_pearson_lower(successes: u64, trials: u64, confidence: f64) -> f64 {
    assert!(successes <= trials && trials > 0);
    if successes == 0 {
        return 0.0;
    }
    beta_quantile(successes as f64, (trials - successes + 1) as f64, 1.0 - confidence)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exact `P[Binomial(n, 1/2) <= k]` as a ratio of integers.
pub fn binomial_half_cdf(n: u32, k: u32) -> (u128, u128) {
    assert!(n < 120);
    let mut c: u128 = 1;
    let mut sum: u128 = 0;
    for j in 0..=k.min(n) {
        if j > 0 {
            c = c * (n - j + 1) as u128 / j as u128;
        }
        sum += c;
    }
    (sum, 1u128 << n)
}

/// Pearson chi-square goodness-of-fit p-value; bins with expected count below
/// 5 are pooled into their neighbour.
pub fn chi_square_pvalue(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o as f64;
        e_acc += e;
        if e_acc >= 5.0 {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match (obs.last_mut(), exp.last_mut()) {
            (Some(o), Some(e)) => {
                *o += o_acc;
                *e += e_acc;
            }
            _ => {
                obs.push(o_acc);
                exp.push(e_acc);
            }
        }
    }
    if obs.len() < 2 {
        return 1.0;
    }
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((obs.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Asymptotic Kolmogorov distribution tail `P[K > x]`.
fn kolmogorov_tail(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample KS test.
pub fn ks_two_sample_pvalue(a: &[f64], b: &[f64]) -> f64 {
    let d = ks_two_sample_statistic(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let en = (n * m / (n + m)).sqrt();
    kolmogorov_tail((en + 0.12 + 0.11 / en) * d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clopper_pearson_known_values() {
        // For s = T the lower limit solves x^T = 1 - confidence.
        let lo = clopper_pearson_lower(10, 10, 0.999);
        assert!((lo - 0.001_f64.powf(0.1)).abs() < 1e-10);
        // For s = 0 the upper limit solves (1 - x)^T = 1 - confidence.
        let hi = clopper_pearson_upper(0, 20, 0.999);
        assert!((hi - (1.0 - 0.001_f64.powf(1.0 / 20.0))).abs() < 1e-10);
        assert_eq!(clopper_pearson_upper(5, 5, 0.999), 1.0);
        assert_eq!(clopper_pearson_lower(0, 5, 0.999), 0.0);
    }

    #[test]
    fn clopper_pearson_brackets_estimate() {
        for &(s, t) in &[(1u64, 100u64), (50, 100), (9683, 10_000), (3, 7)] {
            let p = s as f64 / t as f64;
            assert!(clopper_pearson_lower(s, t, 0.999) < p);
            assert!(clopper_pearson_upper(s, t, 0.999) > p);
        }
    }

    #[test]
    fn binomial_tail_counts() {
        assert_eq!(binomial_half_cdf(16, 1), (17, 65536));
        assert_eq!(binomial_half_cdf(4, 4), (16, 16));
        assert!((ln_choose(10, 3) - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chi_square_detects_bias() {
        assert!(chi_square_pvalue(&[500, 500], &[500.0, 500.0]) > 0.99);
        assert!(chi_square_pvalue(&[600, 400], &[500.0, 500.0]) < 1e-6);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        assert_eq!(ks_two_sample_statistic(&a, &a), 0.0);
        assert!(ks_two_sample_pvalue(&a, &a) > 0.99);
        assert!(ks_two_sample_pvalue(&a, &b) < 1e-10);
    }
}
