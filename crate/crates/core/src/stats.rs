//! Interval estimates and test statistics used by the experiment suites.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

/// An estimate with a two-sided interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// A frequency with its Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub z: f64,
}

impl Frequency {
    /// `None` when there are no trials.
    pub fn new(successes: u64, trials: u64, z: f64) -> Option<Self> {
        let (lo, hi) = wilson_interval(successes, trials, z)?;
        Some(Frequency { successes, trials, estimate: successes as f64 / trials as f64, lo, hi, z })
    }

    pub fn interval(&self) -> Interval {
        Interval { estimate: self.estimate, lo: self.lo, hi: self.hi }
    }
}

/// Wilson score bounds. `None` when `trials == 0`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> Option<(f64, f64)> {
    if trials == 0 || successes > trials {
        return None;
    }
    let n = trials as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    Some((lo, hi))
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 { 0.0 } else { self.m2 / (self.n - 1) as f64 }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 { f64::NAN } else { (self.variance() / self.n as f64).sqrt() }
    }

    /// CLT interval `mean ± z se`.
    pub fn interval(&self, z: f64) -> Interval {
        let se = self.std_err();
        Interval { estimate: self.mean, lo: self.mean - z * se, hi: self.mean + z * se }
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::new();
        iter.into_iter().for_each(|x| w.push(x));
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p(d: f64, n_eff: f64) -> f64 {
    let sq = n_eff.sqrt();
    kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    TestResult { statistic: d, dof: n, p_value: ks_p(d, n) }
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    TestResult { statistic: d, dof: na * nb / (na + nb), p_value: ks_p(d, na * nb / (na + nb)) }
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

fn chi2_p(stat: f64, dof: f64) -> f64 {
    if dof < 1.0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(dof).expect("positive dof").cdf(stat)
}

/// Pearson goodness of fit. `probs` covers bins `0..probs.len()`, with any mass
/// beyond the last bin folded into it. Adjacent bins are pooled until each
/// expected count reaches `min_expected`.
pub fn chi_square_gof(observed: &[u64], probs: &[f64], min_expected: f64) -> TestResult {
    let n: u64 = observed.iter().sum();
    let nf = n as f64;
    let bins = probs.len().max(observed.len());
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    let covered: f64 = probs.iter().sum();
    for k in 0..bins {
        o += *observed.get(k).unwrap_or(&0) as f64;
        let mut p = *probs.get(k).unwrap_or(&0.0);
        if k + 1 == bins {
            p += (1.0 - covered).max(0.0);
        }
        e += p * nf;
        if e >= min_expected {
            pooled.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if o > 0.0 || e > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => pooled.push((o, e)),
        }
    }
    let stat: f64 = pooled
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 })
        .sum();
    let dof = pooled.len() as f64 - 1.0;
    TestResult { statistic: stat, dof, p_value: chi2_p(stat, dof) }
}

/// Two-sample chi-square homogeneity test on binned counts; bins with fewer than
/// `min_count` combined observations are pooled with their neighbour.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], min_count: u64) -> TestResult {
    let bins = a.len().max(b.len());
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut x, mut y) = (0u64, 0u64);
    for k in 0..bins {
        x += *a.get(k).unwrap_or(&0);
        y += *b.get(k).unwrap_or(&0);
        if x + y >= min_count {
            pooled.push((x as f64, y as f64));
            x = 0;
            y = 0;
        }
    }
    if x + y > 0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += x as f64;
                last.1 += y as f64;
            }
            None => pooled.push((x as f64, y as f64)),
        }
    }
    let na: f64 = pooled.iter().map(|p| p.0).sum();
    let nb: f64 = pooled.iter().map(|p| p.1).sum();
    let total = na + nb;
    let mut stat = 0.0;
    for &(x, y) in &pooled {
        let col = x + y;
        let ex = na * col / total;
        let ey = nb * col / total;
        stat += (x - ex).powi(2) / ex + (y - ey).powi(2) / ey;
    }
    let dof = pooled.len() as f64 - 1.0;
    TestResult { statistic: stat, dof, p_value: chi2_p(stat, dof) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
}

pub fn linear_regression(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    LinearFit { slope, intercept, slope_se, r2 }
}

/// Ordinary least squares `y ~ X beta` by normal equations; small systems only.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = rows[0].len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, &yv) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * yv;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for row in 0..k {
            if row != col {
                let f = a[row][col] / a[col][col];
                for j in col..=k {
                    a[row][j] -= f * a[col][j];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

/// Trend in repeated series: fits a slope per series, then tests whether the
/// mean slope is positive (one-sided t-test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub mean_slope: f64,
    pub slope_se: f64,
    pub t: f64,
    pub p_positive: f64,
    pub series: usize,
}

pub fn trend_test(x: &[f64], series: &[Vec<f64>]) -> TrendTest {
    let slopes: Welford = series.iter().map(|y| linear_regression(x, y).slope).collect();
    let se = slopes.std_err();
    let t = slopes.mean / se;
    let p = if slopes.n < 2 || !t.is_finite() {
        if slopes.mean > 0.0 { 0.0 } else { 1.0 }
    } else {
        1.0 - StudentsT::new(0.0, 1.0, (slopes.n - 1) as f64).expect("dof").cdf(t)
    };
    TrendTest { mean_slope: slopes.mean, slope_se: se, t, p_positive: p, series: series.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use rand::Rng;

    #[test]
    fn wilson_examples() {
        let (lo, _) = wilson_interval(0, 40, 1.96).unwrap();
        assert_eq!(lo, 0.0);
        let (_, hi) = wilson_interval(40, 40, 1.96).unwrap();
        assert_eq!(hi, 1.0);
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-12);
        // Wilson 95% for 50/100 is (0.4038, 0.5962)
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4);
        assert!(wilson_interval(0, 0, 1.96).is_none());
    }

    #[test]
    fn welford_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let all: Welford = xs.iter().copied().collect();
        let mut a: Welford = xs[..313].iter().copied().collect();
        let b: Welford = xs[313..].iter().copied().collect();
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-9);
    }

    #[test]
    fn ks_detects_and_accepts() {
        let mut rng = StreamKey::root(9).rng();
        let u: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        assert!(ks_one_sample(&u, |x| x.clamp(0.0, 1.0)).p_value > 0.01);
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        assert!(ks_one_sample(&sq, |x| x.clamp(0.0, 1.0)).p_value < 1e-6);
        let v: Vec<f64> = (0..4000).map(|_| rng.random()).collect();
        assert!(ks_two_sample(&u, &v).p_value > 0.01);
        assert!(ks_two_sample(&u, &sq).p_value < 1e-6);
    }

    #[test]
    fn chi_square_basic() {
        let r = chi_square_gof(&[25, 25, 25, 25], &[0.25; 4], 5.0);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        let r = chi_square_gof(&[100, 0, 0, 0], &[0.25; 4], 5.0);
        assert!(r.p_value < 1e-10);
        let r = chi_square_two_sample(&[50, 50], &[500, 500], 5);
        assert!(r.statistic.abs() < 1e-12);
    }

    #[test]
    fn regression_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let f = linear_regression(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 3.0).abs() < 1e-12);
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v, (v + 1.0).ln(), 1.0]).collect();
        let yy: Vec<f64> = x.iter().map(|&v| 2.0 * v - (v + 1.0).ln() + 0.25).collect();
        let b = least_squares(&rows, &yy);
        assert!((b[0] - 2.0).abs() < 1e-9 && (b[1] + 1.0).abs() < 1e-9 && (b[2] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn trend_flat_and_rising() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let flat: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0 + (i % 3) as f64 * 0.01, 1.0, 0.99, 1.0]).collect();
        assert!(trend_test(&x, &flat).p_positive > 0.05);
        let up: Vec<Vec<f64>> = (0..20).map(|i| vec![0.0, 1.0, 2.0 + (i % 2) as f64 * 0.1, 3.0]).collect();
        assert!(trend_test(&x, &up).p_positive < 0.01);
    }
}
