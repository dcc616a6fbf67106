//! Free-space model with Gaussian sibling displacements and its link to
//! branching Brownian motion on `[0, 1 - 1/mu]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::laws::OffspringLaw;
use crate::rng::{StreamKey, Tag};
use crate::stats::{chi_square_gof, TestResult};

/// Branch time from a uniform variate: `v = 1 - 1/(1 + (mu - 1) u)`.
pub fn branch_time_from_uniform(u: f64, mu: f64) -> f64 {
    1.0 - 1.0 / (1.0 + (mu - 1.0) * u)
}

/// `P(V <= v) = ((1 - v)^-1 - 1) / (mu - 1)` on `[0, 1 - 1/mu]`.
pub fn branch_time_cdf(v: f64, mu: f64) -> f64 {
    let end = 1.0 - 1.0 / mu;
    if v <= 0.0 {
        0.0
    } else if v >= end {
        1.0
    } else {
        (1.0 / (1.0 - v) - 1.0) / (mu - 1.0)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 1.0) || !mu.is_finite() {
        return domain(format!("mu = {mu} must exceed 1"));
    }
    Ok(())
}

/// `k - 1` sorted i.i.d. branch times.
pub fn sample_branch_times<R: Rng + ?Sized>(rng: &mut R, k: usize, mu: f64) -> Result<Vec<f64>> {
    check_mu(mu)?;
    let mut v: Vec<f64> = (1..k).map(|_| branch_time_from_uniform(rng.random::<f64>(), mu)).collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkSample {
    pub branch_times: Vec<f64>,
    /// `k` points in `R^d`, in random order.
    pub points: Vec<Vec<f64>>,
}

/// One draw of `Q_k`: BBM run to `1 - 1/mu` with branch times as above, each
/// split duplicating a uniformly chosen endpoint, then scaled by `sqrt(mu)`.
pub fn sample_qk<R: Rng + ?Sized>(rng: &mut R, k: usize, mu: f64, dim: u32) -> Result<QkSample> {
    if k == 0 {
        return Ok(QkSample { branch_times: Vec::new(), points: Vec::new() });
    }
    if dim == 0 {
        return domain("dimension must be positive");
    }
    let branch_times = sample_branch_times(rng, k, mu)?;
    let end = 1.0 - 1.0 / mu;
    let mut points: Vec<Vec<f64>> = vec![vec![0.0; dim as usize]];
    let mut t = 0.0;
    let advance = |points: &mut Vec<Vec<f64>>, dt: f64, rng: &mut R| {
        let sd = dt.max(0.0).sqrt();
        for p in points.iter_mut() {
            for x in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += sd * z;
            }
        }
    };
    for &v in &branch_times {
        advance(&mut points, v - t, rng);
        let j = rng.random_range(0..points.len());
        let copy = points[j].clone();
        points.push(copy);
        t = v;
    }
    advance(&mut points, end - t, rng);
    let scale = mu.sqrt();
    for p in points.iter_mut() {
        for x in p.iter_mut() {
            *x *= scale;
        }
    }
    points.shuffle(rng);
    Ok(QkSample { branch_times, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeGeneration {
    pub generation: u32,
    pub positions: Vec<Vec<f64>>,
    /// Children of each particle; empty for the last generation.
    pub offspring: Vec<u32>,
}

/// Free-mode run: every particle has Geometric(mu) children whose
/// displacements, scaled by `mu^-(n+1)/2`, jointly follow `Q_k`.
pub fn strm_free_run(mu: f64, dim: u32, generations: u32, key: StreamKey, cap: u64) -> Result<Vec<FreeGeneration>> {
    check_mu(mu)?;
    let sampler = OffspringLaw::geometric(mu).sampler();
    let key = key.tag(Tag::Sbm);
    let rho = mu.powf(-0.5);
    let mut out = vec![FreeGeneration { generation: 0, positions: vec![vec![0.0; dim as usize]], offspring: Vec::new() }];
    for n in 0..generations {
        let scale = rho.powi(n as i32 + 1);
        let parents = &out[n as usize].positions;
        let kids: Vec<Vec<Vec<f64>>> = parents
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = key.with(n as u64).with(i as u64).rng();
                let k = sampler.sample(&mut rng) as usize;
                let q = sample_qk(&mut rng, k, mu, dim)?;
                Ok(q.points
                    .into_iter()
                    .map(|p| x.iter().zip(p).map(|(a, b)| a + scale * b).collect())
                    .collect())
            })
            .collect::<Result<_>>()?;
        out[n as usize].offspring = kids.iter().map(|k| k.len() as u32).collect();
        let positions: Vec<Vec<f64>> = kids.into_iter().flatten().collect();
        if positions.len() as u64 > cap {
            return Err(Error::Resource { what: format!("free-mode population at generation {}", n + 1), cap });
        }
        out.push(FreeGeneration { generation: n + 1, positions, offspring: Vec::new() });
    }
    Ok(out)
}

/// Position of a uniformly chosen particle of the last generation.
pub fn sample_uniform_particle(mu: f64, dim: u32, generations: u32, key: StreamKey, cap: u64) -> Result<Vec<f64>> {
    let run = strm_free_run(mu, dim, generations, key, cap)?;
    let last = &run[generations as usize].positions;
    let mut rng = key.tag(Tag::Sample).rng();
    let j = rng.random_range(0..last.len());
    Ok(last[j].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricCheck {
    pub test: TestResult,
    pub samples: usize,
    pub warning: Option<String>,
}

pub const GEOMETRIC_MIN_SAMPLES: usize = 10_000;

/// Chi-square goodness of fit of offspring counts against Geometric(mu).
pub fn validate_offspring_geometric(samples: &[u64], mu: f64) -> Result<GeometricCheck> {
    let top = samples.iter().copied().max().unwrap_or(0) as usize;
    let mut hist = vec![0u64; top + 1];
    for &s in samples {
        hist[s as usize] += 1;
    }
    validate_offspring_histogram(&hist, mu)
}

/// As [`validate_offspring_geometric`], from `hist[k]` = number of samples equal to `k`.
pub fn validate_offspring_histogram(hist: &[u64], mu: f64) -> Result<GeometricCheck> {
    check_mu(mu)?;
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return config("no offspring samples");
    }
    let law = OffspringLaw::geometric(mu);
    let mut observed = hist.to_vec();
    observed.push(0);
    let mut probs: Vec<f64> = (0..hist.len() as u64).map(|k| law.pmf(k)).collect();
    probs.push((1.0 - probs.iter().sum::<f64>()).max(0.0));
    let samples = n as usize;
    let warning = (samples < GEOMETRIC_MIN_SAMPLES)
        .then(|| format!("only {samples} samples; the test has little power below {GEOMETRIC_MIN_SAMPLES}"));
    Ok(GeometricCheck { test: chi_square_gof(&observed, &probs, 5.0), samples, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_one_sample, Welford};

    #[test]
    fn branch_times_follow_cdf() {
        let mut rng = StreamKey::root(1).rng();
        let mut v = Vec::new();
        for _ in 0..5000 {
            v.extend(sample_branch_times(&mut rng, 3, 2.0).unwrap());
        }
        assert!(v.iter().all(|&x| (0.0..=0.5).contains(&x)));
        let t = ks_one_sample(&v, |x| branch_time_cdf(x, 2.0));
        assert!(t.p_value > 1e-3, "{t:?}");
    }

    #[test]
    fn qk_marginal_is_standard_normal() {
        // each point: variance (1 - 1/mu) mu = mu - 1 per coordinate
        let mut rng = StreamKey::root(2).rng();
        let mut w = Welford::new();
        for _ in 0..20_000 {
            for p in sample_qk(&mut rng, 3, 2.0, 2).unwrap().points {
                w.push(p[0]);
            }
        }
        assert!(w.mean.abs() < 0.03);
        assert!((w.variance() - 1.0).abs() < 0.03, "{}", w.variance());
    }

    #[test]
    fn qk_pair_correlation() {
        let mut rng = StreamKey::root(3).rng();
        let (mut sxy, mut sxx) = (0.0, 0.0);
        let n = 100_000;
        for _ in 0..n {
            let q = sample_qk(&mut rng, 2, 2.0, 1).unwrap();
            sxy += q.points[0][0] * q.points[1][0];
            sxx += q.points[0][0] * q.points[0][0];
        }
        let r = sxy / sxx;
        let oracle = (1.0 - 2f64.ln()) / 0.5;
        assert!((r - oracle).abs() < 0.02, "{r} vs {oracle}");
    }

    #[test]
    fn geometric_check_warns_on_small_samples() {
        let mut rng = StreamKey::root(4).rng();
        let s = OffspringLaw::geometric(2.0).sampler();
        let few: Vec<u64> = (0..500).map(|_| s.sample(&mut rng)).collect();
        assert!(validate_offspring_geometric(&few, 2.0).unwrap().warning.is_some());
        let many: Vec<u64> = (0..50_000).map(|_| s.sample(&mut rng)).collect();
        let c = validate_offspring_geometric(&many, 2.0).unwrap();
        assert!(c.warning.is_none());
        assert!(c.test.p_value > 1e-3);
    }

    #[test]
    fn free_run_is_deterministic() {
        let a = strm_free_run(1.5, 2, 8, StreamKey::root(5), 1_000_000).unwrap();
        let b = strm_free_run(1.5, 2, 8, StreamKey::root(5), 1_000_000).unwrap();
        assert_eq!(a, b);
        assert!(strm_free_run(1.0, 2, 3, StreamKey::root(5), 10).is_err());
    }
}
