//! Offspring and displacement laws.
//!
//! Every law exposes its pgf `E[s^Z]` and the complement `1 - E[(1-t)^Z]`
//! evaluated without cancellation, so the iterated-pgf oracle keeps full
//! relative precision when survival probabilities get small.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Error, Result};

/// Longest support a table law may have.
pub const MAX_TABLE_LEN: usize = 10_001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringLaw {
    Poisson { mean: f64 },
    /// Support {1, 2, ...} with `P(Z = k) = (1/mean)(1 - 1/mean)^(k-1)`.
    Geometric { mean: f64 },
    Binomial { n: u64, p: f64 },
    Deterministic { k: u64 },
    Table { probs: Vec<f64> },
    /// `shift + Z` where `Z` follows `base`.
    Shifted { shift: u64, base: Box<OffspringLaw> },
}

fn neumaier(terms: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `1 - (1-t)^k` for t in [0,1].
#[inline]
fn one_minus_pow(t: f64, k: f64) -> f64 {
    if k == 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        -(k * (-t).ln_1p()).exp_m1()
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

impl OffspringLaw {
    pub fn poisson(mean: f64) -> Self {
        OffspringLaw::Poisson { mean }
    }

    pub fn geometric(mean: f64) -> Self {
        OffspringLaw::Geometric { mean }
    }

    pub fn deterministic(k: u64) -> Self {
        OffspringLaw::Deterministic { k }
    }

    pub fn binomial(n: u64, p: f64) -> Self {
        OffspringLaw::Binomial { n, p }
    }

    /// Builds a table law. Probabilities must sum to one within 1e-12; a
    /// support longer than [`MAX_TABLE_LEN`] is cut and renormalized.
    pub fn table(probs: Vec<f64>) -> Result<Self> {
        let law = OffspringLaw::Table { probs };
        law.validate()?;
        let OffspringLaw::Table { mut probs } = law else { unreachable!() };
        if probs.len() > MAX_TABLE_LEN {
            probs.truncate(MAX_TABLE_LEN);
            let s = neumaier(probs.iter().copied());
            probs.iter_mut().for_each(|p| *p /= s);
        }
        Ok(OffspringLaw::Table { probs })
    }

    /// Checks parameters. Does not require a supercritical mean; see
    /// [`ModelParams::validate`] for that.
    pub fn validate(&self) -> Result<()> {
        match self {
            OffspringLaw::Poisson { mean } => {
                if !(mean.is_finite() && *mean >= 0.0) {
                    return Err(Error::InvalidLaw(format!("poisson mean {mean}")));
                }
            }
            OffspringLaw::Geometric { mean } => {
                if !(mean.is_finite() && *mean >= 1.0) {
                    return Err(Error::InvalidLaw(format!(
                        "geometric mean {mean} must be at least 1 (support starts at 1)"
                    )));
                }
            }
            OffspringLaw::Binomial { p, .. } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidLaw(format!("binomial p {p}")));
                }
            }
            OffspringLaw::Deterministic { .. } => {}
            OffspringLaw::Table { probs } => {
                if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::InvalidLaw("table needs nonnegative finite entries".into()));
                }
                let s = neumaier(probs.iter().copied());
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidLaw(format!("table sums to {s}, not 1")));
                }
            }
            OffspringLaw::Shifted { base, .. } => base.validate()?,
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } | OffspringLaw::Geometric { mean } => *mean,
            OffspringLaw::Binomial { n, p } => *n as f64 * p,
            OffspringLaw::Deterministic { k } => *k as f64,
            OffspringLaw::Table { probs } => {
                neumaier(probs.iter().enumerate().map(|(k, p)| k as f64 * p))
            }
            OffspringLaw::Shifted { shift, base } => *shift as f64 + base.mean(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } => *mean,
            OffspringLaw::Geometric { mean } => mean * (mean - 1.0),
            OffspringLaw::Binomial { n, p } => *n as f64 * p * (1.0 - p),
            OffspringLaw::Deterministic { .. } => 0.0,
            OffspringLaw::Table { probs } => {
                let m = self.mean();
                neumaier(probs.iter().enumerate().map(|(k, p)| (k as f64 - m).powi(2) * p))
            }
            OffspringLaw::Shifted { base, .. } => base.variance(),
        }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } => {
                if *mean == 0.0 {
                    return if k == 0 { 1.0 } else { 0.0 };
                }
                (-mean + k as f64 * mean.ln() - ln_gamma(k as f64 + 1.0)).exp()
            }
            OffspringLaw::Geometric { mean } => {
                if k == 0 {
                    0.0
                } else {
                    let a = 1.0 / mean;
                    a * (1.0 - a).powf(k as f64 - 1.0)
                }
            }
            OffspringLaw::Binomial { n, p } => {
                if k > *n {
                    0.0
                } else if *p == 0.0 || *p == 1.0 {
                    let hit = if *p == 0.0 { 0 } else { *n };
                    if k == hit { 1.0 } else { 0.0 }
                } else {
                    (ln_choose(*n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
                }
            }
            OffspringLaw::Deterministic { k: j } => {
                if k == *j { 1.0 } else { 0.0 }
            }
            OffspringLaw::Table { probs } => probs.get(k as usize).copied().unwrap_or(0.0),
            OffspringLaw::Shifted { shift, base } => {
                if k < *shift { 0.0 } else { base.pmf(k - shift) }
            }
        }
    }

    /// `E[s^Z]`.
    pub fn pgf(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return domain(format!("pgf argument {s} outside [0,1]"));
        }
        Ok(self.pgf_unchecked(s))
    }

    pub(crate) fn pgf_unchecked(&self, s: f64) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } => (mean * (s - 1.0)).exp(),
            OffspringLaw::Geometric { mean } => {
                let a = 1.0 / mean;
                a * s / (1.0 - (1.0 - a) * s)
            }
            OffspringLaw::Binomial { n, p } => (1.0 - p + p * s).powf(*n as f64),
            OffspringLaw::Deterministic { k } => s.powf(*k as f64),
            OffspringLaw::Table { probs } => probs.iter().rev().fold(0.0, |acc, p| acc * s + p),
            OffspringLaw::Shifted { shift, base } => s.powf(*shift as f64) * base.pgf_unchecked(s),
        }
    }

    /// `1 - pgf(1 - t)`, accurate for small `t`.
    pub fn complement(&self, t: f64) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } => -(-mean * t).exp_m1(),
            OffspringLaw::Geometric { mean } => {
                let a = 1.0 / mean;
                t / (a + (1.0 - a) * t)
            }
            OffspringLaw::Binomial { n, p } => one_minus_pow(p * t, *n as f64),
            OffspringLaw::Deterministic { k } => one_minus_pow(t, *k as f64),
            OffspringLaw::Table { probs } => neumaier(
                probs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, p)| p * one_minus_pow(t, k as f64)),
            ),
            OffspringLaw::Shifted { shift, base } => {
                let a = one_minus_pow(t, *shift as f64);
                let b = base.complement(t);
                a + b - a * b
            }
        }
    }

    /// Derivative of the pgf, used by Newton steps.
    pub fn pgf_derivative(&self, s: f64) -> f64 {
        match self {
            OffspringLaw::Poisson { mean } => mean * (mean * (s - 1.0)).exp(),
            OffspringLaw::Geometric { mean } => {
                let a = 1.0 / mean;
                let den = 1.0 - (1.0 - a) * s;
                a / (den * den)
            }
            OffspringLaw::Binomial { n, p } => {
                if *n == 0 {
                    0.0
                } else {
                    *n as f64 * p * (1.0 - p + p * s).powf(*n as f64 - 1.0)
                }
            }
            OffspringLaw::Deterministic { k } => {
                if *k == 0 {
                    0.0
                } else {
                    *k as f64 * s.powf(*k as f64 - 1.0)
                }
            }
            OffspringLaw::Table { probs } => probs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, p)| acc * s + k as f64 * p),
            OffspringLaw::Shifted { shift, base } => {
                let sh = *shift as f64;
                let lead = if *shift == 0 { 0.0 } else { sh * s.powf(sh - 1.0) };
                lead * base.pgf_unchecked(s) + s.powf(sh) * base.pgf_derivative(s)
            }
        }
    }

    /// Tabulates the law up to where the remaining mass drops below 1e-17
    /// or the table limit is reached, then renormalizes.
    pub fn to_table(&self) -> Vec<f64> {
        let mut probs = Vec::new();
        let mut cum = 0.0;
        let mean = self.mean();
        for k in 0..MAX_TABLE_LEN as u64 {
            let p = self.pmf(k);
            probs.push(p);
            cum += p;
            if 1.0 - cum < 1e-17 && k as f64 > mean {
                break;
            }
        }
        let s = neumaier(probs.iter().copied());
        probs.iter_mut().for_each(|p| *p /= s);
        while probs.len() > 1 && *probs.last().unwrap() == 0.0 {
            probs.pop();
        }
        probs
    }

    /// The law of `Z*`, `P(Z* = k) = k p_k / mean`.
    pub fn size_biased(&self) -> Result<OffspringLaw> {
        let mean = self.mean();
        if !(mean > 0.0) {
            return Err(Error::InvalidLaw("size-biasing needs a positive mean".into()));
        }
        Ok(match self {
            OffspringLaw::Poisson { mean } => OffspringLaw::Shifted {
                shift: 1,
                base: Box::new(OffspringLaw::Poisson { mean: *mean }),
            },
            OffspringLaw::Binomial { n, p } => OffspringLaw::Shifted {
                shift: 1,
                base: Box::new(OffspringLaw::Binomial { n: n - 1, p: *p }),
            },
            OffspringLaw::Deterministic { k } => OffspringLaw::Deterministic { k: *k },
            _ => {
                let base = match self {
                    OffspringLaw::Table { probs } => probs.clone(),
                    other => other.to_table(),
                };
                let mut probs: Vec<f64> =
                    base.iter().enumerate().map(|(k, p)| k as f64 * p / mean).collect();
                if !matches!(self, OffspringLaw::Table { .. }) {
                    // extend the tail a little, the biased law is heavier
                    let extra = (probs.len() / 2 + 8).min(MAX_TABLE_LEN.saturating_sub(probs.len()));
                    for k in probs.len()..probs.len() + extra {
                        probs.push(k as f64 * self.pmf(k as u64) / mean);
                    }
                }
                let s = neumaier(probs.iter().copied());
                probs.iter_mut().for_each(|p| *p /= s);
                OffspringLaw::table(probs)?
            }
        })
    }

    pub fn thinned(&self, p: f64) -> Result<ThinnedLaw> {
        if !(p > 0.0 && p <= 1.0) {
            return domain(format!("thinning probability {p} outside (0,1]"));
        }
        Ok(ThinnedLaw { base: self.clone(), p })
    }

    pub fn sampler(&self) -> LawSampler {
        match self {
            OffspringLaw::Poisson { mean } => LawSampler::Poisson(*mean),
            OffspringLaw::Geometric { mean } => {
                LawSampler::Geometric(rand_distr::Geometric::new(1.0 / mean).expect("validated"))
            }
            OffspringLaw::Binomial { n, p } => {
                LawSampler::Binomial(rand_distr::Binomial::new(*n, *p).expect("validated"))
            }
            OffspringLaw::Deterministic { k } => LawSampler::Const(*k),
            OffspringLaw::Table { probs } => {
                let mut acc = 0.0;
                let cdf = probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                LawSampler::Table(cdf)
            }
            OffspringLaw::Shifted { shift, base } => {
                LawSampler::Shifted(*shift, Box::new(base.sampler()))
            }
        }
    }
}

/// A prepared sampler; build once per law and reuse.
#[derive(Debug, Clone)]
pub enum LawSampler {
    Poisson(f64),
    Geometric(rand_distr::Geometric),
    Binomial(rand_distr::Binomial),
    Const(u64),
    Table(Vec<f64>),
    Shifted(u64, Box<LawSampler>),
}

impl LawSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            LawSampler::Poisson(m) => sample_poisson(rng, *m),
            LawSampler::Geometric(g) => g.sample(rng) + 1,
            LawSampler::Binomial(b) => b.sample(rng),
            LawSampler::Const(k) => *k,
            LawSampler::Table(cdf) => {
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u64
            }
            LawSampler::Shifted(s, b) => s + b.sample(rng),
        }
    }
}

/// Means below this use inversion on a single uniform.
pub const POISSON_INVERSION_MAX: f64 = 16.0;

/// Poisson draw by inversion of `u`; only for `lambda < POISSON_INVERSION_MAX`.
#[inline]
pub fn poisson_inversion(u: f64, lambda: f64) -> u64 {
    poisson_inversion_with(u, lambda, (-lambda).exp())
}

/// As [`poisson_inversion`] with `p0 = exp(-lambda)` supplied by the caller.
#[inline]
pub fn poisson_inversion_with(mut u: f64, lambda: f64, p0: f64) -> u64 {
    let mut p = p0;
    let mut k = 0u64;
    let limit = (lambda * 8.0) as u64 + 64;
    while u >= p && k < limit {
        u -= p;
        k += 1;
        p *= lambda / k as f64;
    }
    k
}

/// Poisson draw; inversion for small means, PTRS above.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    if lambda < POISSON_INVERSION_MAX {
        poisson_inversion(rng.random(), lambda)
    } else {
        rand_distr::Poisson::new(lambda).expect("finite lambda").sample(rng) as u64
    }
}

/// Poisson draw fully determined by a stream key.
#[inline]
pub fn keyed_poisson(key: crate::rng::StreamKey, lambda: f64) -> u64 {
    if !(lambda > 0.0) {
        0
    } else if lambda < POISSON_INVERSION_MAX {
        poisson_inversion(key.uniform(), lambda)
    } else {
        sample_poisson(&mut key.rng(), lambda)
    }
}

/// [`keyed_poisson`] with `p0 = exp(-lambda)` precomputed; same draws.
#[inline]
pub fn keyed_poisson_with(key: crate::rng::StreamKey, lambda: f64, p0: f64) -> u64 {
    if !(lambda > 0.0) {
        0
    } else if lambda < POISSON_INVERSION_MAX {
        poisson_inversion_with(key.uniform(), lambda, p0)
    } else {
        sample_poisson(&mut key.rng(), lambda)
    }
}

pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if n <= 16 {
        return (0..n).filter(|_| rng.random::<f64>() < p).count() as u64;
    }
    rand_distr::Binomial::new(n, p).expect("valid p").sample(rng)
}

/// `pgf'(1-)` from central differences at `1 - h` and `1 - 2h`, extrapolated
/// linearly to `s = 1`.
pub fn left_derivative_at_one(law: &OffspringLaw, h: f64) -> f64 {
    let central = |s: f64| (law.pgf_unchecked(s + h) - law.pgf_unchecked(s - h)) / (2.0 * h);
    2.0 * central(1.0 - h) - central(1.0 - 2.0 * h)
}

/// Bernoulli(p) thinning of an offspring law.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinnedLaw {
    pub base: OffspringLaw,
    pub p: f64,
}

impl ThinnedLaw {
    pub fn pgf(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return domain(format!("pgf argument {s} outside [0,1]"));
        }
        Ok(self.base.pgf_unchecked(1.0 - self.p + self.p * s))
    }

    pub fn complement(&self, t: f64) -> f64 {
        self.base.complement(self.p * t)
    }

    pub fn mean(&self) -> f64 {
        self.p * self.base.mean()
    }

    /// `p(1-p) mean + p^2 Var(Z)`.
    pub fn variance(&self) -> f64 {
        let p = self.p;
        p * (1.0 - p) * self.base.mean() + p * p * self.base.variance()
    }

    pub fn pgf_derivative(&self, s: f64) -> f64 {
        self.p * self.base.pgf_derivative(1.0 - self.p + self.p * s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementLaw {
    #[default]
    UniformDigits,
    GaussianSibling,
    DistinctSites,
}

impl DisplacementLaw {
    /// Polynomial tail bound `P(|X| > r) <= C r^-zeta`. Bounded kinds satisfy it
    /// for every zeta and so does the Gaussian.
    pub fn tail_condition(&self, zeta: f64) -> bool {
        zeta.is_finite()
    }
}

/// Uniform digit vector, encoded as `sum_i x_i B^i`.
#[inline]
pub fn sample_digits<R: Rng + ?Sized>(rng: &mut R, dim: u32, base: u32) -> u32 {
    rng.random_range(0..base.pow(dim))
}

pub fn digit_vector(index: u32, dim: u32, base: u32) -> Vec<u32> {
    let mut x = index;
    (0..dim)
        .map(|_| {
            let v = x % base;
            x /= base;
            v
        })
        .collect()
}

pub fn digit_index(digits: &[u32], base: u32) -> u32 {
    digits.iter().rev().fold(0, |acc, &v| acc * base + v)
}

/// `k` distinct digit vectors chosen uniformly.
pub fn sample_distinct_sites<R: Rng + ?Sized>(rng: &mut R, k: usize, dim: u32, base: u32) -> Result<Vec<u32>> {
    let sites = base.pow(dim) as usize;
    if k > sites {
        return domain(format!("cannot place {k} children on {sites} distinct sites"));
    }
    Ok(rand::seq::index::sample(rng, sites, k).into_iter().map(|i| i as u32).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Grid,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Subcritical,
    Critical,
    SupercriticalSpatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: u32,
    pub base: u32,
    pub offspring: OffspringLaw,
    #[serde(default)]
    pub displacement: DisplacementLaw,
    #[serde(default)]
    pub mode: Mode,
}

impl ModelParams {
    pub fn grid(dim: u32, base: u32, offspring: OffspringLaw) -> Self {
        ModelParams { dim, base, offspring, displacement: DisplacementLaw::UniformDigits, mode: Mode::Grid }
    }

    /// Grid parameters whose offspring is Poisson with thinned mean `c`.
    pub fn poisson_c(dim: u32, base: u32, c: f64) -> Self {
        Self::grid(dim, base, OffspringLaw::poisson(c * (base as f64).powi(dim as i32)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if self.base < 2 {
            return Err(Error::Config("base must be at least 2".into()));
        }
        if (self.base as u64).checked_pow(self.dim).map_or(true, |v| v > 1 << 16) {
            return Err(Error::Config("B^d above 65536 is not supported".into()));
        }
        self.offspring.validate()?;
        let mu = self.offspring.mean();
        if !(mu > 1.0) {
            return Err(Error::Regime(format!("offspring mean {mu} must exceed 1")));
        }
        if !self.offspring.variance().is_finite() {
            return Err(Error::InvalidLaw("offspring variance must be finite".into()));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.offspring.mean()
    }

    pub fn cells_per_parent(&self) -> u32 {
        self.base.pow(self.dim)
    }

    /// `beta = 2 ln B / ln mu`.
    pub fn beta(&self) -> f64 {
        2.0 * (self.base as f64).ln() / self.mu().ln()
    }

    /// `c = mu B^-d`, the mean of the thinned law.
    pub fn c(&self) -> f64 {
        self.mu() * (self.base as f64).powi(-(self.dim as i32))
    }

    /// `B^(2/beta - d)`; agrees with [`Self::c`].
    pub fn c_from_beta(&self) -> f64 {
        (self.base as f64).powf(2.0 / self.beta() - self.dim as f64)
    }

    pub fn rho(&self) -> f64 {
        match self.mode {
            Mode::Grid => 1.0 / self.base as f64,
            Mode::Free => self.mu().powf(-self.beta() / 2.0),
        }
    }

    /// Thinning probability `B^-d`.
    pub fn thin_p(&self) -> f64 {
        1.0 / self.cells_per_parent() as f64
    }

    pub fn thinned(&self) -> ThinnedLaw {
        ThinnedLaw { base: self.offspring.clone(), p: self.thin_p() }
    }

    pub fn regime(&self) -> Regime {
        let bd = self.cells_per_parent() as f64;
        let mu = self.mu();
        if (mu - bd).abs() <= 1e-12 * bd {
            Regime::Critical
        } else if mu < bd {
            Regime::Subcritical
        } else {
            Regime::SupercriticalSpatial
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn laws() -> Vec<OffspringLaw> {
        vec![
            OffspringLaw::poisson(4.0),
            OffspringLaw::geometric(2.5),
            OffspringLaw::binomial(6, 0.4),
            OffspringLaw::deterministic(3),
            OffspringLaw::table(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            OffspringLaw::Shifted { shift: 2, base: Box::new(OffspringLaw::poisson(1.5)) },
        ]
    }

    #[test]
    fn pgf_normalized_and_derivative_is_mean() {
        for law in laws() {
            assert!((law.pgf(1.0).unwrap() - 1.0).abs() < 1e-12, "{law:?}");
            let fd = left_derivative_at_one(&law, 1e-5);
            assert!((fd - law.mean()).abs() < 1e-6 * law.mean().max(1.0), "{law:?} {fd}");
            assert!((law.pgf_derivative(1.0) - law.mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn complement_matches_pgf() {
        for law in laws() {
            for t in [0.0, 1e-3, 0.3, 0.9, 1.0] {
                let direct = 1.0 - law.pgf(1.0 - t).unwrap();
                assert!((law.complement(t) - direct).abs() < 1e-13, "{law:?} t={t}");
            }
        }
    }

    #[test]
    fn pmf_mean_variance_agree() {
        for law in laws() {
            let table = law.to_table();
            let m: f64 = table.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            let v: f64 = table.iter().enumerate().map(|(k, p)| (k as f64 - m).powi(2) * p).sum();
            assert!((m - law.mean()).abs() < 1e-9, "{law:?}");
            assert!((v - law.variance()).abs() < 1e-8, "{law:?}");
        }
    }

    #[test]
    fn pgf_examples() {
        assert_eq!(OffspringLaw::deterministic(2).pgf(0.5).unwrap(), 0.25);
        let series: f64 = (0..60).map(|k| OffspringLaw::poisson(4.0).pmf(k) * 0f64.powi(k as i32)).sum();
        let e4 = OffspringLaw::poisson(4.0).pgf(0.0).unwrap();
        assert!((e4 - 0.018_315_638_888_734_18).abs() < 1e-15);
        assert!((series - e4).abs() < 1e-15);
        assert!(OffspringLaw::poisson(4.0).pgf(1.5).is_err());
        assert!(OffspringLaw::poisson(4.0).pgf(-0.1).is_err());
    }

    #[test]
    fn thinned_examples() {
        let t = OffspringLaw::poisson(4.0).thinned(0.25).unwrap();
        assert!((t.pgf(0.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((t.variance() - 1.0).abs() < 1e-15);
        let d = OffspringLaw::deterministic(3).thinned(0.5).unwrap();
        assert_eq!(d.pgf(0.0).unwrap(), 0.125);
        let law = OffspringLaw::geometric(3.0);
        let full = law.thinned(1.0).unwrap();
        assert_eq!(full.pgf(0.4).unwrap(), law.pgf(0.4).unwrap());
        assert!(law.thinned(0.0).is_err());
        // Deterministic(B^d): variance p(1-p)mu
        let det = OffspringLaw::deterministic(8).thinned(0.125).unwrap();
        assert!((det.variance() - 0.875).abs() < 1e-15);
    }

    #[test]
    fn size_biased_examples() {
        let sb = OffspringLaw::poisson(4.0).size_biased().unwrap();
        let tv: f64 = (0..=60u64)
            .map(|k| {
                let direct = k as f64 * OffspringLaw::poisson(4.0).pmf(k) / 4.0;
                let shifted = if k == 0 { 0.0 } else { OffspringLaw::poisson(4.0).pmf(k - 1) };
                (direct - sb.pmf(k)).abs() + (shifted - sb.pmf(k)).abs()
            })
            .sum();
        assert!(tv < 1e-3);
        assert_eq!(OffspringLaw::deterministic(5).size_biased().unwrap(), OffspringLaw::deterministic(5));
        let g = OffspringLaw::geometric(2.0).size_biased().unwrap();
        assert!((g.pmf(1) - 0.25).abs() < 1e-12);
        for law in laws() {
            let sb = law.size_biased().unwrap();
            assert!((sb.mean() - (law.mean() + law.variance() / law.mean())).abs() < 1e-8, "{law:?}");
            let sbb = sb.size_biased().unwrap();
            assert!(sbb.mean() >= sb.mean() - 1e-12);
        }
        assert!(OffspringLaw::table(vec![1.0]).unwrap().size_biased().is_err());
    }

    #[test]
    fn table_validation() {
        assert!(OffspringLaw::table(vec![0.5, 0.4]).is_err());
        assert!(OffspringLaw::table(vec![0.5, -0.1, 0.6]).is_err());
        let mut long = vec![0.0; 20_000];
        long[0] = 0.5;
        long[19_999] = 0.5;
        let OffspringLaw::Table { probs } = OffspringLaw::table(long).unwrap() else { panic!() };
        assert_eq!(probs.len(), MAX_TABLE_LEN);
        assert!((probs[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_examples() {
        let mut rng = StreamKey::root(3).rng();
        let s = OffspringLaw::deterministic(3).sampler();
        assert!((0..100).all(|_| s.sample(&mut rng) == 3));
        let s = OffspringLaw::poisson(4.0).sampler();
        let n = 100_000;
        let mean = (0..n).map(|_| s.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((3.96..=4.04).contains(&mean), "{mean}");
        let mut counts = [0u32; 4];
        for _ in 0..n {
            counts[sample_digits(&mut rng, 2, 2) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn sampler_means() {
        let mut rng = StreamKey::root(5).rng();
        for law in laws() {
            let s = law.sampler();
            let n = 200_000;
            let mean = (0..n).map(|_| s.sample(&mut rng) as f64).sum::<f64>() / n as f64;
            let se = (law.variance() / n as f64).sqrt();
            assert!((mean - law.mean()).abs() < 5.0 * se + 1e-12, "{law:?} {mean}");
        }
        let big = (0..20_000).map(|_| sample_poisson(&mut rng, 300.0) as f64).sum::<f64>() / 20_000.0;
        assert!((big - 300.0).abs() < 1.0);
    }

    #[test]
    fn params_beta_c_agree() {
        for (d, b, mu) in [(2, 2, 4.0), (3, 2, 4.0), (1, 3, 2.0), (2, 5, 7.3)] {
            let p = ModelParams::grid(d, b, OffspringLaw::poisson(mu));
            assert!((p.c() - p.c_from_beta()).abs() < 1e-12);
            assert!((p.rho() - 1.0 / b as f64).abs() < 1e-15);
        }
        assert_eq!(ModelParams::grid(2, 2, OffspringLaw::poisson(4.0)).regime(), Regime::Critical);
        assert_eq!(ModelParams::grid(3, 2, OffspringLaw::poisson(4.0)).regime(), Regime::Subcritical);
        assert_eq!(ModelParams::grid(1, 2, OffspringLaw::poisson(4.0)).regime(), Regime::SupercriticalSpatial);
        assert!(ModelParams::grid(2, 2, OffspringLaw::poisson(0.9)).validate().is_err());
        let mut free = ModelParams::grid(2, 2, OffspringLaw::geometric(4.0));
        free.mode = Mode::Free;
        assert!((free.rho() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn serde_grammar() {
        let law: OffspringLaw = serde_json::from_str(r#"{"kind":"poisson","mean":4.0}"#).unwrap();
        assert_eq!(law, OffspringLaw::poisson(4.0));
        let law: OffspringLaw = serde_json::from_str(r#"{"kind":"table","probs":[0.5,0.5]}"#).unwrap();
        assert_eq!(law.mean(), 0.5);
    }

    #[test]
    fn distinct_sites_are_distinct() {
        let mut rng = StreamKey::root(2).rng();
        let mut v = sample_distinct_sites(&mut rng, 4, 2, 2).unwrap();
        v.sort();
        assert_eq!(v, vec![0, 1, 2, 3]);
        assert!(sample_distinct_sites(&mut rng, 5, 2, 2).is_err());
        assert_eq!(digit_index(&digit_vector(13, 3, 3), 3), 13);
    }
}
