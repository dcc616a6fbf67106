//! Iterated generating functions: extinction, survival and hitting curves.
//!
//! Curves are computed on the complement side. With `T(t) = 1 - f_R(1 - t)`
//! the survival curve is `T^m(1)` and the hitting curve is `T^m(1 - q)`. Each
//! law supplies `T` in a form without cancellation, so values far below the
//! double-precision spacing near 1 stay accurate.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::laws::{OffspringLaw, ThinnedLaw};
use crate::stats::{least_squares, linear_regression};

pub const MAX_HORIZON: usize = 1_000_000;

/// Smallest root of `pgf(s) = s` in [0, 1].
pub fn extinction_prob(law: &OffspringLaw) -> Result<f64> {
    law.validate()?;
    let mu = law.mean();
    if !(mu > 1.0) {
        return Err(Error::Regime(format!("mean {mu} <= 1, extinction is certain")));
    }
    let g = |s: f64| law.pgf_unchecked(s) - s;
    if g(0.0) <= 0.0 {
        return Ok(0.0);
    }
    // g > 0 on [0, q) and g < 0 on (q, 1)
    let mut hi = 0.5;
    let mut k = 1;
    while g(hi) >= 0.0 {
        k += 1;
        if k > 60 {
            return Err(Error::Domain("could not bracket the extinction root".into()));
        }
        hi = 1.0 - 0.5f64.powi(k);
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut q = 0.5 * (lo + hi);
    for _ in 0..8 {
        let slope = law.pgf_derivative(q) - 1.0;
        if slope == 0.0 {
            break;
        }
        let next = q - g(q) / slope;
        if !(next >= 0.0 && next < 1.0) || (next - q).abs() < 1e-17 {
            break;
        }
        q = next;
    }
    Ok(q)
}

/// `T^n(t)` for the thinned law.
pub fn iterate_complement(law: &ThinnedLaw, t: f64, n: usize) -> f64 {
    (0..n).fold(t, |acc, _| law.complement(acc))
}

/// `f_R^{∘n}(s)`.
pub fn iterate_pgf(law: &ThinnedLaw, s: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return domain(format!("pgf argument {s} outside [0,1]"));
    }
    Ok(1.0 - iterate_complement(law, 1.0 - s, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgfCurve {
    pub law: OffspringLaw,
    pub p: f64,
    pub horizon: usize,
    /// `survival[m] = 1 - f_R^{∘m}(0)`, m = 0..=horizon.
    pub survival: Vec<f64>,
    /// `hitting[m] = 1 - f_R^{∘m}(q)`.
    pub hitting: Vec<f64>,
    pub q: f64,
    /// Set when a survival value fell below 1e-300.
    pub underflow: bool,
}

impl PgfCurve {
    pub fn thinned_mean(&self) -> f64 {
        self.p * self.law.mean()
    }

    pub fn thinned(&self) -> ThinnedLaw {
        ThinnedLaw { base: self.law.clone(), p: self.p }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,survival,hitting\n");
        for m in 0..=self.horizon {
            out.push_str(&format!("{m},{:e},{:e}\n", self.survival[m], self.hitting[m]));
        }
        out
    }
}

/// Survival and hitting curves of the `p`-thinned law up to `horizon`.
pub fn pgf_curve(law: &OffspringLaw, p: f64, horizon: usize) -> Result<PgfCurve> {
    if horizon > MAX_HORIZON {
        return domain(format!("horizon {horizon} above {MAX_HORIZON}"));
    }
    let thinned = law.thinned(p)?;
    let q = extinction_prob(law)?;
    let mut survival = Vec::with_capacity(horizon + 1);
    let mut hitting = Vec::with_capacity(horizon + 1);
    let (mut s, mut h) = (1.0, 1.0 - q);
    survival.push(s);
    hitting.push(h);
    let mut underflow = false;
    for _ in 0..horizon {
        s = thinned.complement(s);
        h = thinned.complement(h);
        underflow |= s < 1e-300;
        survival.push(s);
        hitting.push(h);
    }
    Ok(PgfCurve { law: law.clone(), p, horizon, survival, hitting, q, underflow })
}

pub fn survival_curve(law: &OffspringLaw, p: f64, horizon: usize) -> Result<PgfCurve> {
    pgf_curve(law, p, horizon)
}

pub fn hitting_curve(law: &OffspringLaw, p: f64, horizon: usize) -> Result<PgfCurve> {
    pgf_curve(law, p, horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveRegime {
    Critical,
    Subcritical,
    Supercritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub regime: CurveRegime,
    pub thinned_mean: f64,
    pub thinned_variance: f64,
    /// Fitted `lim m survival[m]` (critical only).
    pub kolmogorov_constant_est: Option<f64>,
    /// `2 / Var(R)`.
    pub exact_constant: Option<f64>,
    /// `2 mu / (mu - 1)`, which assumes `Var(R) = 1 - B^-d`.
    pub displayed_constant: Option<f64>,
    pub m_survival_at_horizon: f64,
    pub m_hitting_at_horizon: f64,
    /// Fitted slope of `ln survival[m]` (subcritical only).
    pub decay_rate_est: Option<f64>,
    pub ln_thinned_mean: f64,
    /// `survival[M] / E[R]^M` and `hitting[M] / survival[M]` (subcritical only).
    pub survival_constant_est: Option<f64>,
    pub hitting_ratio_est: Option<f64>,
    pub note: String,
}

pub fn asymptotic_report(curve: &PgfCurve) -> Result<AsymptoticReport> {
    if curve.horizon < 100 {
        return domain("asymptotic fits need a horizon of at least 100");
    }
    let thinned = curve.thinned();
    let mr = thinned.mean();
    let vr = thinned.variance();
    let mu = curve.law.mean();
    let horizon = curve.horizon;
    let regime = if (mr - 1.0).abs() < 1e-12 {
        CurveRegime::Critical
    } else if mr < 1.0 {
        CurveRegime::Subcritical
    } else {
        CurveRegime::Supercritical
    };
    let mut report = AsymptoticReport {
        regime,
        thinned_mean: mr,
        thinned_variance: vr,
        kolmogorov_constant_est: None,
        exact_constant: None,
        displayed_constant: None,
        m_survival_at_horizon: horizon as f64 * curve.survival[horizon],
        m_hitting_at_horizon: horizon as f64 * curve.hitting[horizon],
        decay_rate_est: None,
        ln_thinned_mean: mr.ln(),
        survival_constant_est: None,
        hitting_ratio_est: None,
        note: String::new(),
    };
    match regime {
        CurveRegime::Critical => {
            // 1/s_m = (Var/2) m + a ln m + b + o(1)
            let start = (horizon / 10).max(10);
            let step = ((horizon - start) / 2000).max(1);
            let ms: Vec<usize> = (start..=horizon).step_by(step).collect();
            let rows: Vec<Vec<f64>> = ms.iter().map(|&m| vec![m as f64, (m as f64).ln(), 1.0]).collect();
            let y: Vec<f64> = ms.iter().map(|&m| 1.0 / curve.survival[m]).collect();
            let beta = least_squares(&rows, &y);
            report.kolmogorov_constant_est = Some(1.0 / beta[0]);
            report.exact_constant = Some(2.0 / vr);
            report.displayed_constant = Some(2.0 * mu / (mu - 1.0));
            report.note = format!(
                "exact constant 2/Var(R) = {:.6}; the displayed constant 2mu/(mu-1) = {:.6} \
                 assumes Var(R) = 1 - B^-d and only matches for deterministic offspring",
                2.0 / vr,
                2.0 * mu / (mu - 1.0)
            );
        }
        CurveRegime::Subcritical => {
            let (lo, hi) = if horizon >= 80 { (40, 80) } else { (horizon / 2, horizon) };
            let ms: Vec<f64> = (lo..=hi).map(|m| m as f64).collect();
            let ls: Vec<f64> = (lo..=hi).map(|m| curve.survival[m].ln()).collect();
            let fit = linear_regression(&ms, &ls);
            report.decay_rate_est = Some(fit.slope);
            report.survival_constant_est = Some(curve.survival[hi] / mr.powi(hi as i32));
            report.hitting_ratio_est = Some(curve.hitting[hi] / curve.survival[hi]);
        }
        CurveRegime::Supercritical => {
            report.note = "thinned mean above 1: survival tends to a positive limit, no rate fitted".into();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extinction_examples() {
        assert_eq!(extinction_prob(&OffspringLaw::geometric(3.0)).unwrap(), 0.0);
        assert_eq!(extinction_prob(&OffspringLaw::deterministic(2)).unwrap(), 0.0);
        let law = OffspringLaw::poisson(4.0);
        let q = extinction_prob(&law).unwrap();
        assert!((law.pgf(q).unwrap() - q).abs() < 1e-14);
        assert!((q - 0.019_827_4).abs() < 1e-6);
        let q = extinction_prob(&OffspringLaw::binomial(4, 0.5)).unwrap();
        assert!((q - 0.087_378_0).abs() < 1e-6);
        assert!(matches!(extinction_prob(&OffspringLaw::poisson(1.0)), Err(Error::Regime(_))));
    }

    #[test]
    fn critical_curve() {
        let c = pgf_curve(&OffspringLaw::poisson(4.0), 0.25, 1000).unwrap();
        assert!((c.survival[1] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let ms = 1000.0 * c.survival[1000];
        assert!((1.9..=2.0).contains(&ms), "{ms}");
        let mh = 1000.0 * c.hitting[1000];
        assert!((mh / ms - 1.0).abs() < 0.05);
        assert!(c.survival.windows(2).all(|w| w[1] < w[0]));
        assert!(c.hitting.iter().zip(&c.survival).all(|(h, s)| h <= s));
    }

    #[test]
    fn geometric_hitting_is_survival() {
        let c = pgf_curve(&OffspringLaw::geometric(4.0), 0.25, 50).unwrap();
        assert_eq!(c.survival, c.hitting);
    }

    #[test]
    fn composition_consistency() {
        let law = OffspringLaw::poisson(4.0).thinned(0.125).unwrap();
        let q = extinction_prob(&OffspringLaw::poisson(4.0)).unwrap();
        for (a, b) in [(3, 7), (20, 30), (50, 1), (0, 12)] {
            for s in [0.0, q, 0.5] {
                let whole = iterate_pgf(&law, s, a + b).unwrap();
                let split = iterate_pgf(&law, iterate_pgf(&law, s, b).unwrap(), a).unwrap();
                assert!((whole - split).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reports() {
        let c = pgf_curve(&OffspringLaw::poisson(4.0), 0.25, 10_000).unwrap();
        let r = asymptotic_report(&c).unwrap();
        assert_eq!(r.regime, CurveRegime::Critical);
        assert!((r.kolmogorov_constant_est.unwrap() - 2.0).abs() < 0.05);
        assert!((r.displayed_constant.unwrap() - 8.0 / 3.0).abs() < 1e-12);

        let c = pgf_curve(&OffspringLaw::deterministic(4), 0.25, 10_000).unwrap();
        let r = asymptotic_report(&c).unwrap();
        let target = 2.0 / (1.0 - 0.25);
        assert!((r.kolmogorov_constant_est.unwrap() - target).abs() < 0.05);

        let c = pgf_curve(&OffspringLaw::poisson(4.0), 0.125, 100).unwrap();
        let r = asymptotic_report(&c).unwrap();
        assert_eq!(r.regime, CurveRegime::Subcritical);
        assert!((r.decay_rate_est.unwrap() - 0.5f64.ln()).abs() < 1e-3);
        let s = &c.survival;
        assert!((s[60] / 0.5f64.powi(60)) / (s[80] / 0.5f64.powi(80)) - 1.0 < 1e-3);
        let h = &c.hitting;
        assert!(((h[60] / s[60]) / (h[80] / s[80]) - 1.0).abs() < 1e-3);
        assert!(asymptotic_report(&pgf_curve(&OffspringLaw::poisson(4.0), 0.125, 50).unwrap()).is_err());
    }

    #[test]
    fn deep_iteration_does_not_underflow_early() {
        let c = pgf_curve(&OffspringLaw::poisson(4.0), 0.25, 100_000).unwrap();
        let v = 100_000.0 * c.survival[100_000];
        assert!((v - 2.0).abs() < 0.01, "{v}");
        assert!(!c.underflow);
    }
}
