//! Acceptance criteria, each evaluated through the experiment suites with a
//! fixed seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::experiments::{run_experiment, Experiment, ExperimentConfig, RunSummary, Sweep, SweepAxis, SweepPoint};
use crate::laws::{ModelParams, OffspringLaw};
use crate::stats::wilson_interval;

pub const SUITE_SEED: u64 = 1729;

/// Criteria whose targets the model does not reach at the prescribed sizes;
/// they are run and reported like the rest.
pub const KNOWN_UNATTAINABLE: [u32; 4] = [6, 7, 8, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub detail: String,
    /// Hash of the suite summaries behind the verdict.
    pub digest: String,
    pub seconds: f64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.seconds
        )
    }
}

struct Ctx {
    threads: usize,
}

impl Ctx {
    fn config(&self, exp: Experiment, model: Option<ModelParams>, levels: Option<u32>, replicates: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(exp);
        c.seed = SUITE_SEED;
        c.threads = Some(self.threads);
        c.model = model;
        c.levels = levels;
        c.replicates = replicates;
        c
    }

    fn run(&self, c: &ExperimentConfig) -> Result<RunSummary> {
        Ok(run_experiment(c)?.summary)
    }
}

fn poisson(d: u32, mu: f64) -> Option<ModelParams> {
    Some(ModelParams::grid(d, 2, OffspringLaw::poisson(mu)))
}

fn digest(summaries: &[&RunSummary]) -> String {
    let mut h = Sha256::new();
    for s in summaries {
        h.update(s.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

fn freq_est(p: &SweepPoint, name: &str) -> Option<(u64, u64, f64)> {
    p.frequencies.get(name).map(|f| (f.successes, f.trials, f.estimate))
}

/// Whether `target` lies in the Wilson interval with `z` standard deviations.
fn in_wilson(s: u64, n: u64, z: f64, target: f64) -> bool {
    wilson_interval(s, n, z).is_some_and(|(lo, hi)| lo <= target && target <= hi)
}

type Verdict = (bool, String, Vec<RunSummary>);

fn c1(ctx: &Ctx) -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut sums = Vec::new();
    for (d, name) in [(2, "critical"), (3, "subcritical")] {
        let s = ctx.run(&ctx.config(Experiment::Survival, poisson(d, 4.0), Some(8), 10_000))?;
        let mut worst = 0.0f64;
        let mut bad = 0;
        for p in &s.points {
            let (k, n, est) = freq_est(p, "occupied").unwrap_or((0, 0, f64::NAN));
            let exact = p.exact["survival_exact"];
            if !in_wilson(k, n, 3.0, exact) {
                bad += 1;
            }
            worst = worst.max((est - exact).abs());
        }
        ok &= bad == 0;
        parts.push(format!("{name}: {bad} of 9 levels outside the 3-sigma band, max |diff| {worst:.4}"));
        sums.push(s);
    }
    Ok((ok, parts.join("; "), sums))
}

fn c2(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::GwExactTables, poisson(2, 4.0), Some(1000), 0))?;
    let p = &s.points[0];
    let ms = p.exact["m_survival_at_horizon"];
    let ok = (ms - 2.0).abs() <= 0.1;
    let detail = format!(
        "1000 s_1000 = {ms:.5} (target 2 = 2/Var R); displayed constant 2mu/(mu-1) = {:.4} assumes Var R = 1 - B^-d = 0.75, \
         while thinned Poisson has Var R = {}",
        p.exact["displayed_constant"], p.exact["thinned_variance"]
    );
    Ok((ok, detail, vec![s]))
}

fn c3(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::GwExactTables, poisson(3, 4.0), Some(100), 0))?;
    let p = &s.points[0];
    let slope = p.exact["decay_rate_est"];
    let target = 0.5f64.ln();
    let ok = (slope - target).abs() <= 1e-3;
    Ok((ok, format!("fitted slope {slope:.6}, ln 0.5 = {target:.6}, |diff| {:.2e}", (slope - target).abs()), vec![s]))
}

fn c4(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::MeanMeasure, poisson(2, 4.0), Some(5), 10_000))?;
    let mut bad = 0;
    let mut worst = 0.0f64;
    for p in &s.points {
        let m = &p.means["scaled_count"];
        let target = p.exact["lebesgue"];
        if !m.within(target, 3.0) {
            bad += 1;
        }
        worst = worst.max((m.mean - target).abs() / m.std_err);
    }
    Ok((bad == 0, format!("{bad} of {} cells outside 3 sigma of 2^-10, max |z| {worst:.2}", s.points.len()), vec![s]))
}

fn c5(ctx: &Ctx) -> Result<Verdict> {
    let mut a = ctx.config(Experiment::CouplingContainment, poisson(2, 4.0), Some(12), 1000);
    a.sweep = Some(Sweep { axis: SweepAxis::C, values: vec![0.6, 1.0] });
    let sa = ctx.run(&a)?;
    let mut b = ctx.config(Experiment::MonotoneCoupling, poisson(2, 4.0), Some(12), 1000);
    b.sweep = Some(Sweep { axis: SweepAxis::C, values: vec![0.6, 1.0] });
    let sb = ctx.run(&b)?;
    let va: Vec<u64> = sa.points.iter().map(|p| p.counts["violations"]).collect();
    let vb: u64 = sb.points.iter().map(|p| p.counts["violations"]).sum();
    let ok = va.iter().all(|&v| v == 0) && vb == 0;
    Ok((ok, format!("fractal-in-STRM violations {va:?} at c = 0.6, 1.0; monotone violations {vb}"), vec![sa, sb]))
}

fn c6(ctx: &Ctx) -> Result<Verdict> {
    let mut c = ctx.config(Experiment::Survival, poisson(2, 4.0), Some(50), 1000);
    c.sweep = Some(Sweep { axis: SweepAxis::P, values: vec![0.24, 0.5] });
    let s = ctx.run(&c)?;
    let low = &s.points[0];
    let (_, _, ext) = freq_est(low, "extinct_by_level").unwrap();
    let ok_low = ext >= 0.99;
    let high = &s.points[1];
    let (k, n, alive) = freq_est(high, "alive").unwrap();
    let target = high.exact["survival_exact"];
    let ok_high = in_wilson(k, n, 3.0, target);
    let detail = format!(
        "p=0.24: extinct by 50 in {ext:.3} (need >= 0.99; exact {:.5}); p=0.5: survival {alive:.3} vs 1-q = {target:.5} {}",
        low.exact["extinct_by_level_exact"],
        if ok_high { "inside 3 sigma" } else { "outside 3 sigma" }
    );
    Ok((ok_low && ok_high, detail, vec![s]))
}

fn c7(ctx: &Ctx) -> Result<Verdict> {
    let mut a = ctx.config(Experiment::TdCertify, poisson(3, 4.0), Some(2), 1000);
    a.options.horizon = Some(26);
    let sa = ctx.run(&a)?;
    let mut b = ctx.config(Experiment::TdCertify, poisson(2, 4.0), Some(2), 1000);
    b.options.horizon = Some(26);
    let sb = ctx.run(&b)?;
    let (_, na, fa) = freq_est(&sa.points[0], "found_given_surviving").unwrap();
    let (_, nb, fb) = freq_est(&sb.points[0], "found_given_surviving").unwrap();
    let ok = fa >= 0.95 && fb < fa;
    let detail = format!(
        "d=3: separated by level 26 in {fa:.3} of {na} surviving runs (need >= 0.95); d=2 contrast {fb:.3} of {nb} ({} inconclusive)",
        sb.points[0].counts["inconclusive"]
    );
    Ok((ok, detail, vec![sa, sb]))
}

fn c8(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::GammaSupermartingale, poisson(3, 4.0), Some(40), 10_000))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for p in &s.points {
        let rows = p.counts["drift_rows"];
        let good = p.counts["drift_rows_within_bound"];
        let (_, _, abs) = freq_est(p, "absorbed").unwrap();
        let sound = p.counts["unsound_pairs"] == 0;
        ok &= rows == good && abs >= 0.99 && sound;
        parts.push(format!("{}: drift {good}/{rows} rows within k + 3se, absorbed {abs:.4}", p.label));
    }
    Ok((ok, parts.join("; "), vec![s]))
}

fn c9(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::Spine, poisson(3, 4.0), Some(100_000), 10_000_000))?;
    let long = &s.points[0];
    let mean = long.means["excess"].mean;
    let ok_mean = (mean - 1.0).abs() <= 0.1;
    let events: Vec<_> = s.points[1..].iter().filter_map(|p| p.frequencies.get("event_given_alone")).collect();
    let closed = s.points[1].exact["closed_form"];
    let all_present = events.len() == s.points.len() - 1;
    let overlap = events.iter().all(|a| events.iter().all(|b| a.lo <= b.hi && b.lo <= a.hi));
    let cover = events.iter().all(|f| f.lo <= closed && closed <= f.hi);
    let desc: Vec<String> =
        events.iter().map(|f| format!("{}/{} [{:.2e}, {:.2e}]", f.successes, f.trials, f.lo, f.hi)).collect();
    let detail = format!(
        "long-run mean {mean:.4}; E_m at m=5,10,20: {}; closed form {closed:.4e}; overlap {overlap}, cover {cover}",
        desc.join(", ")
    );
    Ok((ok_mean && all_present && overlap && cover, detail, vec![s]))
}

fn c10(ctx: &Ctx) -> Result<Verdict> {
    let s = ctx.run(&ctx.config(Experiment::SbmValidate, None, Some(20), 2000))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for p in &s.points {
        let ps: Vec<String> = p.p_values.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
        ok &= p.p_values.values().all(|&v| v > 0.01);
        parts.push(format!("{}: {}", p.label, ps.join(", ")));
    }
    Ok((ok, parts.join("; "), vec![s]))
}

fn c11(ctx: &Ctx) -> Result<Verdict> {
    let g = ctx.run(&ctx.config(Experiment::GrowthExponent, poisson(3, 4.0), Some(12), 64))?;
    let slope = g.points[0].means.get("slope").copied();
    let ok_slope = slope.is_some_and(|m| (m.mean - 2.0).abs() <= 0.2);
    let h = ctx.run(&ctx.config(Experiment::HStatistic, poisson(2, 4.0), Some(12), 100))?;
    let p = h.points[0].p_values.get("positive_trend").copied();
    let ok_h = p.is_some_and(|p| p >= 0.05);
    let h_mean = |m: usize| h.points[m + 1].means.get("h_statistic").map(|e| e.mean).unwrap_or(f64::NAN);
    let detail = format!(
        "slope {} (target 2 +- 0.2, exact unconditional {:.4}); h-statistic trend p = {} (mean h {:.3} at m=6, {:.3} at m=12)",
        slope.map(|m| format!("{:.4} se {:.4}", m.mean, m.std_err)).unwrap_or_else(|| "n/a".into()),
        g.points[0].exact["unconditional_exact_slope"],
        p.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into()),
        h_mean(6),
        h_mean(12)
    );
    Ok((ok_slope && ok_h, detail, vec![g, h]))
}

fn c12(ctx: &Ctx) -> Result<Verdict> {
    let mut c = ctx.config(Experiment::CrossingSweep, poisson(2, 4.0), Some(8), 400);
    c.sweep = Some(Sweep { axis: SweepAxis::P, values: vec![0.4, 0.5, 0.55, 0.7, 0.85, 0.95] });
    let s = ctx.run(&c)?;
    let est = |v: f64| s.points.iter().find(|p| p.axis_value == Some(v)).and_then(|p| freq_est(p, "crossed")).map(|x| x.2);
    let sweep: Vec<f64> = [0.4, 0.55, 0.7, 0.85, 0.95].iter().filter_map(|&v| est(v)).collect();
    let mono = sweep.len() == 5 && sweep.windows(2).all(|w| w[0] <= w[1]);
    let at_half = est(0.5).unwrap_or(f64::NAN);
    let ok = mono && at_half <= 0.05;
    let shown: Vec<String> = sweep.iter().map(|v| format!("{v:.3}")).collect();
    Ok((ok, format!("crossing {} over p = 0.4..0.95; at p=0.5 {at_half:.3}", shown.join(" <= ")), vec![s]))
}

type CriterionFn = fn(&Ctx) -> Result<Verdict>;

const CRITERIA: [(u32, &str, CriterionFn); 12] = [
    (1, "grid survival matches the pgf oracle", c1),
    (2, "critical survival rate", c2),
    (3, "subcritical decay rate", c3),
    (4, "mean measure is Lebesgue", c4),
    (5, "coupling containments", c5),
    (6, "fractal percolation survival dichotomy", c6),
    (7, "total disconnectedness certifier", c7),
    (8, "pair process supermartingale", c8),
    (9, "spine immigration chain", c9),
    (10, "Gaussian sibling bridge", c10),
    (11, "growth exponent and h-statistic", c11),
    (12, "crossing monotonicity and bound", c12),
];

/// Criteria 1 to 12 on a pool of `threads` threads. `each` sees every outcome
/// as soon as it is known.
pub fn run_criteria(threads: usize, mut each: impl FnMut(&CriterionOutcome)) -> Result<Vec<CriterionOutcome>> {
    let ctx = Ctx { threads };
    let mut out = Vec::new();
    for (id, title, f) in CRITERIA {
        let start = Instant::now();
        let (passed, detail, sums) = f(&ctx)?;
        let refs: Vec<&RunSummary> = sums.iter().collect();
        let o = CriterionOutcome {
            id,
            title: title.to_string(),
            passed,
            detail,
            digest: digest(&refs),
            seconds: start.elapsed().as_secs_f64(),
        };
        each(&o);
        out.push(o);
    }
    Ok(out)
}

/// Criterion 13 from two runs of criteria 1 to 12.
pub fn determinism(a: &[CriterionOutcome], b: &[CriterionOutcome], threads: (usize, usize)) -> CriterionOutcome {
    let differing: Vec<u32> =
        a.iter().zip(b).filter(|(x, y)| x.digest != y.digest || x.detail != y.detail).map(|(x, _)| x.id).collect();
    let passed = a.len() == b.len() && differing.is_empty();
    let all: Vec<&str> = a.iter().map(|o| o.digest.as_str()).collect();
    CriterionOutcome {
        id: 13,
        title: "determinism across thread counts".into(),
        passed,
        detail: if passed {
            format!("criteria 1-12 identical on {} and {} threads", threads.0, threads.1)
        } else {
            format!("criteria {differing:?} differ between {} and {} threads", threads.0, threads.1)
        },
        digest: hex::encode(Sha256::digest(all.join("").as_bytes())),
        seconds: 0.0,
    }
}

/// The full suite: criteria 1 to 12 on 1 and 4 threads, then criterion 13.
/// Returns the 13 outcomes of the first pass plus the determinism verdict.
pub fn run_acceptance(mut each: impl FnMut(&CriterionOutcome)) -> Result<Vec<CriterionOutcome>> {
    let first = run_criteria(1, &mut each)?;
    let second = run_criteria(4, |_| {})?;
    let det = determinism(&first, &second, (1, 4));
    each(&det);
    let mut out = first;
    out.push(det);
    Ok(out)
}
