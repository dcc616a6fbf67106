//! Explicit particle forests, the neighbour-pair process and the spine chain.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::connectivity::{classify_coords, PairClass};
use crate::error::{config, Error, Result};
use crate::grid::{CellKey, GenerationState, Lattice};
use crate::laws::{
    keyed_poisson, sample_binomial, sample_distinct_sites, sample_poisson, DisplacementLaw, ModelParams, OffspringLaw,
};
use crate::rng::{StreamKey, Tag};
use crate::stats::{Frequency, Welford};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Particle {
    pub id: u64,
    pub parent: Option<u64>,
    pub generation: u32,
    /// Last digit vector, encoded as `sum_i x_i B^i`; the root has none.
    pub digit: Option<u32>,
}

/// Particles in generation order; within a generation sorted by cell.
#[derive(Debug, Clone)]
pub struct Forest {
    pub lattice: Lattice,
    pub particles: Vec<Particle>,
    pub cells: Vec<CellKey>,
    /// Index of the first particle of each generation, plus an end marker.
    pub generation_start: Vec<usize>,
}

impl Forest {
    pub fn generation(&self, n: u32) -> std::ops::Range<usize> {
        self.generation_start[n as usize]..self.generation_start[n as usize + 1]
    }

    pub fn generations(&self) -> u32 {
        self.generation_start.len() as u32 - 1
    }

    /// Digit vectors `x_1..x_n` of a particle, oldest first.
    pub fn digit_history(&self, id: u64) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(i) = cur {
            let p = &self.particles[i as usize];
            if let Some(d) = p.digit {
                out.push(d);
            }
            cur = p.parent;
        }
        out.reverse();
        out
    }

    /// Cell counts of generation `n`.
    pub fn census(&self, n: u32) -> GenerationState {
        let mut cells: Vec<(CellKey, u64)> = Vec::new();
        for i in self.generation(n) {
            match cells.last_mut() {
                Some((k, c)) if *k == self.cells[i] => *c += 1,
                _ => cells.push((self.cells[i].clone(), 1)),
            }
        }
        GenerationState::from_cells(n, cells)
    }

    /// Offspring counts of every particle that has had the chance to reproduce.
    pub fn offspring_counts(&self) -> Vec<u64> {
        let last = self.generation_start[self.generations() as usize];
        let mut counts = vec![0u64; last];
        for p in &self.particles {
            if let Some(parent) = p.parent {
                counts[parent as usize] += 1;
            }
        }
        counts
    }
}

/// Explicit genealogy. Uses the same keyed streams as the particle-by-particle
/// grid step, so the census of each generation equals that grid run.
pub fn grow_forest(params: &ModelParams, generations: u32, key: StreamKey, cap: u64) -> Result<Forest> {
    let lattice = Lattice::of(params)?;
    if params.displacement == DisplacementLaw::GaussianSibling {
        return config("gaussian sibling displacements belong to free mode");
    }
    let sampler = params.offspring.sampler();
    let grid_key = key.tag(Tag::Grid).with(0);
    let p = lattice.cells_per_parent();
    let mut particles = vec![Particle { id: 0, parent: None, generation: 0, digit: None }];
    let mut cells = vec![lattice.root()];
    let mut generation_start = vec![0usize, 1];
    for gen in 0..generations {
        let range = generation_start[gen as usize]..generation_start[gen as usize + 1];
        let mut born: Vec<(CellKey, u64, u32)> = Vec::new();
        let mut i = range.start;
        while i < range.end {
            let cell = cells[i].clone();
            let mut rng = cell.stream(grid_key).rng();
            while i < range.end && cells[i] == cell {
                let z = sampler.sample(&mut rng);
                let digits: Vec<u32> = match params.displacement {
                    DisplacementLaw::DistinctSites => {
                        sample_distinct_sites(&mut rng, z as usize, lattice.dim, lattice.base)?
                    }
                    _ => (0..z).map(|_| rng.random_range(0..p)).collect(),
                };
                for d in digits {
                    born.push((lattice.child(&cell, d), i as u64, d));
                }
                i += 1;
            }
        }
        if (particles.len() + born.len()) as u64 > cap {
            return Err(Error::Resource { what: format!("forest size at generation {}", gen + 1), cap });
        }
        // stable: within a cell, particles keep birth order
        born.sort_by(|a, b| a.0.cmp(&b.0));
        for (cell, parent, digit) in born {
            let id = particles.len() as u64;
            particles.push(Particle { id, parent: Some(parent), generation: gen + 1, digit: Some(digit) });
            cells.push(cell);
        }
        generation_start.push(particles.len());
    }
    Ok(Forest { lattice, particles, cells, generation_start })
}

type LPos = SmallVec<[u64; 4]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTrace {
    pub ell: u32,
    pub base_generation: u32,
    /// `M_n` for `n = base_generation, base_generation + 1, ...`.
    pub m_values: Vec<u64>,
    pub absorbed: bool,
    /// Coordinates where the base pair agree.
    pub l_set: Vec<u32>,
    /// Coordinates where the f-cell sits above the g-cell.
    pub l_prime_fg: Vec<u32>,
    /// Coordinates where the g-cell sits above the f-cell.
    pub l_prime_gf: Vec<u32>,
    pub pairs_sampled: u64,
    pub unsound_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    pub dim: u32,
    pub base: u32,
    pub offspring: OffspringLaw,
    pub ell: u32,
    pub steps: u32,
    pub cap: u64,
    /// Allow a pair growth factor above one.
    #[serde(default)]
    pub allow_supercritical: bool,
    /// Fraction of positions whose pairs are re-checked on full coordinates.
    #[serde(default = "default_audit")]
    pub audit_fraction: f64,
}

fn default_audit() -> f64 {
    0.01
}

impl GammaConfig {
    /// `E[M_{n+1} | M_n] / M_n = mu^2 B^-ell B^-2(d-ell)`.
    pub fn pair_factor(&self) -> f64 {
        let b = self.base as f64;
        let mu = self.offspring.mean();
        mu * mu * b.powi(-(self.ell as i32)) * b.powi(-2 * (self.dim as i32 - self.ell as i32))
    }

    /// Expected surviving candidates per particle and step on one side.
    pub fn side_factor(&self) -> f64 {
        self.offspring.mean() * (self.base as f64).powi(-(self.dim as i32 - self.ell as i32))
    }

    pub fn validate(&self) -> Result<()> {
        Lattice::new(self.dim, self.base)?;
        self.offspring.validate()?;
        if self.ell >= self.dim {
            return config(format!("ell = {} must be below d = {}", self.ell, self.dim));
        }
        if self.pair_factor() > 1.0 + 1e-12 && !self.allow_supercritical {
            return Err(Error::Regime(format!(
                "pair growth factor {} exceeds 1; set allow_supercritical to run anyway",
                self.pair_factor()
            )));
        }
        Ok(())
    }
}

struct Side {
    counts: BTreeMap<LPos, u64>,
    /// Forced digit on each non-L coordinate.
    forced: Vec<(u32, u32)>,
}

/// Evolves the descendants of an ell-neighbour sibling pair that stay on the
/// shared face, and records `M_n`, the number of descendant pairs that are
/// ell-neighbours with the same L-coordinates.
pub fn gamma_process(cfg: &GammaConfig, key: StreamKey) -> Result<GammaTrace> {
    cfg.validate()?;
    let key = key.tag(Tag::Gamma);
    let (d, b, ell) = (cfg.dim, cfg.base, cfg.ell);
    let l_set: Vec<u32> = (0..ell).collect();
    let l_prime_fg: Vec<u32> = (ell..d).collect();
    // base pair at generation 2, children of the generation-1 particle in cell 0:
    // f has digit 1 off L, g has digit 0 everywhere
    let base_generation = 2u32;
    let f_coords: Vec<u64> = (0..d).map(|i| if i < ell { 0 } else { 1 }).collect();
    let g_coords: Vec<u64> = vec![0; d as usize];
    let start: LPos = SmallVec::from_elem(0, ell as usize);
    let mut f = Side {
        counts: BTreeMap::from([(start.clone(), 1)]),
        forced: l_prime_fg.iter().map(|&i| (i, 0)).collect(),
    };
    let mut g = Side {
        counts: BTreeMap::from([(start, 1)]),
        forced: l_prime_fg.iter().map(|&i| (i, b - 1)).collect(),
    };
    let mut trace = GammaTrace {
        ell,
        base_generation,
        m_values: vec![1],
        absorbed: false,
        l_set,
        l_prime_fg,
        l_prime_gf: Vec::new(),
        pairs_sampled: 0,
        unsound_pairs: 0,
    };
    let sampler = cfg.offspring.sampler();
    let poisson_mean = match cfg.offspring {
        OffspringLaw::Poisson { mean } => Some(mean),
        _ => None,
    };
    let keep_p = (b as f64).powi(-(d as i32 - ell as i32));
    let l_digits = b.pow(ell);
    for step in 1..=cfg.steps {
        for (side_id, side) in [(0u64, &mut f), (1u64, &mut g)] {
            let mut next: BTreeMap<LPos, u64> = BTreeMap::new();
            let mut total = 0u64;
            for (pos, &n) in &side.counts {
                let pk = pos.iter().fold(key.with(step as u64).with(side_id), |k, &v| k.with(v));
                // kept children per L-digit
                let per_digit: Vec<u64> = if let Some(mu) = poisson_mean {
                    (0..l_digits).map(|delta| keyed_poisson(pk.with(delta as u64), n as f64 * mu * keep_p / l_digits as f64)).collect()
                } else {
                    let mut rng = pk.rng();
                    let mut out = vec![0u64; l_digits as usize];
                    let p_all = b.pow(d);
                    for _ in 0..n {
                        let z = sampler.sample(&mut rng);
                        for _ in 0..z {
                            let digit = rng.random_range(0..p_all);
                            let mut x = digit;
                            let mut delta = 0u32;
                            let mut scale = 1u32;
                            let mut ok = true;
                            for i in 0..d {
                                let v = x % b;
                                x /= b;
                                if i < ell {
                                    delta += v * scale;
                                    scale *= b;
                                } else if side.forced.iter().any(|&(c, want)| c == i && want != v) {
                                    ok = false;
                                }
                            }
                            if ok {
                                out[delta as usize] += 1;
                            }
                        }
                    }
                    out
                };
                for (delta, k) in per_digit.into_iter().enumerate() {
                    if k == 0 {
                        continue;
                    }
                    let mut x = delta as u64;
                    let child: LPos = pos
                        .iter()
                        .map(|&v| {
                            let digit = x % b as u64;
                            x /= b as u64;
                            v * b as u64 + digit
                        })
                        .collect();
                    *next.entry(child).or_default() += k;
                    total += k;
                }
            }
            if total > cfg.cap {
                return Err(Error::Resource { what: format!("pair-process candidates at step {step}"), cap: cfg.cap });
            }
            side.counts = next;
        }
        // drop positions without a partner on the other side
        f.counts.retain(|pos, _| g.counts.contains_key(pos));
        g.counts.retain(|pos, _| f.counts.contains_key(pos));
        let m: u64 = f.counts.iter().map(|(pos, cf)| cf * g.counts[pos]).sum();
        // re-check a sample of pairs on full coordinates
        let scale = (b as u64).pow(step);
        for pos in f.counts.keys() {
            let pk = pos.iter().fold(key.with(step as u64).with(7), |k, &v| k.with(v));
            if pk.uniform() >= cfg.audit_fraction {
                continue;
            }
            let mut fc = vec![0u64; d as usize];
            let mut gc = vec![0u64; d as usize];
            for (i, &v) in pos.iter().enumerate() {
                fc[i] = v;
                gc[i] = v;
            }
            for i in ell..d {
                let iu = i as usize;
                fc[iu] = f_coords[iu] * scale;
                gc[iu] = g_coords[iu] * scale + scale - 1;
            }
            trace.pairs_sampled += 1;
            if classify_coords(&fc, &gc) != PairClass::Neighbour(ell) {
                trace.unsound_pairs += 1;
            }
        }
        trace.m_values.push(m);
        if m == 0 {
            trace.absorbed = true;
            break;
        }
    }
    Ok(trace)
}

/// Conditional means of `M_{n+1}` given `M_n = k`, pooled over traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub k: u64,
    pub transitions: u64,
    pub mean_next: f64,
    pub std_err: f64,
    /// `mean_next <= k + 3 se`.
    pub within_bound: bool,
}

pub fn drift_table(traces: &[GammaTrace], k_max: u64) -> Vec<DriftRow> {
    let mut acc: BTreeMap<u64, Welford> = BTreeMap::new();
    for t in traces {
        for w in t.m_values.windows(2) {
            if w[0] >= 1 && w[0] <= k_max {
                acc.entry(w[0]).or_default().push(w[1] as f64);
            }
        }
    }
    acc.into_iter()
        .map(|(k, w)| {
            let se = if w.n >= 2 { w.std_err() } else { 0.0 };
            DriftRow { k, transitions: w.n, mean_next: w.mean, std_err: se, within_bound: w.mean <= k as f64 + 3.0 * se }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpineState {
    pub generation: u32,
    /// `C_m`: particles other than the spine in the spine's cell.
    pub excess: u64,
    /// Last digit of the spine cell (`None` at generation 0).
    pub spine_digit: Option<u32>,
    pub alone: bool,
    /// Size-biased offspring count of the spine at this generation.
    pub spine_offspring: u64,
    /// Position of the spine child among those offspring, from 1.
    pub spine_child_index: u64,
    /// All children of the particles in the spine cell land in one subcell.
    pub unanimous: bool,
    /// `E_m`, when two more generations are available.
    pub event: Option<bool>,
}

/// Scalar spine chain. The spine has `Z*` children, one of them uniformly the
/// next spine; its siblings join its subcell with probability `B^-d` each, and
/// so does every child of the `C_m` other particles of the cell.
pub fn spine_run(params: &ModelParams, generations: u32, key: StreamKey) -> Result<Vec<SpineState>> {
    params.offspring.validate()?;
    let lattice = Lattice::of(params)?;
    let key = key.tag(Tag::Spine);
    let star = params.offspring.size_biased()?.sampler();
    let sampler = params.offspring.sampler();
    let poisson_mean = match params.offspring {
        OffspringLaw::Poisson { mean } => Some(mean),
        _ => None,
    };
    let p = params.thin_p();
    let cells = lattice.cells_per_parent();
    let mut rng = key.rng();
    let mut out = Vec::with_capacity(generations as usize + 1);
    let mut excess = 0u64;
    let mut digit = None;
    for m in 0..=generations {
        let zs = star.sample(&mut rng);
        let idx = rng.random_range(1..=zs);
        let x = rng.random_range(0..cells);
        let siblings = sample_binomial(&mut rng, zs - 1, p);
        let (total, matched) = if let Some(mu) = poisson_mean {
            let t = sample_poisson(&mut rng, excess as f64 * mu);
            (t, sample_binomial(&mut rng, t, p))
        } else {
            let mut t = 0u64;
            let mut k = 0u64;
            for _ in 0..excess {
                let z = sampler.sample(&mut rng);
                t += z;
                k += sample_binomial(&mut rng, z, p);
            }
            (t, k)
        };
        out.push(SpineState {
            generation: m,
            excess,
            spine_digit: digit,
            alone: excess == 0,
            spine_offspring: zs,
            spine_child_index: idx,
            unanimous: siblings == zs - 1 && matched == total,
            event: None,
        });
        excess = siblings + matched;
        digit = Some(x);
    }
    let ones = (cells - 1) / (lattice.base - 1);
    for m in 0..out.len().saturating_sub(2) {
        let e = out[m].alone
            && out[m].unanimous
            && out[m + 1].spine_digit == Some(ones)
            && out[m + 1].unanimous
            && out[m + 2].spine_digit == Some(0);
        out[m].event = Some(e);
    }
    Ok(out)
}

/// `(h*(p) / h(p)) h*(p h(p))` with `h`, `h*` the pgfs of `Z` and `Z*`.
pub fn spine_event_closed_form(law: &OffspringLaw, p: f64) -> Result<f64> {
    let star = law.size_biased()?;
    let h = law.pgf(p)?;
    Ok(star.pgf(p)? / h * star.pgf(p * h)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrequency {
    pub generation: u32,
    /// `None` when no replicate was alone at this generation.
    pub frequency: Option<Frequency>,
}

/// Frequency of `E_m` among independent chains that are alone at `m`.
pub fn spine_event_frequency(
    params: &ModelParams,
    ms: &[u32],
    replicates: u64,
    key: StreamKey,
) -> Result<Vec<EventFrequency>> {
    let horizon = ms.iter().copied().max().unwrap_or(0) + 2;
    let zero = || vec![(0u64, 0u64); ms.len()];
    // integer sums, so the reduction order does not matter
    let tallies = (0..replicates)
        .into_par_iter()
        .try_fold(zero, |mut acc, r| {
            let chain = spine_run(params, horizon, key.with(r))?;
            for (j, &m) in ms.iter().enumerate() {
                let s = &chain[m as usize];
                acc[j].0 += s.alone as u64;
                acc[j].1 += (s.alone && s.event == Some(true)) as u64;
            }
            Ok::<_, Error>(acc)
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                x.0 += y.0;
                x.1 += y.1;
            }
            Ok(a)
        })?;
    Ok(ms
        .iter()
        .zip(tallies)
        .map(|(&m, (alone, hits))| EventFrequency { generation: m, frequency: Frequency::new(hits, alone, 1.96) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSim, StepPath, DEFAULT_CAP};

    #[test]
    fn forest_census_equals_generic_grid() {
        for law in [OffspringLaw::poisson(4.0), OffspringLaw::geometric(2.0), OffspringLaw::binomial(5, 0.5)] {
            let p = ModelParams::grid(2, 2, law);
            for rep in 0..5 {
                let key = StreamKey::root(44).with(rep);
                let forest = grow_forest(&p, 5, key, DEFAULT_CAP).unwrap();
                let sim = GridSim::new(&p, key, DEFAULT_CAP, StepPath::Generic).unwrap();
                let states = sim.run(5).unwrap();
                for n in 0..=5 {
                    assert_eq!(forest.census(n), states[n as usize]);
                }
            }
        }
    }

    #[test]
    fn forest_single_lineage() {
        let p = ModelParams::grid(3, 2, OffspringLaw::deterministic(1));
        let f = grow_forest(&p, 10, StreamKey::root(1), DEFAULT_CAP).unwrap();
        assert_eq!(f.particles.len(), 11);
        let hist = f.digit_history(10);
        assert_eq!(hist.len(), 10);
        let lat = f.lattice;
        let mut cell = lat.root();
        for d in hist {
            cell = lat.child(&cell, d);
        }
        assert_eq!(cell, f.cells[10]);
    }

    fn gamma_cfg(ell: u32, law: OffspringLaw) -> GammaConfig {
        GammaConfig { dim: 3, base: 2, offspring: law, ell, steps: 40, cap: 10_000_000, allow_supercritical: false, audit_fraction: 1.0 }
    }

    #[test]
    fn gamma_factors() {
        assert!((gamma_cfg(2, OffspringLaw::poisson(4.0)).pair_factor() - 1.0).abs() < 1e-15);
        assert!((gamma_cfg(1, OffspringLaw::poisson(4.0)).pair_factor() - 0.5).abs() < 1e-15);
        assert!((gamma_cfg(0, OffspringLaw::poisson(4.0)).pair_factor() - 0.25).abs() < 1e-15);
        assert!(gamma_cfg(2, OffspringLaw::poisson(5.0)).validate().is_err());
        let mut c = gamma_cfg(2, OffspringLaw::poisson(5.0));
        c.allow_supercritical = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn gamma_dies_at_once_without_children() {
        let t = gamma_process(&gamma_cfg(1, OffspringLaw::deterministic(0)), StreamKey::root(1)).unwrap();
        assert_eq!(t.m_values, vec![1, 0]);
        assert!(t.absorbed);
    }

    #[test]
    fn gamma_pairs_are_sound() {
        for ell in 0..3 {
            for law in [OffspringLaw::poisson(4.0), OffspringLaw::geometric(4.0)] {
                for rep in 0..40 {
                    let t = gamma_process(&gamma_cfg(ell, law.clone()), StreamKey::root(3).with(rep)).unwrap();
                    assert_eq!(t.unsound_pairs, 0);
                    assert!(t.m_values.iter().skip_while(|&&m| m > 0).all(|&m| m == 0));
                }
            }
        }
    }

    #[test]
    fn gamma_generic_matches_poisson_in_mean() {
        // one step from M = 1: E[M_1] = pair factor
        for ell in 0..3 {
            let mut a = Welford::new();
            let mut b = Welford::new();
            let mut ca = gamma_cfg(ell, OffspringLaw::poisson(4.0));
            ca.steps = 1;
            let mut cb = gamma_cfg(ell, OffspringLaw::Shifted { shift: 0, base: Box::new(OffspringLaw::poisson(4.0)) });
            cb.steps = 1;
            for rep in 0..20_000 {
                a.push(gamma_process(&ca, StreamKey::root(5).with(rep)).unwrap().m_values[1] as f64);
                b.push(gamma_process(&cb, StreamKey::root(6).with(rep)).unwrap().m_values[1] as f64);
            }
            let target = ca.pair_factor();
            assert!((a.mean - target).abs() < 4.0 * a.std_err(), "{ell} {}", a.mean);
            assert!((b.mean - target).abs() < 4.0 * b.std_err(), "{ell} {}", b.mean);
        }
    }

    #[test]
    fn spine_trivial_lineage() {
        let p = ModelParams::grid(1, 2, OffspringLaw::deterministic(1));
        let chain = spine_run(&p, 50, StreamKey::root(1)).unwrap();
        assert!(chain.iter().all(|s| s.excess == 0 && s.spine_offspring == 1));
        let cf = spine_event_closed_form(&OffspringLaw::deterministic(1), 0.5).unwrap();
        assert!((cf - 0.25).abs() < 1e-15);
        let freq = spine_event_frequency(&p, &[3], 40_000, StreamKey::root(2)).unwrap();
        let f = freq[0].frequency.unwrap();
        assert!(f.lo <= 0.25 && 0.25 <= f.hi, "{f:?}");
    }

    #[test]
    fn spine_closed_form_value() {
        let v = spine_event_closed_form(&OffspringLaw::poisson(4.0), 0.125).unwrap();
        assert!((v - 8.773_415e-6).abs() < 1e-11, "{v}");
    }
}
