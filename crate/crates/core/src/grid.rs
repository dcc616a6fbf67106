//! Sparse B-ary occupancy process, fractal percolation and their couplings.
//!
//! Cells are addressed by their tree path: the level-m key of a cell is the
//! sequence of digit vectors `x_1..x_m`, packed base `B^d` into a `u128` while
//! it fits. Children of a sorted list of parents therefore come out sorted.
//!
//! Randomness is keyed by cell. On the Poisson fast path, and in fractal
//! percolation and both couplings, the count of a child cell is drawn from a
//! stream keyed by the child alone. Evolving only a prefix-closed subset of
//! cells therefore reproduces exactly the values the full run would have
//! produced there. The audits and path trackers rely on this.

use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{config, domain, Error, Result};
use crate::laws::{keyed_poisson, keyed_poisson_with, sample_distinct_sites, DisplacementLaw, LawSampler, ModelParams, OffspringLaw};
use crate::rng::{StreamKey, Tag};

pub type Coords = SmallVec<[u64; 4]>;

pub const DEFAULT_CAP: u64 = 100_000_000;

/// Below this many occupied cells a step runs serially.
const PAR_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: u32,
    pub base: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Path {
    Packed(u128),
    Wide(Box<[u32]>),
}

/// A cell of the level-`level` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub level: u32,
    path: Path,
}

impl CellKey {
    /// Mixes the cell into a stream key.
    #[inline]
    pub fn stream(&self, key: StreamKey) -> StreamKey {
        let k = key.with(self.level as u64);
        match &self.path {
            Path::Packed(v) => k.with_u128(*v),
            Path::Wide(d) => d.iter().fold(k.with(u64::MAX), |acc, &x| acc.with(x as u64)),
        }
    }

    pub fn is_packed(&self) -> bool {
        matches!(self.path, Path::Packed(_))
    }
}

impl Lattice {
    pub fn new(dim: u32, base: u32) -> Result<Self> {
        if dim == 0 || base < 2 {
            return config(format!("lattice needs d >= 1 and B >= 2, got d={dim} B={base}"));
        }
        if (base as u64).checked_pow(dim).map_or(true, |v| v > 1 << 16) {
            return config("B^d above 65536 is not supported");
        }
        Ok(Lattice { dim, base })
    }

    pub fn of(params: &ModelParams) -> Result<Self> {
        Self::new(params.dim, params.base)
    }

    #[inline]
    pub fn cells_per_parent(&self) -> u32 {
        self.base.pow(self.dim)
    }

    /// Largest level whose side length `B^level` stays below 2^63.
    pub fn max_level(&self) -> u32 {
        let mut level = 0;
        let mut side: u64 = 1;
        while let Some(next) = side.checked_mul(self.base as u64) {
            if next >= 1 << 63 {
                break;
            }
            side = next;
            level += 1;
        }
        level
    }

    pub fn side(&self, level: u32) -> u64 {
        (self.base as u64).pow(level)
    }

    #[inline]
    fn packed_fits(&self, level: u32) -> bool {
        let p = self.cells_per_parent() as u64;
        let bits = 64 - (p - 1).leading_zeros() as u64;
        level as u64 * bits <= 127
    }

    fn pack(&self, digits: &[u32]) -> Path {
        if self.packed_fits(digits.len() as u32) {
            let p = self.cells_per_parent() as u128;
            Path::Packed(digits.iter().fold(0u128, |acc, &x| acc * p + x as u128))
        } else {
            Path::Wide(digits.into())
        }
    }

    pub fn root(&self) -> CellKey {
        CellKey { level: 0, path: Path::Packed(0) }
    }

    /// Digit indices `x_1..x_level`, each encoded as `sum_i x_i B^i`.
    pub fn digits(&self, key: &CellKey) -> Vec<u32> {
        match &key.path {
            Path::Packed(v) => {
                let p = self.cells_per_parent() as u128;
                let mut v = *v;
                let mut out = vec![0u32; key.level as usize];
                for slot in out.iter_mut().rev() {
                    *slot = (v % p) as u32;
                    v /= p;
                }
                out
            }
            Path::Wide(d) => d.to_vec(),
        }
    }

    pub fn last_digit(&self, key: &CellKey) -> Option<u32> {
        if key.level == 0 {
            return None;
        }
        Some(match &key.path {
            Path::Packed(v) => (v % self.cells_per_parent() as u128) as u32,
            Path::Wide(d) => d[d.len() - 1],
        })
    }

    #[inline]
    pub fn child(&self, key: &CellKey, digit: u32) -> CellKey {
        debug_assert!(digit < self.cells_per_parent());
        let level = key.level + 1;
        let path = match &key.path {
            Path::Packed(v) if self.packed_fits(level) => {
                Path::Packed(v * self.cells_per_parent() as u128 + digit as u128)
            }
            _ => {
                let mut d = self.digits(key);
                d.push(digit);
                Path::Wide(d.into())
            }
        };
        CellKey { level, path }
    }

    pub fn parent(&self, key: &CellKey) -> Option<CellKey> {
        if key.level == 0 {
            return None;
        }
        Some(self.prefix(key, key.level - 1))
    }

    /// The level-`m` ancestor cell.
    pub fn prefix(&self, key: &CellKey, m: u32) -> CellKey {
        assert!(m <= key.level, "prefix level {m} above key level {}", key.level);
        let path = match &key.path {
            Path::Packed(v) => {
                let p = self.cells_per_parent() as u128;
                Path::Packed(v / p.pow(key.level - m))
            }
            Path::Wide(d) => self.pack(&d[..m as usize]),
        };
        CellKey { level: m, path }
    }

    pub fn digit_vector(&self, digit: u32) -> SmallVec<[u32; 4]> {
        let mut x = digit;
        (0..self.dim)
            .map(|_| {
                let v = x % self.base;
                x /= self.base;
                v
            })
            .collect()
    }

    pub fn coords(&self, key: &CellKey) -> Coords {
        assert!(key.level <= self.max_level(), "level {} too deep for u64 coordinates", key.level);
        let mut c: Coords = SmallVec::from_elem(0, self.dim as usize);
        let b = self.base as u64;
        for digit in self.digits(key) {
            let mut x = digit;
            for ci in c.iter_mut() {
                *ci = *ci * b + (x % self.base) as u64;
                x /= self.base;
            }
        }
        c
    }

    pub fn from_coords(&self, level: u32, coords: &[u64]) -> Result<CellKey> {
        if coords.len() != self.dim as usize {
            return domain(format!("expected {} coordinates, got {}", self.dim, coords.len()));
        }
        if level > self.max_level() {
            return domain(format!("level {level} too deep for u64 coordinates"));
        }
        let side = self.side(level);
        if coords.iter().any(|&c| c >= side) {
            return domain(format!("coordinates {coords:?} outside [0, {side})"));
        }
        let b = self.base as u64;
        let digits: Vec<u32> = (1..=level)
            .map(|k| {
                let scale = b.pow(level - k);
                coords
                    .iter()
                    .rev()
                    .fold(0u32, |acc, &c| acc * self.base + ((c / scale) % b) as u32)
            })
            .collect();
        Ok(CellKey { level, path: self.pack(&digits) })
    }

    /// Every prefix of every target, including the targets.
    pub fn prefix_closure<'a>(&self, targets: impl IntoIterator<Item = &'a CellKey>) -> FxHashSet<CellKey> {
        let mut set = FxHashSet::default();
        for t in targets {
            for m in 0..=t.level {
                set.insert(self.prefix(t, m));
            }
        }
        set
    }
}

/// Occupancy counts `N_m^x` at one level, sorted by cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationState {
    pub level: u32,
    pub cells: Vec<(CellKey, u64)>,
    pub total: u64,
}

impl GenerationState {
    /// A single particle in the level-0 cell.
    pub fn origin() -> Self {
        GenerationState { level: 0, cells: vec![(CellKey { level: 0, path: Path::Packed(0) }, 1)], total: 1 }
    }

    pub fn from_cells(level: u32, cells: Vec<(CellKey, u64)>) -> Self {
        let total = cells.iter().map(|c| c.1).sum();
        GenerationState { level, cells, total }
    }

    pub fn is_extinct(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    pub fn count(&self, key: &CellKey) -> u64 {
        self.cells.binary_search_by(|(k, _)| k.cmp(key)).map_or(0, |i| self.cells[i].1)
    }

    pub fn keys(&self) -> Vec<CellKey> {
        self.cells.iter().map(|c| c.0.clone()).collect()
    }

    /// `mu^-m N_m^x`.
    pub fn weight(&self, key: &CellKey, mu: f64) -> f64 {
        self.count(key) as f64 * mu.powi(-(self.level as i32))
    }

    pub fn total_weight(&self, mu: f64) -> f64 {
        self.total as f64 * mu.powi(-(self.level as i32))
    }

    pub fn to_csv(&self, lattice: &Lattice) -> String {
        let mut out = String::from("level");
        for i in 1..=lattice.dim {
            out.push_str(&format!(",coord_{i}"));
        }
        out.push_str(",count\n");
        for (k, n) in &self.cells {
            out.push_str(&self.level.to_string());
            for c in lattice.coords(k) {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(&format!(",{n}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPath {
    /// Poisson fast path when the offspring law is Poisson.
    #[default]
    Auto,
    /// Always sample particle by particle.
    Generic,
}

/// A configured grid process for one replicate.
#[derive(Debug, Clone)]
pub struct GridSim {
    lattice: Lattice,
    params: ModelParams,
    sampler: LawSampler,
    poisson_c: Option<f64>,
    cap: u64,
    key: StreamKey,
    fast_key: StreamKey,
}

impl GridSim {
    /// `key` should already identify the replicate.
    pub fn new(params: &ModelParams, key: StreamKey, cap: u64, path: StepPath) -> Result<Self> {
        let lattice = Lattice::of(params)?;
        params.offspring.validate()?;
        if params.displacement == DisplacementLaw::GaussianSibling {
            return config("gaussian sibling displacements belong to free mode");
        }
        let poisson_c = match (&params.offspring, path, params.displacement) {
            (OffspringLaw::Poisson { mean }, StepPath::Auto, DisplacementLaw::UniformDigits) => {
                Some(mean / lattice.cells_per_parent() as f64)
            }
            _ => None,
        };
        Ok(GridSim {
            lattice,
            params: params.clone(),
            sampler: params.offspring.sampler(),
            poisson_c,
            cap,
            key: key.tag(Tag::Grid),
            fast_key: key.tag(Tag::Grid).with(1),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn uses_fast_path(&self) -> bool {
        self.poisson_c.is_some()
    }

    fn fast_count(&self, child: &CellKey, c: f64, n: u64) -> u64 {
        keyed_poisson(child.stream(self.fast_key), c * n as f64)
    }

    /// Child-cell counts of a cell holding `n` particles, indexed by digit.
    pub fn child_counts(&self, parent: &CellKey, n: u64) -> Result<Vec<u64>> {
        let p = self.lattice.cells_per_parent();
        if let Some(c) = self.poisson_c {
            let lam = c * n as f64;
            let p0 = (-lam).exp();
            return Ok((0..p)
                .map(|d| keyed_poisson_with(self.lattice.child(parent, d).stream(self.fast_key), lam, p0))
                .collect());
        }
        let mut counts = vec![0u64; p as usize];
        let mut rng = parent.stream(self.key.with(0)).rng();
        let mut born: u64 = 0;
        for _ in 0..n {
            let z = self.sampler.sample(&mut rng);
            born = born.saturating_add(z);
            if born > self.cap {
                return Err(Error::Resource { what: format!("offspring of one level-{} cell", parent.level), cap: self.cap });
            }
            match self.params.displacement {
                DisplacementLaw::DistinctSites => {
                    for d in sample_distinct_sites(&mut rng, z as usize, self.lattice.dim, self.lattice.base)? {
                        counts[d as usize] += 1;
                    }
                }
                _ => {
                    for _ in 0..z {
                        counts[rng.random_range(0..p) as usize] += 1;
                    }
                }
            }
        }
        Ok(counts)
    }

    /// Occupied children `(cell, count)` of a cell, in sorted order.
    pub fn children(&self, parent: &CellKey, n: u64) -> Result<Vec<(CellKey, u64)>> {
        Ok(self
            .child_counts(parent, n)?
            .into_iter()
            .enumerate()
            .filter(|&(_, k)| k > 0)
            .map(|(d, k)| (self.lattice.child(parent, d as u32), k))
            .collect())
    }

    fn check_level(&self, level: u32) -> Result<()> {
        if level > self.lattice.max_level() {
            return domain(format!("level {level} above the supported maximum {}", self.lattice.max_level()));
        }
        Ok(())
    }

    pub fn step(&self, state: &GenerationState) -> Result<GenerationState> {
        self.check_level(state.level + 1)?;
        let expand = |(key, n): &(CellKey, u64)| self.children(key, *n);
        let parts: Vec<Vec<(CellKey, u64)>> = if state.cells.len() >= PAR_THRESHOLD {
            state.cells.par_iter().map(expand).collect::<Result<_>>()?
        } else {
            state.cells.iter().map(expand).collect::<Result<_>>()?
        };
        let next = GenerationState::from_cells(state.level + 1, parts.into_iter().flatten().collect());
        if next.total > self.cap {
            return Err(Error::Resource { what: format!("population at level {}", next.level), cap: self.cap });
        }
        Ok(next)
    }

    /// States for levels `0..=levels`, starting from one particle.
    pub fn run(&self, levels: u32) -> Result<Vec<GenerationState>> {
        let mut out = vec![GenerationState::origin()];
        for _ in 0..levels {
            let next = self.step(out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    /// Like [`run`](Self::run) but only cells in `allowed` are evolved. For a
    /// prefix-closed `allowed` the counts agree with the full run on `allowed`.
    pub fn run_restricted(&self, levels: u32, allowed: &FxHashSet<CellKey>) -> Result<Vec<GenerationState>> {
        self.check_level(levels)?;
        let mut out = vec![GenerationState::origin()];
        for _ in 0..levels {
            let cur = out.last().unwrap();
            let mut cells = Vec::new();
            for (key, n) in &cur.cells {
                if let Some(c) = self.poisson_c {
                    for d in 0..self.lattice.cells_per_parent() {
                        let child = self.lattice.child(key, d);
                        if allowed.contains(&child) {
                            let k = self.fast_count(&child, c, *n);
                            if k > 0 {
                                cells.push((child, k));
                            }
                        }
                    }
                } else {
                    cells.extend(self.children(key, *n)?.into_iter().filter(|(k, _)| allowed.contains(k)));
                }
            }
            out.push(GenerationState::from_cells(cur.level + 1, cells));
        }
        Ok(out)
    }

    /// `N_m` along the ancestry of `target`, for `m = 0..=target.level`.
    pub fn path_counts(&self, target: &CellKey) -> Result<Vec<u64>> {
        let mut out = vec![1u64];
        let mut n = 1u64;
        for m in 1..=target.level {
            let cell = self.lattice.prefix(target, m);
            n = if n == 0 {
                0
            } else if let Some(c) = self.poisson_c {
                self.fast_count(&cell, c, n)
            } else {
                let parent = self.lattice.prefix(target, m - 1);
                self.child_counts(&parent, n)?[self.lattice.last_digit(&cell).unwrap() as usize]
            };
            out.push(n);
        }
        Ok(out)
    }

    /// Occupied-cell count and population per level, by depth-first traversal.
    /// Uses memory proportional to the depth, not the population.
    pub fn occupancy_profile(&self, levels: u32) -> Result<OccupancyProfile> {
        self.check_level(levels)?;
        let mut prof = OccupancyProfile {
            occupied: vec![0; levels as usize + 1],
            population: vec![0; levels as usize + 1],
        };
        self.visit(&self.lattice.root(), 1, levels, &mut prof)?;
        if prof.population.iter().any(|&p| p > self.cap) {
            return Err(Error::Resource { what: "population".into(), cap: self.cap });
        }
        Ok(prof)
    }

    fn visit(&self, cell: &CellKey, n: u64, levels: u32, prof: &mut OccupancyProfile) -> Result<()> {
        let l = cell.level as usize;
        prof.occupied[l] += 1;
        prof.population[l] += n;
        if prof.population[l] > self.cap {
            return Err(Error::Resource { what: format!("population at level {l}"), cap: self.cap });
        }
        if cell.level == levels {
            return Ok(());
        }
        if let Some(c) = self.poisson_c {
            let lam = c * n as f64;
            let p0 = (-lam).exp();
            for d in 0..self.lattice.cells_per_parent() {
                let child = self.lattice.child(cell, d);
                let k = keyed_poisson_with(child.stream(self.fast_key), lam, p0);
                if k == 0 {
                    continue;
                }
                if child.level == levels {
                    prof.occupied[levels as usize] += 1;
                    prof.population[levels as usize] += k;
                } else {
                    self.visit(&child, k, levels, prof)?;
                }
            }
            return Ok(());
        }
        for (child, k) in self.children(cell, n)? {
            self.visit(&child, k, levels, prof)?;
        }
        Ok(())
    }
}

impl GridSim {
    /// Whether the `n` particles of `cell` have a descendant at level `target`.
    /// Depth-first with early exit.
    pub fn subtree_survives(&self, cell: &CellKey, n: u64, target: u32) -> Result<bool> {
        self.check_level(target)?;
        if n == 0 {
            return Ok(false);
        }
        if cell.level >= target {
            return Ok(true);
        }
        for (child, k) in self.children(cell, n)? {
            if self.subtree_survives(&child, k, target)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyProfile {
    pub occupied: Vec<u64>,
    pub population: Vec<u64>,
}

/// Grid run from one particle; see [`GridSim`].
pub fn run(params: &ModelParams, levels: u32, key: StreamKey, cap: u64) -> Result<Vec<GenerationState>> {
    GridSim::new(params, key, cap, StepPath::Auto)?.run(levels)
}

/// Occupied cells `A_m` of fractal percolation, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FractalState {
    pub level: u32,
    pub occupied: Vec<CellKey>,
}

impl FractalState {
    pub fn origin() -> Self {
        FractalState { level: 0, occupied: vec![CellKey { level: 0, path: Path::Packed(0) }] }
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.occupied.binary_search(key).is_ok()
    }
}

/// Keeps each child of each occupied cell independently with probability `p`.
pub fn fractal_step(state: &FractalState, p: f64, lattice: &Lattice, key: StreamKey) -> FractalState {
    let key = key.tag(Tag::Fractal);
    let expand = |cell: &CellKey| -> Vec<CellKey> {
        (0..lattice.cells_per_parent())
            .map(|d| lattice.child(cell, d))
            .filter(|child| child.stream(key).uniform() < p)
            .collect()
    };
    let occupied: Vec<CellKey> = if state.occupied.len() >= PAR_THRESHOLD {
        state.occupied.par_iter().flat_map_iter(expand).collect()
    } else {
        state.occupied.iter().flat_map(expand).collect()
    };
    FractalState { level: state.level + 1, occupied }
}

pub fn fractal_run(lattice: &Lattice, p: f64, levels: u32, key: StreamKey, cap: u64) -> Result<Vec<FractalState>> {
    if !(0.0..=1.0).contains(&p) {
        return domain(format!("keep probability {p} outside [0,1]"));
    }
    let mut out = vec![FractalState::origin()];
    for _ in 0..levels {
        let next = fractal_step(out.last().unwrap(), p, lattice, key);
        if next.occupied.len() as u64 > cap {
            return Err(Error::Resource { what: format!("occupied cells at level {}", next.level), cap });
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractalOutcome {
    /// Non-extinct at the last level evolved.
    pub alive: bool,
    pub level_reached: u32,
    pub occupied: u64,
    /// Stopped because occupancy reached the stop threshold.
    pub stopped_early: bool,
}

/// Evolves until extinction, `levels`, or `stop_at` occupied cells, whichever
/// comes first. Returns the same states as [`fractal_run`] up to the stop.
pub fn fractal_survival(lattice: &Lattice, p: f64, levels: u32, key: StreamKey, stop_at: u64) -> FractalOutcome {
    let mut state = FractalState::origin();
    while state.level < levels {
        if state.occupied.is_empty() {
            break;
        }
        if state.occupied.len() as u64 >= stop_at {
            return FractalOutcome { alive: true, level_reached: state.level, occupied: state.occupied.len() as u64, stopped_early: true };
        }
        state = fractal_step(&state, p, lattice, key);
    }
    FractalOutcome {
        alive: !state.occupied.is_empty(),
        level_reached: state.level,
        occupied: state.occupied.len() as u64,
        stopped_early: false,
    }
}

/// Poisson grid process coupled with fractal percolation of keep probability
/// `1 - exp(-c)`. In a child cell `y` of `x`, `a ~ Poi(c)` counts the children
/// of the first particle of `x` and `b ~ Poi(c (N(x) - 1))` those of the rest;
/// `N(y) = a + b` and `I(y) = I(x) and a > 0`.
#[derive(Debug, Clone)]
pub struct Coupling {
    lattice: Lattice,
    c: f64,
    key: StreamKey,
    cap: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainmentAudit {
    /// Occupied cells of the smaller process, per level.
    pub occupied: Vec<u64>,
    /// Cells occupied in the smaller process and empty in the larger.
    pub violations: u64,
}

impl Coupling {
    pub fn new(lattice: Lattice, c: f64, key: StreamKey, cap: u64) -> Result<Self> {
        let floor = 1.0 / lattice.cells_per_parent() as f64;
        if !(c > floor) || !c.is_finite() {
            return config(format!("coupling needs c > B^-d = {floor}, got {c}"));
        }
        Ok(Coupling { lattice, c, key: key.tag(Tag::Coupling), cap })
    }

    pub fn keep_probability(&self) -> f64 {
        -(-self.c).exp_m1()
    }

    fn first(&self, child: &CellKey) -> u64 {
        keyed_poisson(child.stream(self.key.with(0)), self.c)
    }

    fn rest(&self, child: &CellKey, n: u64) -> u64 {
        keyed_poisson(child.stream(self.key.with(1)), self.c * (n.saturating_sub(1)) as f64)
    }

    fn child_pair(&self, child: &CellKey, n: u64) -> (u64, bool) {
        if n == 0 {
            return (0, false);
        }
        let a = self.first(child);
        (a + self.rest(child, n), a > 0)
    }

    pub fn step(&self, gen: &GenerationState, frac: &FractalState) -> Result<(GenerationState, FractalState)> {
        let mut cells = Vec::new();
        let mut occupied = Vec::new();
        for (key, n) in &gen.cells {
            let in_frac = frac.contains(key);
            for d in 0..self.lattice.cells_per_parent() {
                let child = self.lattice.child(key, d);
                let (k, hit) = self.child_pair(&child, *n);
                if k > 0 {
                    cells.push((child.clone(), k));
                }
                if in_frac && hit {
                    occupied.push(child);
                }
            }
        }
        let next = GenerationState::from_cells(gen.level + 1, cells);
        if next.total > self.cap {
            return Err(Error::Resource { what: format!("population at level {}", next.level), cap: self.cap });
        }
        Ok((next, FractalState { level: frac.level + 1, occupied }))
    }

    pub fn run(&self, levels: u32) -> Result<Vec<(GenerationState, FractalState)>> {
        let mut out = vec![(GenerationState::origin(), FractalState::origin())];
        for _ in 0..levels {
            let (g, f) = out.last().unwrap();
            let next = self.step(g, f)?;
            out.push(next);
        }
        Ok(out)
    }

    /// The fractal component alone, which only needs the `a` draws.
    pub fn fractal_component(&self, levels: u32) -> Result<Vec<FractalState>> {
        let mut out = vec![FractalState::origin()];
        for _ in 0..levels {
            let cur = out.last().unwrap();
            let occupied: Vec<CellKey> = cur
                .occupied
                .iter()
                .flat_map(|cell| (0..self.lattice.cells_per_parent()).map(move |d| self.lattice.child(cell, d)))
                .filter(|child| self.first(child) > 0)
                .collect();
            if occupied.len() as u64 > self.cap {
                return Err(Error::Resource { what: "fractal cells".into(), cap: self.cap });
            }
            out.push(FractalState { level: cur.level + 1, occupied });
        }
        Ok(out)
    }

    /// Computes the fractal component, then the grid counts on its cells only,
    /// and counts fractal cells whose grid count is zero. Agrees with the full
    /// [`run`](Self::run) cell for cell.
    pub fn audit(&self, levels: u32) -> Result<ContainmentAudit> {
        let frac = self.fractal_component(levels)?;
        let mut counts: Vec<u64> = vec![1];
        let mut violations = 0;
        let mut occupied = vec![1u64];
        for m in 1..=levels as usize {
            let prev = &frac[m - 1].occupied;
            let mut next_counts = Vec::with_capacity(frac[m].occupied.len());
            // both levels are sorted and children follow their parents
            let mut j = 0;
            for cell in &frac[m].occupied {
                let parent = self.lattice.prefix(cell, cell.level - 1);
                while prev[j] != parent {
                    j += 1;
                }
                let (k, _) = self.child_pair(cell, counts[j]);
                if k == 0 {
                    violations += 1;
                }
                next_counts.push(k);
            }
            occupied.push(frac[m].occupied.len() as u64);
            counts = next_counts;
        }
        Ok(ContainmentAudit { occupied, violations })
    }
}

/// Two Poisson grid processes with `c1 <= c2`. In a child cell with parent
/// counts `n1 <= n2`, `N1 = a` and `N2 = a + e` where `a ~ Poi(c1 n1)` and
/// `e ~ Poi(c1 (n2 - n1) + (c2 - c1) n2)` are independent.
#[derive(Debug, Clone)]
pub struct MonotoneCoupling {
    lattice: Lattice,
    c1: f64,
    c2: f64,
    key: StreamKey,
    cap: u64,
}

impl MonotoneCoupling {
    pub fn new(lattice: Lattice, c1: f64, c2: f64, key: StreamKey, cap: u64) -> Result<Self> {
        let floor = 1.0 / lattice.cells_per_parent() as f64;
        if !(floor < c1 && c1 <= c2 && c2.is_finite()) {
            return config(format!("monotone coupling needs B^-d < c1 <= c2, got c1={c1} c2={c2}"));
        }
        Ok(MonotoneCoupling { lattice, c1, c2, key: key.tag(Tag::Monotone), cap })
    }

    fn pair(&self, child: &CellKey, n1: u64, n2: u64) -> (u64, u64) {
        let a = keyed_poisson(child.stream(self.key.with(0)), self.c1 * n1 as f64);
        let lam = self.c1 * n2.saturating_sub(n1) as f64 + (self.c2 - self.c1) * n2 as f64;
        let e = keyed_poisson(child.stream(self.key.with(1)), lam);
        (a, a + e)
    }

    pub fn step(&self, g1: &GenerationState, g2: &GenerationState) -> Result<(GenerationState, GenerationState)> {
        let mut parents: Vec<(&CellKey, u64, u64)> = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < g1.cells.len() || j < g2.cells.len() {
            let ord = match (g1.cells.get(i), g2.cells.get(j)) {
                (Some(a), Some(b)) => a.0.cmp(&b.0),
                (Some(_), None) => std::cmp::Ordering::Less,
                _ => std::cmp::Ordering::Greater,
            };
            match ord {
                std::cmp::Ordering::Less => {
                    parents.push((&g1.cells[i].0, g1.cells[i].1, 0));
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    parents.push((&g2.cells[j].0, 0, g2.cells[j].1));
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    parents.push((&g1.cells[i].0, g1.cells[i].1, g2.cells[j].1));
                    i += 1;
                    j += 1;
                }
            }
        }
        let (mut c1, mut c2) = (Vec::new(), Vec::new());
        for (key, n1, n2) in parents {
            for d in 0..self.lattice.cells_per_parent() {
                let child = self.lattice.child(key, d);
                let (a, b) = self.pair(&child, n1, n2);
                if a > 0 {
                    c1.push((child.clone(), a));
                }
                if b > 0 {
                    c2.push((child, b));
                }
            }
        }
        let s1 = GenerationState::from_cells(g1.level + 1, c1);
        let s2 = GenerationState::from_cells(g2.level + 1, c2);
        if s2.total > self.cap || s1.total > self.cap {
            return Err(Error::Resource { what: format!("population at level {}", s2.level), cap: self.cap });
        }
        Ok((s1, s2))
    }

    pub fn run(&self, levels: u32) -> Result<Vec<(GenerationState, GenerationState)>> {
        let mut out = vec![(GenerationState::origin(), GenerationState::origin())];
        for _ in 0..levels {
            let (a, b) = out.last().unwrap();
            let next = self.step(a, b)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Evolves only cells occupied by the first process, carrying both counts,
    /// and counts cells where the second process is empty.
    pub fn audit(&self, levels: u32) -> Result<ContainmentAudit> {
        let mut cur: Vec<(CellKey, u64, u64)> = vec![(self.lattice.root(), 1, 1)];
        let mut occupied = vec![1u64];
        let mut violations = 0;
        for _ in 0..levels {
            let mut next = Vec::new();
            for (key, n1, n2) in &cur {
                for d in 0..self.lattice.cells_per_parent() {
                    let child = self.lattice.child(key, d);
                    let (a, b) = self.pair(&child, *n1, *n2);
                    if a > 0 {
                        if b == 0 {
                            violations += 1;
                        }
                        next.push((child, a, b));
                    }
                }
            }
            if next.len() as u64 > self.cap {
                return Err(Error::Resource { what: "occupied cells".into(), cap: self.cap });
            }
            occupied.push(next.len() as u64);
            cur = next;
        }
        Ok(ContainmentAudit { occupied, violations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_roundtrip_and_prefix() {
        for (d, b) in [(1, 2), (2, 2), (3, 2), (2, 3)] {
            let lat = Lattice::new(d, b).unwrap();
            let key = StreamKey::root(4);
            for level in [0u32, 1, 5, 9] {
                for i in 0..20 {
                    let side = lat.side(level);
                    let coords: Vec<u64> = (0..d as u64).map(|j| key.with(i).with(j).value() % side).collect();
                    let cell = lat.from_coords(level, &coords).unwrap();
                    assert_eq!(lat.coords(&cell).to_vec(), coords);
                    for m in 0..=level {
                        let pre = lat.coords(&lat.prefix(&cell, m));
                        let scale = lat.side(level - m);
                        assert_eq!(pre.to_vec(), coords.iter().map(|c| c / scale).collect::<Vec<_>>());
                    }
                }
            }
        }
    }

    #[test]
    fn child_coords() {
        let lat = Lattice::new(2, 3).unwrap();
        let cell = lat.from_coords(2, &[4, 7]).unwrap();
        let child = lat.child(&cell, 2 + 3 * 1);
        assert_eq!(lat.coords(&child).to_vec(), vec![14, 22]);
    }

    #[test]
    fn wide_keys_past_128_bits() {
        let lat = Lattice::new(3, 2).unwrap();
        assert!(lat.packed_fits(42) && !lat.packed_fits(43));
        let mut cell = lat.root();
        for i in 0..50u32 {
            cell = lat.child(&cell, (i * 5) % 8);
        }
        assert!(!cell.is_packed());
        let coords = lat.coords(&cell);
        assert_eq!(lat.from_coords(50, &coords).unwrap(), cell);
        let pre = lat.prefix(&cell, 40);
        assert!(pre.is_packed());
        assert_eq!(lat.coords(&pre).to_vec(), coords.iter().map(|c| c >> 10).collect::<Vec<_>>());
        let mut a = lat.child(&lat.prefix(&cell, 49), 0);
        let b = lat.child(&lat.prefix(&cell, 49), 7);
        assert!(a < b);
        a = lat.prefix(&a, 43);
        assert!(!a.is_packed());
    }

    #[test]
    fn sorted_children_of_sorted_parents() {
        let p = ModelParams::grid(2, 2, OffspringLaw::poisson(4.0));
        let states = run(&p, 6, StreamKey::root(8), DEFAULT_CAP).unwrap();
        for s in &states {
            assert!(s.cells.windows(2).all(|w| w[0].0 < w[1].0));
            assert_eq!(s.total, s.cells.iter().map(|c| c.1).sum::<u64>());
        }
    }

    #[test]
    fn deterministic_one_is_one_lineage() {
        let p = ModelParams::grid(2, 2, OffspringLaw::deterministic(1));
        let states = run(&p, 20, StreamKey::root(1), DEFAULT_CAP).unwrap();
        assert!(states.iter().all(|s| s.total == 1 && s.occupied() == 1));
    }

    #[test]
    fn immediate_extinction() {
        let p = ModelParams::grid(2, 2, OffspringLaw::table(vec![1.0]).unwrap());
        let states = run(&p, 3, StreamKey::root(1), DEFAULT_CAP).unwrap();
        assert_eq!(states.len(), 4);
        assert!(states[1..].iter().all(|s| s.is_extinct()));
        assert_eq!(run(&p, 0, StreamKey::root(1), DEFAULT_CAP).unwrap(), vec![GenerationState::origin()]);
    }

    #[test]
    fn cap_is_enforced() {
        let p = ModelParams::grid(2, 2, OffspringLaw::deterministic(4));
        let err = run(&p, 10, StreamKey::root(1), 1000).unwrap_err();
        assert!(matches!(err, Error::Resource { cap: 1000, .. }));
    }

    #[test]
    fn restricted_and_path_agree_with_full_run() {
        for (law, path) in [
            (OffspringLaw::poisson(4.0), StepPath::Auto),
            (OffspringLaw::poisson(4.0), StepPath::Generic),
            (OffspringLaw::geometric(3.0), StepPath::Auto),
        ] {
            let p = ModelParams::grid(2, 2, law);
            for rep in 0..5 {
                let sim = GridSim::new(&p, StreamKey::root(12).with(rep), DEFAULT_CAP, path).unwrap();
                let full = sim.run(6).unwrap();
                let lat = sim.lattice();
                let targets: Vec<CellKey> = full[6].keys().into_iter().step_by(7).collect();
                let allowed = lat.prefix_closure(&targets);
                let part = sim.run_restricted(6, &allowed).unwrap();
                for (a, b) in full.iter().zip(&part) {
                    for (k, n) in &b.cells {
                        assert_eq!(a.count(k), *n);
                    }
                }
                let origin = lat.from_coords(6, &[0, 0]).unwrap();
                let counts = sim.path_counts(&origin).unwrap();
                for (m, c) in counts.iter().enumerate() {
                    assert_eq!(full[m].count(&lat.prefix(&origin, m as u32)), *c);
                }
                let prof = sim.occupancy_profile(6).unwrap();
                for (m, s) in full.iter().enumerate() {
                    assert_eq!(prof.occupied[m], s.occupied() as u64);
                    assert_eq!(prof.population[m], s.total);
                }
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_states() {
        let p = ModelParams::grid(3, 2, OffspringLaw::poisson(4.0));
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run(&p, 7, StreamKey::root(3), DEFAULT_CAP).unwrap());
        let b = four.install(|| run(&p, 7, StreamKey::root(3), DEFAULT_CAP).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn fractal_extremes_and_prefix_closure() {
        let lat = Lattice::new(2, 2).unwrap();
        let full = fractal_run(&lat, 1.0, 4, StreamKey::root(1), DEFAULT_CAP).unwrap();
        assert_eq!(full[4].occupied.len(), 256);
        let none = fractal_run(&lat, 0.0, 1, StreamKey::root(1), DEFAULT_CAP).unwrap();
        assert!(none[1].occupied.is_empty());
        let mid = fractal_run(&lat, 0.7, 8, StreamKey::root(5), DEFAULT_CAP).unwrap();
        for w in mid.windows(2) {
            for cell in &w[1].occupied {
                assert!(w[0].contains(&lat.parent(cell).unwrap()));
            }
        }
    }

    #[test]
    fn fractal_early_stop_matches_run() {
        let lat = Lattice::new(2, 2).unwrap();
        for rep in 0..20 {
            let key = StreamKey::root(2).with(rep);
            let states = fractal_run(&lat, 0.5, 12, key, DEFAULT_CAP).unwrap();
            let out = fractal_survival(&lat, 0.5, 12, key, 1 << 30);
            assert_eq!(out.alive, !states[12].occupied.is_empty());
            let out = fractal_survival(&lat, 0.5, 12, key, 40);
            if out.stopped_early {
                assert_eq!(states[out.level_reached as usize].occupied.len() as u64, out.occupied);
            }
        }
    }

    #[test]
    fn coupling_audit_matches_full_run() {
        let lat = Lattice::new(2, 2).unwrap();
        for c in [0.6, 1.0] {
            for rep in 0..10 {
                let cp = Coupling::new(lat, c, StreamKey::root(77).with(rep), DEFAULT_CAP).unwrap();
                let full = cp.run(7).unwrap();
                let audit = cp.audit(7).unwrap();
                let fc = cp.fractal_component(7).unwrap();
                for (m, (g, f)) in full.iter().enumerate() {
                    assert_eq!(f, &fc[m]);
                    assert_eq!(audit.occupied[m], f.occupied.len() as u64);
                    assert!(f.occupied.iter().all(|k| g.count(k) > 0));
                }
                assert_eq!(audit.violations, 0);
            }
        }
        assert!(Coupling::new(lat, 0.2, StreamKey::root(1), DEFAULT_CAP).is_err());
    }

    #[test]
    fn monotone_audit_matches_full_run() {
        let lat = Lattice::new(2, 2).unwrap();
        for rep in 0..10 {
            let mc = MonotoneCoupling::new(lat, 0.6, 1.0, StreamKey::root(5).with(rep), DEFAULT_CAP).unwrap();
            let full = mc.run(7).unwrap();
            let audit = mc.audit(7).unwrap();
            for (m, (a, b)) in full.iter().enumerate() {
                assert_eq!(audit.occupied[m], a.occupied() as u64);
                assert!(a.cells.iter().all(|(k, _)| b.count(k) > 0));
                assert!(b.total >= a.total);
            }
            assert_eq!(audit.violations, 0);
        }
        let same = MonotoneCoupling::new(lat, 0.8, 0.8, StreamKey::root(2), DEFAULT_CAP).unwrap();
        for (a, b) in same.run(6).unwrap() {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn distinct_sites_binomial_is_fractal_percolation() {
        let mut p = ModelParams::grid(2, 2, OffspringLaw::binomial(4, 0.6));
        p.displacement = DisplacementLaw::DistinctSites;
        let states = run(&p, 8, StreamKey::root(3), DEFAULT_CAP).unwrap();
        assert!(states.iter().all(|s| s.cells.iter().all(|c| c.1 == 1)));
    }

    #[test]
    fn csv_export() {
        let lat = Lattice::new(2, 2).unwrap();
        let s = GenerationState::from_cells(1, vec![(lat.from_coords(1, &[1, 0]).unwrap(), 3)]);
        assert_eq!(s.to_csv(&lat), "level,coord_1,coord_2,count\n1,1,0,3\n");
    }
}
