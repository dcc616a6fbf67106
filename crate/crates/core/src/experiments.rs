//! Named experiment suites: configuration, replicate fan-out, aggregation and
//! artifact files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectivity::{ball_hit, check_ball_config, crossing, support_stats_from_count, td_certify_streaming, AdjacencyMode};
use crate::error::{config, Error, Result};
use crate::genealogy::{drift_table, gamma_process, spine_event_closed_form, spine_event_frequency, spine_run, GammaConfig};
use crate::grid::{fractal_run, fractal_survival, Coupling, GridSim, Lattice, MonotoneCoupling, StepPath};
use crate::gw_exact::{asymptotic_report, extinction_prob, pgf_curve, CurveRegime};
use crate::laws::{Mode, ModelParams, OffspringLaw};
use crate::rng::{StreamKey, Tag};
use crate::sbm::{sample_qk, strm_free_run, validate_offspring_histogram};
use crate::stats::{ks_one_sample, linear_regression, normal_cdf, trend_test, Frequency, Welford};

pub const Z95: f64 = 1.96;
pub const DEFAULT_REPLICATES: u64 = 1000;
pub const THREADS_ENV: &str = "STRMLAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Survival,
    Hitting,
    MeanMeasure,
    CouplingContainment,
    MonotoneCoupling,
    CrossingSweep,
    TdCertify,
    GammaSupermartingale,
    Spine,
    SbmValidate,
    GrowthExponent,
    HStatistic,
    BallHitting,
    GwExactTables,
    BetaBracket,
}

impl Experiment {
    pub const ALL: [Experiment; 15] = [
        Experiment::Survival,
        Experiment::Hitting,
        Experiment::MeanMeasure,
        Experiment::CouplingContainment,
        Experiment::MonotoneCoupling,
        Experiment::CrossingSweep,
        Experiment::TdCertify,
        Experiment::GammaSupermartingale,
        Experiment::Spine,
        Experiment::SbmValidate,
        Experiment::GrowthExponent,
        Experiment::HStatistic,
        Experiment::BallHitting,
        Experiment::GwExactTables,
        Experiment::BetaBracket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Survival => "survival",
            Experiment::Hitting => "hitting",
            Experiment::MeanMeasure => "mean-measure",
            Experiment::CouplingContainment => "coupling-containment",
            Experiment::MonotoneCoupling => "monotone-coupling",
            Experiment::CrossingSweep => "crossing-sweep",
            Experiment::TdCertify => "td-certify",
            Experiment::GammaSupermartingale => "gamma-supermartingale",
            Experiment::Spine => "spine",
            Experiment::SbmValidate => "sbm-validate",
            Experiment::GrowthExponent => "growth-exponent",
            Experiment::HStatistic => "h-statistic",
            Experiment::BallHitting => "ball-hitting",
            Experiment::GwExactTables => "gw-exact-tables",
            Experiment::BetaBracket => "beta-bracket",
        }
    }

    fn default_model(self) -> ModelParams {
        match self {
            Experiment::TdCertify
            | Experiment::GammaSupermartingale
            | Experiment::Spine
            | Experiment::GrowthExponent => ModelParams::grid(3, 2, OffspringLaw::poisson(4.0)),
            Experiment::SbmValidate => {
                let mut p = ModelParams::grid(2, 2, OffspringLaw::geometric(4.0));
                p.mode = Mode::Free;
                p
            }
            _ => ModelParams::grid(2, 2, OffspringLaw::poisson(4.0)),
        }
    }

    fn default_levels(self, model: &ModelParams) -> u32 {
        match self {
            Experiment::Survival | Experiment::Hitting | Experiment::CrossingSweep | Experiment::BallHitting => 8,
            Experiment::MeanMeasure => 5,
            Experiment::CouplingContainment | Experiment::MonotoneCoupling => 12,
            Experiment::TdCertify => 2,
            Experiment::GammaSupermartingale => 40,
            Experiment::Spine => 100_000,
            Experiment::SbmValidate => 20,
            Experiment::GrowthExponent | Experiment::HStatistic => 12,
            Experiment::GwExactTables => 1000,
            Experiment::BetaBracket => {
                if model.dim >= 3 {
                    5
                } else {
                    7
                }
            }
        }
    }

    fn default_sweep(self) -> Option<Sweep> {
        let s = |axis, values: &[f64]| Some(Sweep { axis, values: values.to_vec() });
        match self {
            Experiment::CouplingContainment | Experiment::MonotoneCoupling => s(SweepAxis::C, &[0.6, 1.0]),
            Experiment::CrossingSweep => s(SweepAxis::P, &[0.4, 0.5, 0.55, 0.7, 0.85, 0.95]),
            Experiment::BetaBracket => s(SweepAxis::Beta, &[0.8, 0.9, 1.0, 1.1, 1.2, 4.0 / 3.0, 1.5]),
            _ => None,
        }
    }

    fn allowed_axes(self) -> &'static [SweepAxis] {
        match self {
            Experiment::Survival => &[SweepAxis::P],
            Experiment::CouplingContainment | Experiment::MonotoneCoupling => &[SweepAxis::C],
            Experiment::CrossingSweep => &[SweepAxis::P, SweepAxis::C],
            Experiment::BetaBracket => &[SweepAxis::Beta, SweepAxis::Mu],
            Experiment::TdCertify | Experiment::BallHitting | Experiment::GwExactTables => &[SweepAxis::Mu],
            _ => &[],
        }
    }

    /// Whether the suite draws random replicates at all.
    pub fn is_monte_carlo(self) -> bool {
        self != Experiment::GwExactTables
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    P,
    C,
    Mu,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Suite-specific knobs. Unset fields take per-suite defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteOptions {
    /// Base level `m` of the separation search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ells: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allow_supercritical: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_k_max: Option<u64>,
    /// Generations at which spine events are counted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_generations: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_cells: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<f64>,
    /// Inclusive level range of slope fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_levels: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qk_samples: Option<u64>,
    /// Mean of the Geometric offspring law of the free-mode runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_mu: Option<f64>,
    /// Occupied-cell count at which a fractal run is declared surviving.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<u64>,
    /// Extra levels a subtree must survive to count as hit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead: Option<u32>,
    /// Crossing axis, zero-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<u32>,
}

fn default_cap() -> u64 {
    crate::grid::DEFAULT_CAP
}

fn default_replicates() -> u64 {
    DEFAULT_REPLICATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelParams>,
    /// Levels, generations, steps or horizon, depending on the suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adjacency: AdjacencyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub cap: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub options: SuiteOptions,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment: experiment.name().to_string(),
            model: None,
            levels: None,
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            adjacency: AdjacencyMode::Face,
            sweep: None,
            out_dir: None,
            cap: default_cap(),
            threads: None,
            options: SuiteOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn kind(&self) -> Result<Experiment> {
        self.experiment.parse()
    }

    /// Fills every unset field with the suite default and validates.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let exp = self.kind()?;
        let mut c = self.clone();
        let model = c.model.get_or_insert_with(|| exp.default_model()).clone();
        let levels = *c.levels.get_or_insert_with(|| exp.default_levels(&model));
        if c.sweep.is_none() {
            c.sweep = exp.default_sweep();
        }
        let o = &mut c.options;
        match exp {
            Experiment::Survival => {
                if c.sweep.is_some() {
                    o.stop_at.get_or_insert(4096);
                }
            }
            Experiment::Hitting => {
                o.lookahead.get_or_insert(12);
            }
            Experiment::MeanMeasure => {
                o.probe_cells.get_or_insert(20);
            }
            Experiment::CrossingSweep | Experiment::BetaBracket => {
                o.axis.get_or_insert(0);
            }
            Experiment::TdCertify => {
                o.base_level.get_or_insert(levels);
                o.horizon.get_or_insert(3 * levels + 20);
                o.tracked_cap.get_or_insert(1 << 15);
            }
            Experiment::GammaSupermartingale => {
                o.ells.get_or_insert_with(|| (0..model.dim).collect());
                o.allow_supercritical.get_or_insert(false);
                o.drift_k_max.get_or_insert(20);
            }
            Experiment::Spine => {
                o.event_generations.get_or_insert_with(|| vec![5, 10, 20]);
            }
            Experiment::SbmValidate => {
                o.qk_samples.get_or_insert(10_000);
                o.free_mu.get_or_insert(1.5);
            }
            Experiment::GrowthExponent | Experiment::HStatistic => {
                o.fit_levels.get_or_insert((6.min(levels), levels));
            }
            Experiment::BallHitting => {
                o.ball_center.get_or_insert_with(|| vec![0.5; model.dim as usize]);
                o.ball_radius.get_or_insert(0.25);
            }
            _ => {}
        }
        c.validate(exp)?;
        Ok(c)
    }

    fn validate(&self, exp: Experiment) -> Result<()> {
        let model = self.model.as_ref().expect("resolved");
        let levels = self.levels.expect("resolved");
        let o = &self.options;
        if self.replicates > 1_000_000_000 {
            return config(format!("replicates = {} is above 1e9", self.replicates));
        }
        if self.threads == Some(0) {
            return config("threads must be positive");
        }
        model.offspring.validate()?;
        if exp == Experiment::SbmValidate {
            if model.dim == 0 {
                return config("dimension must be positive");
            }
            let mu = o.free_mu.expect("resolved");
            if !(mu > 1.0 && mu.is_finite()) {
                return config(format!("free_mu = {mu} must exceed 1"));
            }
            if !(model.offspring.mean() > 1.0) {
                return config("offspring mean must exceed 1");
            }
        } else {
            model.validate()?;
            let lattice = Lattice::of(model)?;
            let depth = match exp {
                Experiment::Hitting => levels + o.lookahead.unwrap_or(0),
                Experiment::TdCertify => o.horizon.expect("resolved"),
                Experiment::GammaSupermartingale => levels + 2,
                Experiment::Spine | Experiment::GwExactTables => 0,
                _ => levels,
            };
            if depth > lattice.max_level() {
                return config(format!("depth {depth} is above the lattice limit {}", lattice.max_level()));
            }
        }
        if let Some(sweep) = &self.sweep {
            if !exp.allowed_axes().contains(&sweep.axis) {
                return config(format!("{exp} does not sweep over {:?}", sweep.axis));
            }
            if sweep.values.is_empty() {
                return config("sweep has no values");
            }
            let floor = (model.base as f64).powi(-(model.dim as i32));
            for &v in &sweep.values {
                let ok = v.is_finite()
                    && match sweep.axis {
                        SweepAxis::P => (0.0..=1.0).contains(&v),
                        SweepAxis::C => v > floor,
                        SweepAxis::Mu => v > 1.0,
                        SweepAxis::Beta => v > 0.0,
                    };
                if !ok {
                    return config(format!("sweep value {v} out of range for {:?}", sweep.axis));
                }
            }
            if exp == Experiment::MonotoneCoupling && sweep.values.len() < 2 {
                return config("monotone coupling needs at least two c values");
            }
        }
        match exp {
            Experiment::TdCertify => {
                if o.horizon.unwrap() < o.base_level.unwrap() {
                    return config("horizon below the base level");
                }
            }
            Experiment::GammaSupermartingale => {
                let ells = o.ells.as_ref().unwrap();
                if ells.is_empty() || ells.iter().any(|&l| l >= model.dim) {
                    return config(format!("ells must be non-empty and below d = {}", model.dim));
                }
            }
            Experiment::Spine => {
                if o.event_generations.as_ref().unwrap().is_empty() {
                    return config("no event generations");
                }
                if levels == 0 {
                    return config("chain length must be positive");
                }
            }
            Experiment::GrowthExponent | Experiment::HStatistic => {
                let (a, b) = o.fit_levels.unwrap();
                if !(a < b && b <= levels) {
                    return config(format!("fit levels ({a}, {b}) must satisfy a < b <= {levels}"));
                }
            }
            Experiment::BallHitting => {
                check_ball_config(&Lattice::of(model)?, o.ball_center.as_ref().unwrap(), o.ball_radius.unwrap(), levels)?;
            }
            Experiment::CrossingSweep | Experiment::BetaBracket => {
                if o.axis.unwrap() >= model.dim {
                    return config("crossing axis out of range");
                }
            }
            Experiment::GwExactTables => {
                if levels == 0 || levels as usize > crate::gw_exact::MAX_HORIZON {
                    return config("horizon out of range");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration without output path and thread count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.threads = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// A mean with its CLT interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
    pub samples: u64,
}

impl MeanEstimate {
    pub fn from_welford(w: &Welford) -> Option<Self> {
        (w.n >= 2).then(|| {
            let se = w.std_err();
            MeanEstimate { mean: w.mean, std_err: se, lo: w.mean - Z95 * se, hi: w.mean + Z95 * se, samples: w.n }
        })
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.std_err
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    pub frequencies: BTreeMap<String, Frequency>,
    pub means: BTreeMap<String, MeanEstimate>,
    pub p_values: BTreeMap<String, f64>,
    /// Exact or deterministic quantities (oracle values, fitted constants).
    pub exact: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
}

impl SweepPoint {
    fn new(label: impl Into<String>, axis_value: Option<f64>) -> Self {
        SweepPoint { label: label.into(), axis_value, ..Default::default() }
    }

    fn freq(&mut self, name: &str, successes: u64, trials: u64) {
        if let Some(f) = Frequency::new(successes, trials, Z95) {
            self.frequencies.insert(name.to_string(), f);
        }
    }

    fn mean(&mut self, name: &str, w: &Welford) {
        if let Some(m) = MeanEstimate::from_welford(w) {
            self.means.insert(name.to_string(), m);
        }
    }

    fn exact(&mut self, name: &str, v: f64) {
        if v.is_finite() {
            self.exact.insert(name.to_string(), v);
        }
    }

    fn count(&mut self, name: &str, v: u64) {
        self.counts.insert(name.to_string(), v);
    }

    fn p_value(&mut self, name: &str, v: f64) {
        if v.is_finite() {
            self.p_values.insert(name.to_string(), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub replicates: u64,
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    pub notes: Vec<String>,
}

impl RunSummary {
    pub fn point(&self, label: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.label == label)
    }

    /// SHA-256 of the serialized summary.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("summary serializes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem; written as `<name>.csv`.
    pub name: String,
    pub csv: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    pub tables: Vec<Table>,
    pub wall_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Resolved configuration; feeding it back reproduces the run.
    pub config: ExperimentConfig,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub threads: usize,
}

pub fn version() -> String {
    match option_env!("STRMLAB_GIT_DESCRIBE") {
        Some(g) if !g.is_empty() => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Thread count: explicit value, then `STRMLAB_THREADS`, then the rayon default.
pub fn thread_count(explicit: Option<usize>) -> Result<usize> {
    if let Some(t) = explicit {
        return Ok(t);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(t),
            _ => config(format!("{THREADS_ENV} = `{v}` is not a positive integer")),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

/// Runs a suite in its own thread pool. Writes nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = cfg.resolve()?;
    let threads = thread_count(cfg.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (points, tables, notes) = pool.install(|| dispatch(&cfg))?;
    let summary = RunSummary {
        experiment: cfg.experiment.clone(),
        version: version(),
        seed: cfg.seed,
        replicates: cfg.replicates,
        config_hash: cfg.hash(),
        points,
        notes,
    };
    Ok(RunOutput { config: cfg, summary, tables, wall_seconds: start.elapsed().as_secs_f64(), threads })
}

/// Writes `summary.json`, `manifest.json`, `timing.json` and the CSV tables.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    let mut files = vec!["summary.json".to_string(), "timing.json".to_string()];
    for t in &out.tables {
        let name = format!("{}.csv", t.name);
        put(&name, t.csv.as_bytes())?;
        files.push(name);
    }
    put("summary.json", &serde_json::to_vec_pretty(&out.summary)?)?;
    let timing = Timing { wall_seconds: out.wall_seconds, threads: out.threads };
    put("timing.json", &serde_json::to_vec_pretty(&timing)?)?;
    let manifest = Manifest {
        experiment: out.summary.experiment.clone(),
        version: out.summary.version.clone(),
        seed: out.summary.seed,
        config_hash: out.summary.config_hash.clone(),
        config: ExperimentConfig { out_dir: None, threads: None, ..out.config.clone() },
        files,
    };
    put("manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(written)
}

type SuiteResult = Result<(Vec<SweepPoint>, Vec<Table>, Vec<String>)>;

fn dispatch(cfg: &ExperimentConfig) -> SuiteResult {
    let exp = cfg.kind()?;
    if exp.is_monte_carlo() && cfg.replicates == 0 {
        return Ok((Vec::new(), Vec::new(), vec!["no replicates requested".into()]));
    }
    match exp {
        Experiment::Survival => match cfg.sweep {
            Some(_) => fractal_survival_suite(cfg),
            None => survival_suite(cfg),
        },
        Experiment::Hitting => hitting_suite(cfg),
        Experiment::MeanMeasure => mean_measure_suite(cfg),
        Experiment::CouplingContainment => coupling_suite(cfg),
        Experiment::MonotoneCoupling => monotone_suite(cfg),
        Experiment::CrossingSweep => crossing_suite(cfg),
        Experiment::TdCertify => td_suite(cfg),
        Experiment::GammaSupermartingale => gamma_suite(cfg),
        Experiment::Spine => spine_suite(cfg),
        Experiment::SbmValidate => sbm_suite(cfg),
        Experiment::GrowthExponent => growth_suite(cfg),
        Experiment::HStatistic => h_statistic_suite(cfg),
        Experiment::BallHitting => ball_suite(cfg),
        Experiment::GwExactTables => gw_tables_suite(cfg),
        Experiment::BetaBracket => beta_suite(cfg),
    }
}

fn model(cfg: &ExperimentConfig) -> &ModelParams {
    cfg.model.as_ref().expect("resolved config")
}

fn levels(cfg: &ExperimentConfig) -> u32 {
    cfg.levels.expect("resolved config")
}

/// Replicate `r` uses the same key at every sweep point, so sweeps are coupled.
fn replicate_key(cfg: &ExperimentConfig, r: u64) -> StreamKey {
    StreamKey::root(cfg.seed).with(r)
}

fn par_replicates<T: Send>(n: u64, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

fn sweep_points(cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    let sweep = cfg.sweep.as_ref().expect("sweep");
    let name = match sweep.axis {
        SweepAxis::P => "p",
        SweepAxis::C => "c",
        SweepAxis::Mu => "mu",
        SweepAxis::Beta => "beta",
    };
    sweep.values.iter().map(|&v| (format!("{name}={v}"), v)).collect()
}

/// Model with Poisson offspring of mean `mu`, other fields kept.
fn with_poisson_mean(m: &ModelParams, mu: f64) -> ModelParams {
    ModelParams { offspring: OffspringLaw::poisson(mu), ..m.clone() }
}

/// Models named by a `mu` sweep, or the configured model alone.
fn mu_points(cfg: &ExperimentConfig) -> Vec<(String, Option<f64>, ModelParams)> {
    match &cfg.sweep {
        Some(s) if s.axis == SweepAxis::Mu => {
            sweep_points(cfg).into_iter().map(|(l, v)| (l, Some(v), with_poisson_mean(model(cfg), v))).collect()
        }
        _ => vec![("base".to_string(), None, model(cfg).clone())],
    }
}

fn origin_cell(lattice: &Lattice, level: u32) -> crate::grid::CellKey {
    (0..level).fold(lattice.root(), |c, _| lattice.child(&c, 0))
}

fn survival_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let target = origin_cell(&lattice, l);
    let paths = par_replicates(cfg.replicates, |r| {
        GridSim::new(m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?.path_counts(&target)
    })?;
    let curve = pgf_curve(&m.offspring, m.thin_p(), l as usize)?;
    let mut points = Vec::new();
    for lev in 0..=l {
        let alive = paths.iter().filter(|p| p[lev as usize] > 0).count() as u64;
        let mut pt = SweepPoint::new(format!("m={lev}"), Some(lev as f64));
        pt.freq("occupied", alive, cfg.replicates);
        pt.exact("survival_exact", curve.survival[lev as usize]);
        points.push(pt);
    }
    let mut csv = String::from("replicate");
    for lev in 0..=l {
        let _ = write!(csv, ",n{lev}");
    }
    csv.push('\n');
    for (r, p) in paths.iter().enumerate() {
        let _ = write!(csv, "{r}");
        for n in p {
            let _ = write!(csv, ",{n}");
        }
        csv.push('\n');
    }
    let notes = vec!["cell: the level-m cell at the origin corner".to_string()];
    Ok((points, vec![Table { name: "replicates".into(), csv }, Table { name: "survival_exact".into(), csv: curve.to_csv() }], notes))
}

/// `f^{∘n}(0)` for Binomial(P, p): extinction by level `n` of fractal percolation.
fn fractal_extinct_by(cells: u32, p: f64, n: u32) -> Result<f64> {
    let law = OffspringLaw::binomial(cells as u64, p);
    let mut s = 0.0;
    for _ in 0..n {
        s = law.pgf(s)?;
    }
    Ok(s)
}

fn fractal_survival_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let stop_at = cfg.options.stop_at.expect("resolved");
    let cells = lattice.cells_per_parent();
    let mut points = Vec::new();
    let mut csv = String::from("p,replicate,alive,level_reached,occupied,stopped_early\n");
    for (label, p) in sweep_points(cfg) {
        let outs = par_replicates(cfg.replicates, |r| Ok(fractal_survival(&lattice, p, l, replicate_key(cfg, r), stop_at)))?;
        let alive = outs.iter().filter(|o| o.alive).count() as u64;
        let early = outs.iter().filter(|o| o.stopped_early).count() as u64;
        let mut pt = SweepPoint::new(label, Some(p));
        pt.freq("extinct_by_level", cfg.replicates - alive, cfg.replicates);
        pt.freq("alive", alive, cfg.replicates);
        pt.count("stopped_early", early);
        pt.exact("extinct_by_level_exact", fractal_extinct_by(cells, p, l)?);
        let law = OffspringLaw::binomial(cells as u64, p);
        let q = if law.mean() > 1.0 { extinction_prob(&law)? } else { 1.0 };
        pt.exact("q", q);
        pt.exact("survival_exact", 1.0 - q);
        for (r, o) in outs.iter().enumerate() {
            let _ = writeln!(csv, "{p},{r},{},{},{},{}", o.alive as u8, o.level_reached, o.occupied, o.stopped_early as u8);
        }
        points.push(pt);
    }
    let notes = vec![format!(
        "runs reaching {stop_at} occupied cells are counted as surviving; later extinction has probability at most q^{stop_at}"
    )];
    Ok((points, vec![Table { name: "replicates".into(), csv }], notes))
}

fn hitting_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let k = cfg.options.lookahead.expect("resolved");
    let lattice = Lattice::of(m)?;
    let curve = pgf_curve(&m.offspring, m.thin_p(), l as usize)?;
    // hit[m] for each level along the origin path
    let hits = par_replicates(cfg.replicates, |r| {
        let sim = GridSim::new(m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?;
        let target = origin_cell(&lattice, l);
        let counts = sim.path_counts(&target)?;
        (0..=l)
            .map(|lev| {
                let cell = lattice.prefix(&target, lev);
                sim.subtree_survives(&cell, counts[lev as usize], lev + k)
            })
            .collect::<Result<Vec<bool>>>()
    })?;
    let mut points = Vec::new();
    let mut csv = String::from("replicate");
    for lev in 0..=l {
        let _ = write!(csv, ",hit{lev}");
    }
    csv.push('\n');
    for (r, h) in hits.iter().enumerate() {
        let _ = write!(csv, "{r}");
        for &b in h {
            let _ = write!(csv, ",{}", b as u8);
        }
        csv.push('\n');
    }
    for lev in 0..=l {
        let s = hits.iter().filter(|h| h[lev as usize]).count() as u64;
        let mut pt = SweepPoint::new(format!("m={lev}"), Some(lev as f64));
        pt.freq("hit", s, cfg.replicates);
        pt.exact("hitting_exact", curve.hitting[lev as usize]);
        points.push(pt);
    }
    let notes = vec![format!("a cell counts as hit when its particles have descendants {k} levels further down")];
    Ok((points, vec![Table { name: "replicates".into(), csv }], notes))
}

fn mean_measure_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let n_cells = cfg.options.probe_cells.expect("resolved");
    let mut rng = StreamKey::root(cfg.seed).tag(Tag::Sample).rng();
    let cells: Vec<_> = (0..n_cells)
        .map(|_| (0..l).fold(lattice.root(), |c, _| lattice.child(&c, rng.random_range(0..lattice.cells_per_parent()))))
        .collect();
    let scale = m.mu().powi(-(l as i32));
    let rows = par_replicates(cfg.replicates, |r| {
        let sim = GridSim::new(m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?;
        cells.iter().map(|c| Ok(sim.path_counts(c)?[l as usize])).collect::<Result<Vec<u64>>>()
    })?;
    let target = (m.base as f64).powi(-((m.dim * l) as i32));
    let mut points = Vec::new();
    let mut csv = String::from("cell,coords,mean_scaled\n");
    for (j, cell) in cells.iter().enumerate() {
        let w: Welford = rows.iter().map(|row| row[j] as f64 * scale).collect();
        let coords: Vec<String> = lattice.coords(cell).iter().map(|c| c.to_string()).collect();
        let mut pt = SweepPoint::new(format!("cell={j}"), None);
        pt.mean("scaled_count", &w);
        pt.exact("lebesgue", target);
        let _ = writeln!(csv, "{j},{},{}", coords.join(" "), w.mean);
        points.push(pt);
    }
    Ok((points, vec![Table { name: "cells".into(), csv }], vec![format!("{n_cells} cells drawn uniformly at level {l}")]))
}

fn coupling_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let mut points = Vec::new();
    let mut csv = String::from("c,replicate,fractal_occupied,violations\n");
    for (label, c) in sweep_points(cfg) {
        let audits = par_replicates(cfg.replicates, |r| Coupling::new(lattice, c, replicate_key(cfg, r), cfg.cap)?.audit(l))?;
        let clean = audits.iter().filter(|a| a.violations == 0).count() as u64;
        let alive = audits.iter().filter(|a| a.occupied[l as usize] > 0).count() as u64;
        let mut pt = SweepPoint::new(label, Some(c));
        pt.count("violations", audits.iter().map(|a| a.violations).sum());
        pt.freq("violation_free", clean, cfg.replicates);
        pt.freq("fractal_alive", alive, cfg.replicates);
        pt.exact("keep_probability", -(-c).exp_m1());
        for (r, a) in audits.iter().enumerate() {
            let _ = writeln!(csv, "{c},{r},{},{}", a.occupied[l as usize], a.violations);
        }
        points.push(pt);
    }
    Ok((points, vec![Table { name: "replicates".into(), csv }], Vec::new()))
}

fn monotone_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let mut cs = cfg.sweep.as_ref().expect("resolved").values.clone();
    cs.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut csv = String::from("c1,c2,replicate,occupied1,violations\n");
    for w in cs.windows(2) {
        let (c1, c2) = (w[0], w[1]);
        let audits =
            par_replicates(cfg.replicates, |r| MonotoneCoupling::new(lattice, c1, c2, replicate_key(cfg, r), cfg.cap)?.audit(l))?;
        let clean = audits.iter().filter(|a| a.violations == 0).count() as u64;
        let mut pt = SweepPoint::new(format!("c1={c1},c2={c2}"), Some(c1));
        pt.count("violations", audits.iter().map(|a| a.violations).sum());
        pt.freq("violation_free", clean, cfg.replicates);
        for (r, a) in audits.iter().enumerate() {
            let _ = writeln!(csv, "{c1},{c2},{r},{},{}", a.occupied[l as usize], a.violations);
        }
        points.push(pt);
    }
    Ok((points, vec![Table { name: "replicates".into(), csv }], Vec::new()))
}

/// Marks whether the `name` frequency estimates are non-decreasing along the points.
fn monotone_flag(points: &[SweepPoint], name: &str) -> bool {
    let est: Vec<f64> = points.iter().filter_map(|p| p.frequencies.get(name).map(|f| f.estimate)).collect();
    est.windows(2).all(|w| w[0] <= w[1])
}

fn crossing_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let axis = cfg.options.axis.expect("resolved");
    let sweep = cfg.sweep.as_ref().expect("resolved");
    let mut pts: Vec<(String, f64, f64)> = sweep_points(cfg)
        .into_iter()
        .map(|(label, v)| (label, v, if sweep.axis == SweepAxis::C { -(-v).exp_m1() } else { v }))
        .collect();
    pts.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut points = Vec::new();
    let mut csv = String::from("p,replicate,occupied,crossed,largest_component\n");
    for (label, v, p) in pts {
        let reps = par_replicates(cfg.replicates, |r| {
            let run = fractal_run(&lattice, p, l, replicate_key(cfg, r), cfg.cap)?;
            let last = &run[l as usize];
            let rep = crossing(&lattice, &last.occupied, cfg.adjacency, axis)?;
            Ok((last.occupied.len() as u64, rep))
        })?;
        let crossed = reps.iter().filter(|(_, c)| c.crossed).count() as u64;
        let alive = reps.iter().filter(|(n, _)| *n > 0).count() as u64;
        let mut pt = SweepPoint::new(label, Some(v));
        pt.freq("crossed", crossed, cfg.replicates);
        pt.freq("alive", alive, cfg.replicates);
        pt.exact("p", p);
        for (r, (n, c)) in reps.iter().enumerate() {
            let _ = writeln!(csv, "{p},{r},{n},{},{}", c.crossed as u8, c.largest_component);
        }
        points.push(pt);
    }
    let mono = monotone_flag(&points, "crossed");
    let notes = vec![format!(
        "crossing estimates {} in p; replicates share keys across p",
        if mono { "non-decreasing" } else { "NOT monotone" }
    )];
    if let Some(first) = points.first_mut() {
        first.count("sweep_monotone", mono as u64);
    }
    Ok((points, vec![Table { name: "replicates".into(), csv }], notes))
}

fn td_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let o = &cfg.options;
    let (base, horizon, tracked) = (o.base_level.unwrap(), o.horizon.unwrap(), o.tracked_cap.unwrap());
    let mut points = Vec::new();
    let mut csv = String::from("point,replicate,groups,found,separation_level,inconclusive,max_tracked\n");
    for (label, v, m) in mu_points(cfg) {
        let reps = par_replicates(cfg.replicates, |r| {
            let sim = GridSim::new(&m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?;
            td_certify_streaming(&sim, base, horizon, tracked)
        })?;
        let surviving: Vec<_> = reps.iter().filter(|t| t.groups > 0).collect();
        let found = surviving.iter().filter(|t| t.found).count() as u64;
        let mut pt = SweepPoint::new(label.clone(), v);
        pt.freq("found_given_surviving", found, surviving.len() as u64);
        pt.freq("surviving", surviving.len() as u64, cfg.replicates);
        pt.count("inconclusive", reps.iter().filter(|t| t.inconclusive).count() as u64);
        pt.count("prefix_order_violations", reps.iter().map(|t| t.prefix_order_violations).sum());
        pt.count("pairs_checked", reps.iter().map(|t| t.pairs_checked).sum());
        let sep: Welford = surviving.iter().filter_map(|t| t.separation_level).map(|n| n as f64).collect();
        pt.mean("separation_level", &sep);
        pt.exact("horizon", horizon as f64);
        for (r, t) in reps.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{label},{r},{},{},{},{},{}",
                t.groups,
                t.found as u8,
                t.separation_level.map(|n| n.to_string()).unwrap_or_default(),
                t.inconclusive as u8,
                t.max_tracked
            );
        }
        points.push(pt);
    }
    let notes = vec![
        "surviving: at least one occupied cell at the base level".to_string(),
        format!("runs whose tracked set exceeds {tracked} cells are inconclusive and count as not found"),
    ];
    Ok((points, vec![Table { name: "replicates".into(), csv }], notes))
}

fn gamma_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let o = &cfg.options;
    let steps = levels(cfg);
    let k_max = o.drift_k_max.unwrap();
    let mut points = Vec::new();
    let mut drift_csv = String::from("ell,k,transitions,mean_next,std_err,within_bound\n");
    let mut csv = String::from("ell,replicate,absorbed,steps_taken,max_m\n");
    for &ell in o.ells.as_ref().unwrap() {
        let gc = GammaConfig {
            dim: m.dim,
            base: m.base,
            offspring: m.offspring.clone(),
            ell,
            steps,
            cap: cfg.cap,
            allow_supercritical: o.allow_supercritical.unwrap(),
            audit_fraction: 0.01,
        };
        gc.validate()?;
        let traces = par_replicates(cfg.replicates, |r| gamma_process(&gc, replicate_key(cfg, r).with(ell as u64)))?;
        let absorbed = traces.iter().filter(|t| t.absorbed).count() as u64;
        let mut pt = SweepPoint::new(format!("ell={ell}"), Some(ell as f64));
        pt.freq("absorbed", absorbed, cfg.replicates);
        pt.exact("pair_factor", gc.pair_factor());
        pt.exact("side_factor", gc.side_factor());
        pt.count("pairs_sampled", traces.iter().map(|t| t.pairs_sampled).sum());
        pt.count("unsound_pairs", traces.iter().map(|t| t.unsound_pairs).sum());
        let rows = drift_table(&traces, k_max);
        pt.count("drift_rows", rows.len() as u64);
        pt.count("drift_rows_within_bound", rows.iter().filter(|r| r.within_bound).count() as u64);
        for row in &rows {
            let _ = writeln!(
                drift_csv,
                "{ell},{},{},{},{},{}",
                row.k, row.transitions, row.mean_next, row.std_err, row.within_bound as u8
            );
            if row.transitions >= 2 {
                pt.means.insert(
                    format!("next_given_k={:02}", row.k),
                    MeanEstimate {
                        mean: row.mean_next,
                        std_err: row.std_err,
                        lo: row.mean_next - Z95 * row.std_err,
                        hi: row.mean_next + Z95 * row.std_err,
                        samples: row.transitions,
                    },
                );
            }
        }
        for (r, t) in traces.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{ell},{r},{},{},{}",
                t.absorbed as u8,
                t.m_values.len() - 1,
                t.m_values.iter().max().unwrap()
            );
        }
        points.push(pt);
    }
    let notes = vec![
        "drift rows need two or more transitions from k; a single transition has no standard error and is accepted"
            .to_string(),
    ];
    Ok((points, vec![Table { name: "drift".into(), csv: drift_csv }, Table { name: "replicates".into(), csv }], notes))
}

fn spine_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let o = &cfg.options;
    let length = levels(cfg);
    let ms = o.event_generations.clone().unwrap();
    let chain = spine_run(m, length, StreamKey::root(cfg.seed).tag(Tag::Spine))?;
    // batch means over 100 batches
    let batches = 100usize;
    let per = (chain.len() / batches).max(1);
    let bm: Welford = chain.chunks(per).map(|c| c.iter().map(|s| s.excess as f64).sum::<f64>() / c.len() as f64).collect();
    let overall = chain.iter().map(|s| s.excess as f64).sum::<f64>() / chain.len() as f64;
    let alone = chain.iter().filter(|s| s.alone).count() as u64;
    let mut long = SweepPoint::new("long-run", None);
    if let Some(mut est) = MeanEstimate::from_welford(&bm) {
        est.mean = overall;
        est.lo = overall - Z95 * est.std_err;
        est.hi = overall + Z95 * est.std_err;
        long.means.insert("excess".into(), est);
    }
    long.freq("alone", alone, chain.len() as u64);
    let mu = m.mu();
    let p = m.thin_p();
    let size_biased_mean = (m.offspring.variance() + mu * mu) / mu;
    if mu * p < 1.0 {
        long.exact("excess_stationary_mean", (size_biased_mean - 1.0) * p / (1.0 - mu * p));
    }
    let closed = spine_event_closed_form(&m.offspring, p)?;
    let mut points = vec![long];
    let events = spine_event_frequency(m, &ms, cfg.replicates, StreamKey::root(cfg.seed).with(1))?;
    let mut csv = String::from("generation,alone,events\n");
    for e in events {
        let mut pt = SweepPoint::new(format!("m={}", e.generation), Some(e.generation as f64));
        pt.exact("closed_form", closed);
        match e.frequency {
            Some(f) => {
                let _ = writeln!(csv, "{},{},{}", e.generation, f.trials, f.successes);
                pt.frequencies.insert("event_given_alone".into(), f);
            }
            None => {
                let _ = writeln!(csv, "{},0,0", e.generation);
                pt.count("alone", 0);
            }
        }
        points.push(pt);
    }
    let mut chain_csv = String::from("generation,excess,spine_digit,unanimous\n");
    for s in chain.iter().take(10_000) {
        let _ = writeln!(
            chain_csv,
            "{},{},{},{}",
            s.generation,
            s.excess,
            s.spine_digit.map(|d| d.to_string()).unwrap_or_default(),
            s.unanimous as u8
        );
    }
    let notes = vec![format!("long-run interval from {batches} batch means; chain table truncated to 10000 rows")];
    Ok((points, vec![Table { name: "events".into(), csv }, Table { name: "chain".into(), csv: chain_csv }], notes))
}

fn sbm_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let o = &cfg.options;
    let mu = m.offspring.mean();
    let dim = m.dim;
    let gens = levels(cfg);
    let free_mu = o.free_mu.unwrap();
    let n_qk = o.qk_samples.unwrap();
    // Q_k marginals: family size from Geometric(mu), one uniformly placed point
    let geo = OffspringLaw::geometric(mu).sampler();
    let qk_key = StreamKey::root(cfg.seed).tag(Tag::Sbm).with(0);
    let marg = par_replicates(n_qk, |r| {
        let mut rng = qk_key.with(r).rng();
        let k = geo.sample(&mut rng).max(1) as usize;
        Ok(sample_qk(&mut rng, k, mu, dim)?.points.swap_remove(0))
    })?;
    let sd = (mu - 1.0).sqrt();
    let mut qk_pt = SweepPoint::new("qk-marginal", Some(mu));
    for i in 0..dim as usize {
        let xs: Vec<f64> = marg.iter().map(|p| p[i]).collect();
        let t = ks_one_sample(&xs, |x| normal_cdf(x, 0.0, sd));
        qk_pt.p_value(&format!("ks_coord{i}"), t.p_value);
        let w: Welford = xs.iter().copied().collect();
        qk_pt.mean(&format!("coord{i}"), &w);
    }
    qk_pt.exact("variance_target", mu - 1.0);
    qk_pt.count("samples", n_qk);
    // free-mode runs: one uniform last-generation particle per replicate
    let runs = par_replicates(cfg.replicates, |r| {
        let key = replicate_key(cfg, r);
        let run = strm_free_run(free_mu, dim, gens, key, cfg.cap)?;
        let last = &run[gens as usize].positions;
        let j = key.tag(Tag::Sample).rng().random_range(0..last.len());
        let mut hist = Vec::<u64>::new();
        for g in &run {
            for &k in &g.offspring {
                if hist.len() <= k as usize {
                    hist.resize(k as usize + 1, 0);
                }
                hist[k as usize] += 1;
            }
        }
        Ok((last[j].clone(), hist, last.len() as u64))
    })?;
    let mut gen_pt = SweepPoint::new(format!("generation={gens}"), Some(free_mu));
    for i in 0..dim as usize {
        let xs: Vec<f64> = runs.iter().map(|(p, _, _)| p[i]).collect();
        let t = ks_one_sample(&xs, |x| normal_cdf(x, 0.0, 1.0));
        gen_pt.p_value(&format!("ks_coord{i}"), t.p_value);
        let w: Welford = xs.iter().copied().collect();
        gen_pt.mean(&format!("coord{i}"), &w);
    }
    gen_pt.exact("variance_exact", 1.0 - free_mu.powi(-(gens as i32)));
    let pop: Welford = runs.iter().map(|r| r.2 as f64).collect();
    gen_pt.mean("population", &pop);
    let mut hist = Vec::<u64>::new();
    for (_, h, _) in &runs {
        if hist.len() < h.len() {
            hist.resize(h.len(), 0);
        }
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    let check = validate_offspring_histogram(&hist, free_mu)?;
    let mut off_pt = SweepPoint::new("offspring", Some(free_mu));
    off_pt.p_value("chi_square", check.test.p_value);
    off_pt.exact("chi_square_statistic", check.test.statistic);
    off_pt.exact("dof", check.test.dof);
    off_pt.count("samples", check.samples as u64);
    let mut notes = Vec::new();
    if let Some(w) = check.warning {
        notes.push(w);
    }
    let mut csv = String::from("replicate");
    for i in 0..dim {
        let _ = write!(csv, ",x{i}");
    }
    csv.push_str(",population\n");
    for (r, (p, _, n)) in runs.iter().enumerate() {
        let _ = write!(csv, "{r}");
        for x in p {
            let _ = write!(csv, ",{x}");
        }
        let _ = writeln!(csv, ",{n}");
    }
    let mut hist_csv = String::from("k,count,expected\n");
    let total: u64 = hist.iter().sum();
    let geo_free = OffspringLaw::geometric(free_mu);
    for (k, c) in hist.iter().enumerate() {
        let _ = writeln!(hist_csv, "{k},{c},{}", geo_free.pmf(k as u64) * total as f64);
    }
    Ok((
        vec![qk_pt, gen_pt, off_pt],
        vec![Table { name: "replicates".into(), csv }, Table { name: "offspring".into(), csv: hist_csv }],
        notes,
    ))
}

/// Occupancy profiles of runs that reach the last level.
fn surviving_profiles(cfg: &ExperimentConfig) -> Result<(Vec<Vec<u64>>, u64)> {
    let m = model(cfg);
    let l = levels(cfg);
    let profiles = par_replicates(cfg.replicates, |r| {
        GridSim::new(m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?.occupancy_profile(l)
    })?;
    let n = profiles.len() as u64;
    Ok((profiles.into_iter().filter(|p| p.occupied[l as usize] > 0).map(|p| p.occupied).collect(), n))
}

fn slope_of_log_means(rows: &[&Vec<u64>], lo: u32, hi: u32, ln_b: f64) -> f64 {
    let xs: Vec<f64> = (lo..=hi).map(|m| m as f64 * ln_b).collect();
    let ys: Vec<f64> = (lo..=hi)
        .map(|m| (rows.iter().map(|r| r[m as usize] as f64).sum::<f64>() / rows.len() as f64).ln())
        .collect();
    linear_regression(&xs, &ys).slope
}

fn growth_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let (lo, hi) = cfg.options.fit_levels.unwrap();
    let (rows, total) = surviving_profiles(cfg)?;
    let ln_b = (m.base as f64).ln();
    let mut pt = SweepPoint::new("fit", None);
    pt.freq("surviving", rows.len() as u64, total);
    pt.exact("target_slope", (2.0 / m.beta()).min(m.dim as f64));
    let curve = pgf_curve(&m.offspring, m.thin_p(), l as usize)?;
    let xs: Vec<f64> = (lo..=hi).map(|k| k as f64 * ln_b).collect();
    let exact_ys: Vec<f64> = (lo..=hi)
        .map(|k| k as f64 * m.dim as f64 * ln_b + curve.survival[k as usize].ln())
        .collect();
    pt.exact("unconditional_exact_slope", linear_regression(&xs, &exact_ys).slope);
    if rows.len() >= 2 {
        let all: Vec<&Vec<u64>> = rows.iter().collect();
        let full = slope_of_log_means(&all, lo, hi, ln_b);
        // delete-one jackknife
        let n = rows.len();
        let leave: Vec<f64> = (0..n)
            .map(|i| {
                let sub: Vec<&Vec<u64>> = rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r).collect();
                slope_of_log_means(&sub, lo, hi, ln_b)
            })
            .collect();
        let lm = leave.iter().sum::<f64>() / n as f64;
        let se = ((n as f64 - 1.0) / n as f64 * leave.iter().map(|s| (s - lm).powi(2)).sum::<f64>()).sqrt();
        pt.means.insert(
            "slope".into(),
            MeanEstimate { mean: full, std_err: se, lo: full - Z95 * se, hi: full + Z95 * se, samples: n as u64 },
        );
    }
    let mut points = vec![pt];
    let mut csv = String::from("level,mean_occupied,mean_h_statistic\n");
    for k in 0..=l {
        let occ: Welford = rows.iter().map(|r| r[k as usize] as f64).collect();
        let h: Welford = rows.iter().map(|r| support_stats_from_count(&lattice, k, r[k as usize]).h_statistic).collect();
        let mut p = SweepPoint::new(format!("m={k}"), Some(k as f64));
        p.mean("occupied", &occ);
        p.mean("h_statistic", &h);
        p.exact("occupied_exact_unconditional", (m.base as f64).powi((m.dim * k) as i32) * curve.survival[k as usize]);
        let _ = writeln!(csv, "{k},{},{}", occ.mean, h.mean);
        points.push(p);
    }
    let notes = vec![format!("fit of ln mean occupied against m ln B over m = {lo}..={hi}; jackknife standard error")];
    Ok((points, vec![Table { name: "levels".into(), csv }], notes))
}

fn h_statistic_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let m = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(m)?;
    let (lo, hi) = cfg.options.fit_levels.unwrap();
    let (rows, total) = surviving_profiles(cfg)?;
    let xs: Vec<f64> = (lo..=hi).map(|k| k as f64).collect();
    let series: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (lo..=hi).map(|k| support_stats_from_count(&lattice, k, r[k as usize]).h_statistic).collect())
        .collect();
    let mut pt = SweepPoint::new("trend", None);
    pt.freq("surviving", rows.len() as u64, total);
    if series.len() >= 2 {
        let t = trend_test(&xs, &series);
        pt.p_value("positive_trend", t.p_positive);
        pt.means.insert(
            "slope".into(),
            MeanEstimate {
                mean: t.mean_slope,
                std_err: t.slope_se,
                lo: t.mean_slope - Z95 * t.slope_se,
                hi: t.mean_slope + Z95 * t.slope_se,
                samples: t.series as u64,
            },
        );
    }
    let mut points = vec![pt];
    let mut csv = String::from("replicate");
    for k in lo..=hi {
        let _ = write!(csv, ",h{k}");
    }
    csv.push('\n');
    for (r, s) in series.iter().enumerate() {
        let _ = write!(csv, "{r}");
        for v in s {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    for k in 0..=l {
        let h: Welford = rows.iter().map(|r| support_stats_from_count(&lattice, k, r[k as usize]).h_statistic).collect();
        let mut p = SweepPoint::new(format!("m={k}"), Some(k as f64));
        p.mean("h_statistic", &h);
        points.push(p);
    }
    Ok((points, vec![Table { name: "replicates".into(), csv }], vec!["one-sided t-test on per-run slopes".into()]))
}

fn ball_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let l = levels(cfg);
    let o = &cfg.options;
    let (y, r) = (o.ball_center.clone().unwrap(), o.ball_radius.unwrap());
    let mut points = Vec::new();
    let mut csv = String::from("point,replicate,hit\n");
    for (label, v, m) in mu_points(cfg) {
        let hits = par_replicates(cfg.replicates, |rep| {
            let sim = GridSim::new(&m, replicate_key(cfg, rep), cfg.cap, StepPath::Auto)?;
            ball_hit(&sim, &y, r, l)
        })?;
        let s = hits.iter().filter(|&&h| h).count() as u64;
        let mut pt = SweepPoint::new(label.clone(), v);
        pt.freq("hit", s, cfg.replicates);
        pt.exact("radius", r);
        for (rep, h) in hits.iter().enumerate() {
            let _ = writeln!(csv, "{label},{rep},{}", *h as u8);
        }
        points.push(pt);
    }
    Ok((points, vec![Table { name: "replicates".into(), csv }], vec![format!("ball hit at level {l}")]))
}

fn gw_tables_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let horizon = levels(cfg) as usize;
    let mut points = Vec::new();
    let mut tables = Vec::new();
    let mut notes = Vec::new();
    for (label, v, m) in mu_points(cfg) {
        let curve = pgf_curve(&m.offspring, m.thin_p(), horizon)?;
        let mut pt = SweepPoint::new(label.clone(), v);
        pt.exact("q", curve.q);
        pt.exact("thinned_mean", curve.thinned_mean());
        pt.exact("survival_1", curve.survival.get(1).copied().unwrap_or(f64::NAN));
        pt.exact("survival_at_horizon", curve.survival[horizon]);
        pt.exact("hitting_at_horizon", curve.hitting[horizon]);
        pt.count("underflow", curve.underflow as u64);
        if horizon >= 100 {
            let rep = asymptotic_report(&curve)?;
            pt.exact("m_survival_at_horizon", rep.m_survival_at_horizon);
            pt.exact("m_hitting_at_horizon", rep.m_hitting_at_horizon);
            pt.exact("thinned_variance", rep.thinned_variance);
            pt.exact("ln_thinned_mean", rep.ln_thinned_mean);
            if let Some(k) = rep.kolmogorov_constant_est {
                pt.exact("kolmogorov_constant_est", k);
            }
            if let Some(k) = rep.exact_constant {
                pt.exact("exact_constant", k);
            }
            if let Some(k) = rep.displayed_constant {
                pt.exact("displayed_constant", k);
            }
            if let Some(k) = rep.decay_rate_est {
                pt.exact("decay_rate_est", k);
            }
            if let Some(k) = rep.survival_constant_est {
                pt.exact("survival_constant_est", k);
            }
            if let Some(k) = rep.hitting_ratio_est {
                pt.exact("hitting_ratio_est", k);
            }
            pt.count("critical", (rep.regime == CurveRegime::Critical) as u64);
            if !rep.note.is_empty() {
                notes.push(format!("{label}: {}", rep.note));
            }
        }
        let name = if v.is_some() { format!("curve_{label}").replace('=', "_") } else { "curve".to_string() };
        tables.push(Table { name, csv: curve.to_csv() });
        points.push(pt);
    }
    Ok((points, tables, notes))
}

fn beta_suite(cfg: &ExperimentConfig) -> SuiteResult {
    let base = model(cfg);
    let l = levels(cfg);
    let lattice = Lattice::of(base)?;
    let axis = cfg.options.axis.unwrap();
    let sweep = cfg.sweep.as_ref().unwrap();
    let b = base.base as f64;
    let d = base.dim as f64;
    let mut pts: Vec<(String, f64, f64)> = sweep_points(cfg)
        .into_iter()
        .map(|(label, v)| {
            let beta = if sweep.axis == SweepAxis::Beta { v } else { 2.0 * b.ln() / v.ln() };
            (label, v, beta)
        })
        .collect();
    pts.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut points = Vec::new();
    let mut csv = String::from("beta,replicate,occupied,crossed\n");
    for (label, v, beta) in pts {
        let mu = b.powf(2.0 / beta);
        let m = with_poisson_mean(base, mu);
        m.validate()?;
        let reps = par_replicates(cfg.replicates, |r| {
            let run = GridSim::new(&m, replicate_key(cfg, r), cfg.cap, StepPath::Auto)?.run(l)?;
            let keys = run[l as usize].keys();
            Ok((keys.len() as u64, crossing(&lattice, &keys, cfg.adjacency, axis)?.crossed))
        })?;
        let crossed = reps.iter().filter(|x| x.1).count() as u64;
        let alive = reps.iter().filter(|x| x.0 > 0).count() as u64;
        let mut pt = SweepPoint::new(label, Some(v));
        pt.freq("crossed", crossed, cfg.replicates);
        pt.freq("alive", alive, cfg.replicates);
        pt.exact("beta", beta);
        pt.exact("mu", mu);
        for (r, (n, c)) in reps.iter().enumerate() {
            let _ = writeln!(csv, "{beta},{r},{n},{}", *c as u8);
        }
        points.push(pt);
    }
    if let Some(first) = points.first_mut() {
        first.exact("bracket_lo", 2.0 / d);
        first.exact("bracket_hi", 4.0 / (d + 1.0));
    }
    let notes = vec![format!(
        "the critical beta lies in ({}, {}]; crossing should fall from high to low across it",
        2.0 / d,
        4.0 / (d + 1.0)
    )];
    Ok((points, vec![Table { name: "replicates".into(), csv }], notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(exp: Experiment, reps: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(exp);
        c.replicates = reps;
        c.seed = 7;
        c.threads = Some(2);
        c
    }

    #[test]
    fn names_roundtrip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!(matches!("nope".parse::<Experiment>(), Err(Error::UnknownExperiment(_))));
    }

    #[test]
    fn zero_replicates_is_empty() {
        let out = run_experiment(&quick(Experiment::Survival, 0)).unwrap();
        assert!(out.summary.points.is_empty());
    }

    #[test]
    fn gw_tables_first_row() {
        let mut c = quick(Experiment::GwExactTables, 0);
        c.levels = Some(10);
        let out = run_experiment(&c).unwrap();
        let s1 = out.summary.points[0].exact["survival_1"];
        assert!((s1 - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(out.tables[0].csv.lines().nth(2).unwrap().starts_with("1,"));
    }

    #[test]
    fn coupling_has_no_violations() {
        let mut c = quick(Experiment::CouplingContainment, 100);
        c.levels = Some(8);
        let out = run_experiment(&c).unwrap();
        for p in &out.summary.points {
            assert_eq!(p.counts["violations"], 0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = quick(Experiment::TdCertify, 1);
        c.options.horizon = Some(1);
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
        let mut c = quick(Experiment::CrossingSweep, 1);
        c.sweep = Some(Sweep { axis: SweepAxis::P, values: vec![1.5] });
        assert!(c.resolve().is_err());
        let mut c = quick(Experiment::Spine, 1);
        c.sweep = Some(Sweep { axis: SweepAxis::P, values: vec![0.5] });
        assert!(c.resolve().is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment":"spine","bogus":1}"#).is_err());
    }

    #[test]
    fn hash_ignores_threads_and_paths() {
        let a = quick(Experiment::Hitting, 5).resolve().unwrap();
        let mut b = a.clone();
        b.threads = Some(9);
        b.out_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn thread_count_does_not_change_summary() {
        let mut c = quick(Experiment::CrossingSweep, 30);
        c.levels = Some(5);
        let a = run_experiment(&c).unwrap();
        c.threads = Some(1);
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.summary.digest(), b.summary.digest());
    }

    #[test]
    fn writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick(Experiment::Survival, 20);
        c.levels = Some(4);
        let out = run_experiment(&c).unwrap();
        write_outputs(&out, dir.path()).unwrap();
        for f in ["summary.json", "manifest.json", "timing.json", "replicates.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        let again = run_experiment(&ExperimentConfig { threads: Some(1), ..manifest.config }).unwrap();
        assert_eq!(again.summary, out.summary);
    }
}
