//! Seeded walker ensembles on the homogeneous charts.
//!
//! Walker `i` draws from ChaCha8 seeded by
//! `splitmix64(master_seed ^ splitmix64(i))`, expanded to 32 bytes by four
//! further SplitMix64 outputs. Uniforms are `(next_u64 >> 11) · 2⁻⁵³`.
//! Walkers only depend on their global index, so an ensemble split by
//! `walker_offset` and merged gives the same counts as one run.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SnapshotSchedule;
use crate::measures::{GeneratorId, MeasureError, StepLaw};
use crate::models::{
    default_schottky_generators, rotation, sl2_step, spectral_radius, Mat2, ModelError, SchottkyChart,
    SchottkyLetter, SchottkyPoint, Sl2LatticePoint,
};

/// Two-sided 95% normal quantile.
pub const WILSON_Z: f64 = 1.959963984540054;
/// Default starting frame: rotation by this angle.
pub const DEFAULT_START_ANGLE: f64 = 0.37;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonteCarloError {
    #[error("invalid ensemble: {0}")]
    InvalidSpec(String),
    #[error("unknown generator label {0:?}")]
    UnknownGenerator(String),
    #[error("walk is bounded: {0}")]
    BoundednessViolation(String),
    #[error("ensembles cannot be compared: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ChartKind {
    /// Unimodular lattices, proxy = shortest vector (retained if ≥ t).
    Sl2Lattice,
    /// Schottky quotient, proxy = distance from the core proxy (retained if ≤ t).
    Schottky,
    /// ℤ^d, proxy = sup-norm (retained if ≤ t); admits exact evolution.
    IntegerLattice,
}

impl ChartKind {
    pub fn default_thresholds(self) -> Vec<f64> {
        match self {
            ChartKind::Sl2Lattice => vec![0.05, 0.1, 0.2],
            ChartKind::Schottky => vec![2.0, 5.0, 10.0],
            ChartKind::IntegerLattice => vec![2.0, 5.0, 10.0],
        }
    }

    fn retained(self, proxy: f64, threshold: f64) -> bool {
        match self {
            ChartKind::Sl2Lattice => proxy >= threshold,
            ChartKind::Schottky | ChartKind::IntegerLattice => proxy <= threshold,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChartKind::Sl2Lattice => "sl2-lattice",
            ChartKind::Schottky => "schottky",
            ChartKind::IntegerLattice => "integer-lattice",
        }
    }
}

/// Row-major generator matrices `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMatrices {
    pub a: [f64; 4],
    pub b: [f64; 4],
}

impl GeneratorMatrices {
    fn to_mats(&self) -> (Mat2, Mat2) {
        let m = |v: &[f64; 4]| Mat2::new(v[0], v[1], v[2], v[3]);
        (m(&self.a), m(&self.b))
    }
}

impl Default for GeneratorMatrices {
    fn default() -> Self {
        let (a, b) = default_schottky_generators();
        let row = |m: Mat2| [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]];
        Self { a: row(a), b: row(b) }
    }
}

fn default_start_angle() -> f64 {
    DEFAULT_START_ANGLE
}

fn default_dimension() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub chart: ChartKind,
    /// Weights by generator label: `a`, `a^-1`, `b`, `b^-1` on the SL(2,ℝ)
    /// charts, `+e0`, `-e0`, … on the integer lattice. Empty = uniform.
    #[serde(default)]
    pub law: BTreeMap<String, f64>,
    pub n_walkers: u64,
    pub n_steps: usize,
    pub master_seed: u64,
    pub schedule: SnapshotSchedule,
    /// Defaults per chart when omitted.
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default)]
    pub generators: Option<GeneratorMatrices>,
    /// Starting frame is the rotation by this angle (SL(2,ℝ) charts).
    #[serde(default = "default_start_angle")]
    pub start_angle: f64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Global index of this run's first walker.
    #[serde(default)]
    pub walker_offset: u64,
}

impl EnsembleSpec {
    pub fn new(chart: ChartKind, n_walkers: u64, n_steps: usize, master_seed: u64) -> Self {
        Self {
            chart,
            law: BTreeMap::new(),
            n_walkers,
            n_steps,
            master_seed,
            schedule: SnapshotSchedule::Every(1),
            thresholds: None,
            generators: None,
            start_angle: DEFAULT_START_ANGLE,
            dimension: 1,
            walker_offset: 0,
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.thresholds
            .clone()
            .unwrap_or_else(|| self.chart.default_thresholds())
    }

    pub fn labels(&self) -> Vec<String> {
        match self.chart {
            ChartKind::Sl2Lattice | ChartKind::Schottky => {
                ["a", "a^-1", "b", "b^-1"].iter().map(|s| s.to_string()).collect()
            }
            ChartKind::IntegerLattice => (0..self.dimension)
                .flat_map(|k| [format!("+e{k}"), format!("-e{k}")])
                .collect(),
        }
    }

    /// The step law over chart generators; generator ids follow
    /// [`EnsembleSpec::labels`], and `id ^ 1` is the inverse.
    pub fn step_law(&self) -> Result<StepLaw, MonteCarloError> {
        let labels = self.labels();
        let gen = |k: usize| GeneratorId::new(k as u32, k as u32 ^ 1);
        if self.law.is_empty() {
            let all: Vec<_> = (0..labels.len()).map(gen).collect();
            return Ok(StepLaw::uniform(&all)?);
        }
        let atoms = self
            .law
            .iter()
            .map(|(label, &w)| {
                labels
                    .iter()
                    .position(|l| l == label)
                    .map(|k| (gen(k), w))
                    .ok_or_else(|| MonteCarloError::UnknownGenerator(label.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StepLaw::new(atoms)?)
    }

    fn validate(&self) -> Result<(), MonteCarloError> {
        if self.n_walkers == 0 {
            return Err(MonteCarloError::InvalidSpec("n_walkers must be at least 1".into()));
        }
        if self.chart == ChartKind::IntegerLattice && !(1..=3).contains(&self.dimension) {
            return Err(MonteCarloError::InvalidSpec(format!("dimension {}", self.dimension)));
        }
        if self.thresholds().iter().any(|t| !t.is_finite()) {
            return Err(MonteCarloError::InvalidSpec("non-finite threshold".into()));
        }
        Ok(())
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The random stream of walker `index`.
pub fn walker_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut state = splitmix64(master_seed ^ splitmix64(index));
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Wilson score interval at 95%.
pub fn wilson_interval(retained: u64, total: u64) -> (f64, f64) {
    let n = total as f64;
    let p = retained as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).clamp(0.0, 1.0).min(p), (centre + half).clamp(0.0, 1.0).max(p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionRow {
    pub n: usize,
    pub threshold: f64,
    pub retained: u64,
    pub n_walkers: u64,
    pub fraction: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

impl RetentionRow {
    fn new(n: usize, threshold: f64, retained: u64, n_walkers: u64) -> Self {
        let (wilson_lo, wilson_hi) = wilson_interval(retained, n_walkers);
        Self {
            n,
            threshold,
            retained,
            n_walkers,
            fraction: retained as f64 / n_walkers as f64,
            wilson_lo,
            wilson_hi,
        }
    }
}

/// Retained fractions per `(n, threshold)`, rows ordered by `n` then
/// threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionCurve {
    pub chart: ChartKind,
    pub seed: u64,
    pub rows: Vec<RetentionRow>,
}

impl RetentionCurve {
    pub fn fraction(&self, n: usize, threshold: f64) -> Option<f64> {
        self.row(n, threshold).map(|r| r.fraction)
    }

    pub fn row(&self, n: usize, threshold: f64) -> Option<&RetentionRow> {
        self.rows.iter().find(|r| r.n == n && r.threshold == threshold)
    }

    /// Rows at one threshold, in step order.
    pub fn at_threshold(&self, threshold: f64) -> impl Iterator<Item = &RetentionRow> {
        self.rows.iter().filter(move |r| r.threshold == threshold)
    }

    /// Pools two runs over disjoint walkers.
    pub fn merge(&self, other: &RetentionCurve) -> Result<RetentionCurve, MonteCarloError> {
        let same_grid = self.chart == other.chart
            && self.seed == other.seed
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.n == b.n && a.threshold == b.threshold);
        if !same_grid {
            return Err(MonteCarloError::SpecMismatch("curves are on different grids".into()));
        }
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| RetentionRow::new(a.n, a.threshold, a.retained + b.retained, a.n_walkers + b.n_walkers))
            .collect();
        Ok(RetentionCurve {
            chart: self.chart,
            seed: self.seed,
            rows,
        })
    }
}

enum Walker {
    Lattice(Sl2LatticePoint),
    Schottky(SchottkyPoint),
    Integer(Vec<i64>),
}

struct Prepared {
    chart: ChartKind,
    cumulative: Vec<(f64, u32)>,
    matrices: [Mat2; 4],
    schottky: Option<SchottkyChart>,
    start: Mat2,
    dimension: usize,
}

impl Prepared {
    fn new(spec: &EnsembleSpec) -> Result<Self, MonteCarloError> {
        spec.validate()?;
        let law = spec.step_law()?;
        let mut acc = 0.0;
        let cumulative = law
            .atoms()
            .iter()
            .map(|&(g, w)| {
                acc += w;
                (acc, g.id())
            })
            .collect();
        let (a, b) = spec.generators.clone().unwrap_or_default().to_mats();
        let inv = |m: &Mat2| Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]);
        let matrices = [a, inv(&a), b, inv(&b)];
        let schottky = match spec.chart {
            ChartKind::Schottky => Some(SchottkyChart::new(a, b)?),
            _ => None,
        };
        if spec.chart != ChartKind::IntegerLattice {
            let unbounded = law
                .atoms()
                .iter()
                .any(|(g, _)| spectral_radius(&matrices[g.id() as usize]) > 1.0 + 1e-9);
            if !unbounded {
                return Err(MonteCarloError::BoundednessViolation(
                    "every generator in the support has spectral radius 1; the walk stays in a compact subgroup \
                     and the experiment is refused"
                        .into(),
                ));
            }
        }
        Ok(Self {
            chart: spec.chart,
            cumulative,
            matrices,
            schottky,
            start: rotation(spec.start_angle),
            dimension: spec.dimension,
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let u = uniform(rng);
        self.cumulative
            .iter()
            .find(|(c, _)| u < *c)
            .unwrap_or_else(|| self.cumulative.last().expect("nonempty law"))
            .1
    }

    fn start(&self) -> Result<Walker, MonteCarloError> {
        Ok(match self.chart {
            ChartKind::Sl2Lattice => Walker::Lattice(Sl2LatticePoint::new(self.start)?),
            // the quotient point of hΛ is Λh⁻¹
            ChartKind::Schottky => Walker::Schottky(
                self.schottky
                    .as_ref()
                    .expect("schottky chart")
                    .point(self.start.transpose())?,
            ),
            ChartKind::IntegerLattice => Walker::Integer(vec![0; self.dimension]),
        })
    }

    fn step(&self, walker: &mut Walker, g: u32) -> Result<(), MonteCarloError> {
        match walker {
            Walker::Lattice(p) => *p = sl2_step(p, &self.matrices[g as usize])?,
            Walker::Schottky(p) => {
                // g_n⋯g_1hΛ corresponds to Λh⁻¹g_1⁻¹⋯g_n⁻¹
                let letter = SchottkyLetter::from_index(g as usize).expect("letter").inverse();
                *p = self.schottky.as_ref().expect("schottky chart").schottky_step(p, letter)?;
            }
            Walker::Integer(x) => x[(g / 2) as usize] += if g.is_multiple_of(2) { 1 } else { -1 },
        }
        Ok(())
    }

    fn proxy(&self, walker: &Walker) -> f64 {
        match walker {
            Walker::Lattice(p) => p.shortest_len(),
            Walker::Schottky(p) => p.core_distance(),
            Walker::Integer(x) => x.iter().map(|c| c.abs()).max().unwrap_or(0) as f64,
        }
    }

    fn run_walker(&self, seed: u64, index: u64, n_steps: usize, points: &[usize]) -> Result<Vec<f64>, MonteCarloError> {
        let mut rng = walker_rng(seed, index);
        let mut walker = self.start()?;
        let mut out = Vec::with_capacity(points.len());
        let mut next = points.iter().peekable();
        for n in 0..=n_steps {
            if n > 0 {
                let g = self.sample(&mut rng);
                self.step(&mut walker, g)?;
            }
            if next.peek() == Some(&&n) {
                out.push(self.proxy(&walker));
                next.next();
            }
        }
        Ok(out)
    }
}

fn thread_pool() -> Option<rayon::ThreadPool> {
    let threads = std::env::var("MASSDRIFT_THREADS").ok()?.parse::<usize>().ok()?;
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().ok()
}

/// Simulates the ensemble and counts retained walkers per snapshot and
/// threshold. Parallel over walkers; results merged in walker order.
pub fn run_ensemble(spec: &EnsembleSpec) -> Result<RetentionCurve, MonteCarloError> {
    let prepared = Prepared::new(spec)?;
    let points = spec.schedule.points(spec.n_steps);
    let thresholds = spec.thresholds();
    let simulate = || {
        (0..spec.n_walkers)
            .into_par_iter()
            .map(|i| prepared.run_walker(spec.master_seed, spec.walker_offset + i, spec.n_steps, &points))
            .collect::<Result<Vec<_>, _>>()
    };
    let proxies = match thread_pool() {
        Some(pool) => pool.install(simulate),
        None => simulate(),
    }?;
    let mut rows = Vec::with_capacity(points.len() * thresholds.len());
    for (k, &n) in points.iter().enumerate() {
        for &t in &thresholds {
            let retained = proxies.iter().filter(|p| spec.chart.retained(p[k], t)).count() as u64;
            rows.push(RetentionRow::new(n, t, retained, spec.n_walkers));
        }
    }
    Ok(RetentionCurve {
        chart: spec.chart,
        seed: spec.master_seed,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub n: usize,
    pub threshold_index: usize,
    pub finite_threshold: f64,
    pub infinite_threshold: f64,
    /// Finite-volume retention minus infinite-volume retention.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastReport {
    pub finite: RetentionCurve,
    pub infinite: RetentionCurve,
    pub gaps: Vec<GapRow>,
}

/// Runs both ensembles; they must share the law, seed, walkers and schedule.
pub fn compare_volumes(
    spec_finite: &EnsembleSpec,
    spec_infinite: &EnsembleSpec,
) -> Result<ContrastReport, MonteCarloError> {
    let matched = spec_finite.law == spec_infinite.law
        && spec_finite.master_seed == spec_infinite.master_seed
        && spec_finite.n_walkers == spec_infinite.n_walkers
        && spec_finite.n_steps == spec_infinite.n_steps
        && spec_finite.schedule == spec_infinite.schedule
        && spec_finite.thresholds().len() == spec_infinite.thresholds().len();
    if !matched {
        return Err(MonteCarloError::SpecMismatch(
            "law, seed, walker count, steps, schedule and threshold count must agree".into(),
        ));
    }
    let finite = run_ensemble(spec_finite)?;
    let infinite = run_ensemble(spec_infinite)?;
    let per_n = spec_finite.thresholds().len();
    let gaps = finite
        .rows
        .iter()
        .zip(&infinite.rows)
        .enumerate()
        .map(|(k, (f, i))| GapRow {
            n: f.n,
            threshold_index: k % per_n,
            finite_threshold: f.threshold,
            infinite_threshold: i.threshold,
            gap: f.fraction - i.fraction,
        })
        .collect();
    Ok(ContrastReport {
        finite,
        infinite,
        gaps,
    })
}
