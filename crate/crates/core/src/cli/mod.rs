//! Experiment runner behind the `massdrift` binary.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    schema_json, ContrastConfig, ExperimentConfig, ExperimentKind, Expectations, FiberConfig,
    InvarianceConfig, LawConfig, ModelConfig, OutputConfig, ScheduleConfig, WindowConfig,
};
pub use report::{emit_report, fmt_f64, write_csv, Summary, Table, Verdict};

use crate::fibers::{
    backforth_identity, martingale_cauchy, phi_direct, phi_formula, small_models, FiberError, FiberWord,
    FiniteFiberModel, FiniteGroup,
};
use crate::kernel::{
    back_and_forth, cesaro, check_invariant_set, evolve, even_return_curve, verify_reversibility, Driver,
    InvarianceVerdict, KernelError, MarkovModel, SetMeasure, SnapshotSchedule, MASS_ACCOUNTING_TOL,
};
use crate::measures::{window_mass, GeneratorId, Observable, StateId, StateSet, StepLaw};
use crate::models::{
    boole_orbit, build_cyclic_model, build_funnel_chain, build_lattice_model, lattice_state, simple_walk,
    ModelError,
};
use crate::montecarlo::{compare_volumes, run_ensemble, ChartKind, MonteCarloError, RetentionCurve};

/// Tolerance of exact-arithmetic checks unless the config overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;
/// Boole drift bounds must stay below this unless overridden.
pub const DRIFT_TOLERANCE: f64 = 1e-6;
/// Slack allowed when checking that a return curve does not increase.
pub const MONOTONE_SLACK: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error at {pointer:?}: {message}")]
    Config { pointer: String, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("experiment failed: {0}")]
    Run(String),
}

impl CliError {
    fn config(pointer: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        1
    }
}

macro_rules! run_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.to_string())
            }
        }
    )*};
}
run_err!(KernelError, ModelError, FiberError, MonteCarloError);

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: Summary,
    pub tables: Vec<Table>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    /// 0 when every verdict passed, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        if self.summary.passed() {
            0
        } else {
            2
        }
    }
}

struct Results {
    tables: Vec<Table>,
    verdicts: Vec<Verdict>,
    residuals: BTreeMap<String, f64>,
    /// The series that `expect` bounds refer to.
    main_series: Vec<f64>,
}

impl Results {
    fn new() -> Self {
        Self {
            tables: Vec::new(),
            verdicts: Vec::new(),
            residuals: BTreeMap::new(),
            main_series: Vec::new(),
        }
    }

    fn check_at_most(&mut self, check: &str, value: f64, tolerance: f64) {
        self.residuals.insert(check.into(), value);
        self.verdicts.push(Verdict::at_most(check, value, tolerance));
    }
}

/// Runs one experiment and writes its artifacts when an output dir is set.
pub fn run(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let stem = config
        .output
        .as_ref()
        .and_then(|o| o.name.clone())
        .unwrap_or_else(|| config.experiment.name().to_string());
    let mut results = Results::new();
    match config.experiment {
        ExperimentKind::Evolve | ExperimentKind::Cesaro | ExperimentKind::Backforth => {
            run_series(config, &stem, &mut results)?
        }
        ExperimentKind::Invariance => run_invariance(config, &stem, &mut results)?,
        ExperimentKind::FiberVerify => run_fibers(config, &stem, &mut results)?,
        ExperimentKind::Funnel => run_funnel(config, &stem, &mut results)?,
        ExperimentKind::Boole => run_boole(config, &stem, &mut results)?,
        ExperimentKind::Sl2 | ExperimentKind::Schottky => run_chart(config, &stem, &mut results)?,
        ExperimentKind::Contrast => run_contrast(config, &stem, &mut results)?,
    }
    if let (Some(expect), false) = (&config.expect, config.experiment == ExperimentKind::Contrast) {
        apply_expectations(expect, &mut results);
    }
    let summary = Summary {
        experiment: config.experiment.name().to_string(),
        params_hash: config.params_hash(),
        verdicts: results.verdicts,
        max_residuals: results.residuals,
    };
    let files = match &config.output {
        Some(out) => emit_report(std::path::Path::new(&out.dir), &results.tables, &summary)?,
        None => Vec::new(),
    };
    Ok(Outcome {
        summary,
        tables: results.tables,
        files,
    })
}

fn apply_expectations(expect: &Expectations, results: &mut Results) {
    if let Some(bound) = expect.final_at_most {
        let last = results.main_series.last().copied().unwrap_or(f64::NAN);
        results.verdicts.push(Verdict::at_most("expect-final-at-most", last, bound));
    }
    if let Some(bound) = expect.always_at_least {
        let low = results.main_series.iter().copied().fold(f64::INFINITY, f64::min);
        results.verdicts.push(Verdict::at_least("expect-always-at-least", low, bound));
    }
}

fn tolerance(config: &ExperimentConfig, default: f64) -> f64 {
    config.tolerance.unwrap_or(default)
}

struct BuiltModel {
    model: MarkovModel,
    law: Option<StepLaw>,
    dimension: usize,
    lattice: bool,
}

impl BuiltModel {
    fn driver(&self) -> Driver<'_> {
        match &self.law {
            Some(mu) => Driver::Law(mu),
            None => Driver::Chain,
        }
    }

    fn state(&self, coords: &[i64], at: &str) -> Result<StateId, CliError> {
        if coords.len() != self.dimension {
            return Err(CliError::config(at, format!("expected {} coordinates", self.dimension)));
        }
        let x = if self.lattice {
            lattice_state(coords)
        } else if coords[0] >= 0 {
            StateId(coords[0] as u64)
        } else {
            return Err(CliError::config(at, "negative state index"));
        };
        if self.model.contains(x) {
            Ok(x)
        } else {
            Err(CliError::config(at, "point outside the model"))
        }
    }

    fn window(&self, w: &WindowConfig, at: &str) -> Result<StateSet, CliError> {
        if w.lo.len() != self.dimension || w.hi.len() != self.dimension {
            return Err(CliError::config(at, format!("expected {} coordinates", self.dimension)));
        }
        let mut points: Vec<Vec<i64>> = vec![vec![]];
        for k in 0..self.dimension {
            points = points
                .into_iter()
                .flat_map(|p| {
                    (w.lo[k]..=w.hi[k]).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        q
                    })
                })
                .collect();
        }
        Ok(points
            .iter()
            .filter_map(|p| {
                if self.lattice {
                    Some(lattice_state(p))
                } else {
                    (p[0] >= 0).then(|| StateId(p[0] as u64))
                }
            })
            .filter(|&x| self.model.contains(x))
            .collect())
    }
}

fn build_model(config: &ExperimentConfig) -> Result<BuiltModel, CliError> {
    let model_cfg = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::config("/model", "this experiment needs a model"))?;
    let model_err = |e: ModelError| CliError::config("/model", e.to_string());
    let (model, dimension, lattice) = match model_cfg {
        ModelConfig::Lattice { dimension, radius } => {
            (build_lattice_model(*dimension, *radius).map_err(model_err)?, *dimension, true)
        }
        ModelConfig::Cyclic { order, copies } => (build_cyclic_model(*order, *copies).map_err(model_err)?, 1, false),
        ModelConfig::Funnel { .. } => {
            let spec = model_cfg.funnel_spec().expect("funnel");
            (build_funnel_chain(&spec).map_err(model_err)?, 1, false)
        }
    };
    let is_chain = matches!(model_cfg, ModelConfig::Funnel { .. });
    let law_cfg = config.law.clone().unwrap_or(LawConfig::Simple);
    let law = match (&law_cfg, model_cfg) {
        (LawConfig::Chain, _) | (LawConfig::Simple, ModelConfig::Funnel { .. }) => None,
        (LawConfig::Simple, ModelConfig::Lattice { dimension, .. }) => Some(simple_walk(*dimension)),
        (LawConfig::Simple, ModelConfig::Cyclic { .. }) => {
            Some(StepLaw::uniform(model.generators()).map_err(|e| CliError::config("/law", e.to_string()))?)
        }
        (LawConfig::Atoms { atoms }, _) => {
            if is_chain {
                return Err(CliError::config("/law", "chain models are driven by their rows"));
            }
            let resolved = atoms
                .iter()
                .map(|(label, &w)| {
                    model
                        .generator_by_label(label)
                        .map(|g| (g, w))
                        .ok_or_else(|| CliError::config(&format!("/law/atoms/{label}"), "unknown generator label"))
                })
                .collect::<Result<Vec<(GeneratorId, f64)>, _>>()?;
            Some(StepLaw::new(resolved).map_err(|e| CliError::config("/law/atoms", e.to_string()))?)
        }
    };
    if law.is_none() && !is_chain {
        return Err(CliError::config("/law", "action models need a step law"));
    }
    Ok(BuiltModel {
        model,
        law,
        dimension,
        lattice,
    })
}

fn schedule(config: &ExperimentConfig) -> Result<(usize, SnapshotSchedule), CliError> {
    let s = config
        .schedule
        .as_ref()
        .ok_or_else(|| CliError::config("/schedule", "this experiment needs a schedule"))?;
    let sched = match (&s.every, &s.at) {
        (Some(_), Some(_)) => return Err(CliError::config("/schedule", "give either every or at")),
        (Some(k), None) => SnapshotSchedule::Every(*k),
        (None, Some(list)) => SnapshotSchedule::At(list.clone()),
        (None, None) => SnapshotSchedule::Every(1),
    };
    Ok((s.n_steps, sched))
}

fn start_state(config: &ExperimentConfig, built: &BuiltModel) -> Result<StateId, CliError> {
    let origin = vec![0; built.dimension];
    built.state(config.start.as_ref().unwrap_or(&origin), "/start")
}

fn windows(config: &ExperimentConfig, built: &BuiltModel) -> Result<Vec<(String, StateSet)>, CliError> {
    config
        .windows
        .iter()
        .enumerate()
        .map(|(k, w)| Ok((w.display(), built.window(w, &format!("/windows/{k}"))?)))
        .collect()
}

fn run_series(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let built = build_model(config)?;
    let (n_steps, sched) = schedule(config)?;
    let x = start_state(config, &built)?;
    let wins = windows(config, &built)?;
    let points = sched.points(n_steps);
    match config.experiment {
        ExperimentKind::Evolve => {
            let series = evolve(&built.model, x, built.driver(), n_steps, &sched)?;
            let mut table = Table::new(stem, &["n", "window", "mass", "total_mass", "absorbed", "pruned"]);
            for (n, v) in series.snapshots() {
                for (k, (label, set)) in wins.iter().enumerate() {
                    let mass = window_mass(v, set);
                    if k == 0 {
                        results.main_series.push(mass);
                    }
                    table.push(vec![
                        n.to_string(),
                        label.clone(),
                        fmt_f64(mass),
                        fmt_f64(v.total_mass()),
                        fmt_f64(series.cumulative_absorbed(*n)),
                        fmt_f64(series.cumulative_pruned(*n)),
                    ]);
                }
            }
            results.tables.push(table);
            results.check_at_most("mass-accounting", series.mass_accounting_residual(), MASS_ACCOUNTING_TOL);
        }
        ExperimentKind::Cesaro => {
            let series = evolve(&built.model, x, built.driver(), n_steps, &sched)?;
            let mut table = Table::new(stem, &["n", "window", "cesaro_mass"]);
            for &n in points.iter().filter(|&&n| n > 0) {
                let avg = cesaro(&series, n)?;
                for (k, (label, set)) in wins.iter().enumerate() {
                    let mass = window_mass(&avg, set);
                    if k == 0 {
                        results.main_series.push(mass);
                    }
                    table.push(vec![n.to_string(), label.clone(), fmt_f64(mass)]);
                }
            }
            results.tables.push(table);
            results.check_at_most("mass-accounting", series.mass_accounting_residual(), MASS_ACCOUNTING_TOL);
        }
        _ => {
            let entries = back_and_forth(&built.model, x, built.driver(), n_steps)?;
            let mut table = Table::new(stem, &["n", "window", "mass"]);
            for &n in &points {
                for (k, (label, set)) in wins.iter().enumerate() {
                    let mass = window_mass(&entries[n], set);
                    if k == 0 {
                        results.main_series.push(mass);
                    }
                    table.push(vec![n.to_string(), label.clone(), fmt_f64(mass)]);
                }
            }
            results.tables.push(table);
            let last = match entries.len() {
                0 | 1 => 0.0,
                k => entries[k - 1].sup_distance(&entries[k - 2]),
            };
            results.residuals.insert("backforth-last-increment".into(), last);
        }
    }
    Ok(())
}

fn run_invariance(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let built = build_model(config)?;
    let inv = config
        .invariance
        .as_ref()
        .ok_or_else(|| CliError::config("/invariance", "invariance experiments need an invariance section"))?;
    let tol = tolerance(config, DEFAULT_TOLERANCE);
    let states = built.model.states().to_vec();
    let mut sets: Vec<(String, StateSet)> = Vec::new();
    for (k, set) in inv.sets.iter().enumerate() {
        let resolved = set
            .iter()
            .enumerate()
            .map(|(j, p)| built.state(p, &format!("/invariance/sets/{k}/{j}")))
            .collect::<Result<StateSet, _>>()?;
        sets.push((format!("set{k}"), resolved));
    }
    if inv.exhaustive {
        if states.len() > 16 {
            return Err(CliError::config("/invariance/exhaustive", "exhaustive check needs at most 16 states"));
        }
        for mask in 0u32..(1 << states.len()) {
            let set = (0..states.len()).filter(|i| mask >> i & 1 == 1).map(|i| states[i]).collect();
            sets.push((format!("mask{mask:0width$b}", width = states.len()), set));
        }
    }
    let mut table = Table::new(
        stem,
        &["set", "size", "set_measure", "operator_residual", "generator_residual", "verdict"],
    );
    let mut disagreements = 0usize;
    let mut worst_invariant: f64 = 0.0;
    for (label, set) in &sets {
        let report = check_invariant_set(&built.model, set, built.driver(), tol)?;
        let generator_max = report.generator_residuals.iter().map(|(_, r)| *r).fold(0.0, f64::max);
        if report.verdict != InvarianceVerdict::InconclusiveAtTruncation
            && report.operator_says_invariant() != report.generators_say_invariant()
        {
            disagreements += 1;
        }
        if report.verdict == InvarianceVerdict::Invariant {
            worst_invariant = worst_invariant.max(report.operator_residual.max(generator_max));
        }
        table.push(vec![
            label.clone(),
            set.len().to_string(),
            match report.set_measure {
                SetMeasure::Finite(m) => fmt_f64(m),
                SetMeasure::Infinite => "inf".into(),
            },
            fmt_f64(report.operator_residual),
            fmt_f64(generator_max),
            serde_json::to_value(report.verdict).expect("verdict").as_str().unwrap_or("").into(),
        ]);
    }
    results.tables.push(table);
    results.check_at_most("operator-generator-disagreements", disagreements as f64, 0.0);
    results.residuals.insert("invariant-sets-max-residual".into(), worst_invariant);
    Ok(())
}

fn group_by_name(name: &str) -> Option<FiniteGroup> {
    match name {
        "Z1" => Some(FiniteGroup::cyclic(1)),
        "Z2" => Some(FiniteGroup::cyclic(2)),
        "Z3" => Some(FiniteGroup::cyclic(3)),
        "Z4" => Some(FiniteGroup::cyclic(4)),
        "V4" => Some(FiniteGroup::klein4()),
        _ => None,
    }
}

/// Every word in `{0..order}^n`, lexicographic.
fn all_words(order: u32, n: usize) -> Vec<Vec<u32>> {
    let mut words = vec![vec![]];
    for _ in 0..n {
        words = words
            .into_iter()
            .flat_map(|w| {
                (0..order).map(move |g| {
                    let mut v = w.clone();
                    v.push(g);
                    v
                })
            })
            .collect();
    }
    words
}

struct FiberTotals {
    phi: f64,
    identity: f64,
    contraction: f64,
}

fn fiber_model_checks(
    m: &FiniteFiberModel,
    f: &Observable,
    n_max: usize,
    identity_n_max: usize,
    mut rows: Option<&mut Table>,
) -> Result<FiberTotals, CliError> {
    let mut totals = FiberTotals {
        phi: 0.0,
        identity: 0.0,
        contraction: 0.0,
    };
    let sup = f.sup_norm();
    for n in 0..=n_max {
        for letters in all_words(m.group().order() as u32, n) {
            let word = FiberWord::new(m, letters)?;
            for x in 0..m.points() as u64 {
                let formula = phi_formula(m, n, &word, StateId(x), f)?;
                let direct = phi_direct(m, n, &word, StateId(x), f)?;
                let residual = (formula - direct).abs();
                totals.phi = totals.phi.max(residual);
                totals.contraction = totals.contraction.max(formula.abs() - sup);
                if let Some(table) = rows.as_deref_mut() {
                    let label: Vec<String> = word.letters().iter().map(|b| b.to_string()).collect();
                    table.push(vec![
                        n.to_string(),
                        label.join("-"),
                        x.to_string(),
                        fmt_f64(formula),
                        fmt_f64(direct),
                        fmt_f64(residual),
                    ]);
                }
            }
        }
    }
    for n in 0..=identity_n_max {
        for x in 0..m.points() as u64 {
            totals.identity = totals.identity.max(backforth_identity(m, n, StateId(x), f)?.residual());
        }
    }
    Ok(totals)
}

fn run_fibers(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let fc = config
        .fiber
        .as_ref()
        .ok_or_else(|| CliError::config("/fiber", "fiber-verify needs a fiber section"))?;
    let tol = tolerance(config, DEFAULT_TOLERANCE);
    let mut totals = FiberTotals {
        phi: 0.0,
        identity: 0.0,
        contraction: f64::NEG_INFINITY,
    };
    let mut merge = |t: FiberTotals| {
        totals.phi = totals.phi.max(t.phi);
        totals.identity = totals.identity.max(t.identity);
        totals.contraction = totals.contraction.max(t.contraction);
    };
    if fc.catalog {
        let values = fc.observable.clone().unwrap_or_else(|| vec![0.7, -1.3, 2.1, 0.4]);
        let mut table = Table::new(
            stem,
            &["model", "group", "points", "law", "phi_residual", "identity_residual"],
        );
        for (k, m) in small_models(4).iter().enumerate() {
            let f = Observable::new((0..m.points()).map(|x| (StateId(x as u64), values[x % values.len()])))
                .map_err(|e| CliError::config("/fiber/observable", e.to_string()))?;
            let t = fiber_model_checks(m, &f, fc.n_max, fc.identity_n_max, None)?;
            let law: Vec<String> = m.law().atoms().iter().map(|(g, w)| format!("{}:{}", g.id(), w)).collect();
            table.push(vec![
                k.to_string(),
                m.group().name().to_string(),
                m.points().to_string(),
                law.join(" "),
                fmt_f64(t.phi),
                fmt_f64(t.identity),
            ]);
            merge(t);
        }
        results.tables.push(table);
    } else {
        let group = group_by_name(&fc.group)
            .ok_or_else(|| CliError::config("/fiber/group", format!("unknown group {:?}", fc.group)))?;
        let mu = match &fc.law {
            None => StepLaw::uniform(&(0..group.order() as u32).map(|g| group.generator(g)).collect::<Vec<_>>()),
            Some(atoms) => {
                let mut resolved = Vec::new();
                for (label, &w) in atoms {
                    let g: u32 = label
                        .parse()
                        .ok()
                        .filter(|&g: &u32| (g as usize) < group.order())
                        .ok_or_else(|| CliError::config(&format!("/fiber/law/{label}"), "not a group element"))?;
                    resolved.push((group.generator(g), w));
                }
                StepLaw::new(resolved)
            }
        }
        .map_err(|e| CliError::config("/fiber/law", e.to_string()))?;
        let m = FiniteFiberModel::regular(group, mu)?;
        let f = match &fc.observable {
            None => Observable::indicator([StateId(0)]),
            Some(values) if values.len() == m.points() => {
                Observable::new(values.iter().enumerate().map(|(x, &v)| (StateId(x as u64), v)))
                    .map_err(|e| CliError::config("/fiber/observable", e.to_string()))?
            }
            Some(_) => return Err(CliError::config("/fiber/observable", "one value per point")),
        };
        let mut table = Table::new(stem, &["n", "word", "x", "formula", "direct", "residual"]);
        let t = fiber_model_checks(&m, &f, fc.n_max, fc.identity_n_max, Some(&mut table))?;
        merge(t);
        results.tables.push(table);
        let cauchy = martingale_cauchy(&m, &f, fc.n_max.max(1))?;
        results.main_series = cauchy.increments.clone();
        results
            .residuals
            .insert("martingale-last-increment".into(), *cauchy.increments.last().unwrap_or(&0.0));
    }
    results.check_at_most("phi-formula-vs-direct", totals.phi, tol);
    results.check_at_most("backforth-identity", totals.identity, tol);
    results.check_at_most("phi-sup-norm-excess", totals.contraction.max(0.0), tol);
    Ok(())
}

/// Largest increase between consecutive values.
pub fn max_increase(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn run_funnel(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let built = build_model(config)?;
    if !matches!(config.model, Some(ModelConfig::Funnel { .. })) {
        return Err(CliError::config("/model/kind", "funnel experiments need a funnel model"));
    }
    let (n_steps, sched) = schedule(config)?;
    let x = start_state(config, &built)?;
    let wins = windows(config, &built)?;
    let series = evolve(&built.model, x, built.driver(), n_steps, &sched)?;
    let mut table = Table::new(stem, &["n", "quantity", "value"]);
    for (n, v) in series.snapshots() {
        for (k, (label, set)) in wins.iter().enumerate() {
            let mass = window_mass(v, set);
            if k == 0 {
                results.main_series.push(mass);
            }
            table.push(vec![n.to_string(), format!("window {label}"), fmt_f64(mass)]);
        }
    }
    let curve = even_return_curve(&built.model, x, built.driver(), n_steps)?;
    for (n, r) in curve.iter().enumerate() {
        table.push(vec![n.to_string(), "return at 2n".into(), fmt_f64(*r)]);
    }
    results.tables.push(table);
    let rev = verify_reversibility(&built.model, built.driver())?;
    results.check_at_most("detailed-balance", rev.max_residual, crate::kernel::DETAILED_BALANCE_TOL);
    results.check_at_most("even-return-increase", max_increase(&curve), MONOTONE_SLACK);
    results.check_at_most("mass-accounting", series.mass_accounting_residual(), MASS_ACCOUNTING_TOL);
    Ok(())
}

fn run_boole(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let spec = config
        .boole
        .as_ref()
        .ok_or_else(|| CliError::config("/boole", "boole experiments need a boole section"))?;
    let report = boole_orbit(spec).map_err(|e| match e {
        ModelError::SpecInvalid(m) => CliError::config("/boole", m),
        other => CliError::Run(other.to_string()),
    })?;
    let mut table = Table::new(stem, &["start", "n", "occupation_fraction"]);
    let mut revisits = Table::new(
        format!("{stem}_revisits"),
        &["start", "revisit_count", "revisits_after_1000", "last_revisit", "drift_bound"],
    );
    for orbit in &report.orbits {
        for (n, frac) in &orbit.occupation {
            table.push(vec![fmt_f64(orbit.start), n.to_string(), fmt_f64(*frac)]);
        }
        revisits.push(vec![
            fmt_f64(orbit.start),
            orbit.revisits.len().to_string(),
            orbit.revisits.iter().filter(|&&n| n > 1000).count().to_string(),
            orbit.revisits.last().map_or(String::new(), |n| n.to_string()),
            fmt_f64(orbit.drift_bound),
        ]);
    }
    if let Some(first) = report.orbits.first() {
        results.main_series = first
            .occupation
            .iter()
            .filter_map(|(n, _)| report.mean_occupation(*n))
            .collect();
    }
    results.tables.push(table);
    results.tables.push(revisits);
    results.check_at_most("drift-bound", report.max_drift_bound(), tolerance(config, DRIFT_TOLERANCE));
    Ok(())
}

fn curve_table(stem: &str, curve: &RetentionCurve) -> Table {
    let mut table = Table::new(
        stem,
        &["n", "threshold", "retained_fraction", "wilson_lo", "wilson_hi", "n_walkers", "seed"],
    );
    for row in &curve.rows {
        table.push(vec![
            row.n.to_string(),
            fmt_f64(row.threshold),
            fmt_f64(row.fraction),
            fmt_f64(row.wilson_lo),
            fmt_f64(row.wilson_hi),
            row.n_walkers.to_string(),
            curve.seed.to_string(),
        ]);
    }
    table
}

fn first_threshold_series(curve: &RetentionCurve) -> Vec<f64> {
    match curve.rows.first() {
        Some(first) => curve.at_threshold(first.threshold).map(|r| r.fraction).collect(),
        None => Vec::new(),
    }
}

fn run_chart(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let spec = config
        .ensemble
        .as_ref()
        .ok_or_else(|| CliError::config("/ensemble", "this experiment needs an ensemble section"))?;
    let wanted = match config.experiment {
        ExperimentKind::Sl2 => ChartKind::Sl2Lattice,
        _ => ChartKind::Schottky,
    };
    if spec.chart != wanted {
        return Err(CliError::config("/ensemble/chart", format!("expected {}", wanted.name())));
    }
    let curve = run_ensemble(spec).map_err(|e| ensemble_error(e, "/ensemble"))?;
    results.main_series = first_threshold_series(&curve);
    results.tables.push(curve_table(stem, &curve));
    Ok(())
}

fn ensemble_error(e: MonteCarloError, at: &str) -> CliError {
    match e {
        MonteCarloError::InvalidSpec(m) => CliError::config(at, m),
        MonteCarloError::UnknownGenerator(label) => {
            CliError::config(&format!("{at}/law/{label}"), "unknown generator label")
        }
        other => CliError::Run(other.to_string()),
    }
}

fn run_contrast(config: &ExperimentConfig, stem: &str, results: &mut Results) -> Result<(), CliError> {
    let c = config
        .contrast
        .as_ref()
        .ok_or_else(|| CliError::config("/contrast", "contrast experiments need a contrast section"))?;
    let report = compare_volumes(&c.finite, &c.infinite).map_err(|e| ensemble_error(e, "/contrast"))?;
    results.tables.push(curve_table(&format!("{stem}_finite"), &report.finite));
    results.tables.push(curve_table(&format!("{stem}_infinite"), &report.infinite));
    let mut gaps = Table::new(
        stem,
        &["n", "threshold_index", "finite_threshold", "infinite_threshold", "gap"],
    );
    for g in &report.gaps {
        gaps.push(vec![
            g.n.to_string(),
            g.threshold_index.to_string(),
            fmt_f64(g.finite_threshold),
            fmt_f64(g.infinite_threshold),
            fmt_f64(g.gap),
        ]);
    }
    results.tables.push(gaps);
    // expectations: finite retention stays high, infinite retention decays
    if let Some(expect) = &config.expect {
        if let Some(bound) = expect.always_at_least {
            let low = first_threshold_series(&report.finite).into_iter().fold(f64::INFINITY, f64::min);
            results.verdicts.push(Verdict::at_least("finite-retention-floor", low, bound));
        }
        if let Some(bound) = expect.final_at_most {
            let last = first_threshold_series(&report.infinite).last().copied().unwrap_or(f64::NAN);
            results.verdicts.push(Verdict::at_most("infinite-final-retention", last, bound));
        }
    }
    Ok(())
}

/// Which built-in verification suites to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Fibers,
    Invariance,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fibers" => Ok(Suite::Fibers),
            "invariance" => Ok(Suite::Invariance),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite {other:?} (fibers, invariance, all)")),
        }
    }
}

/// Fibers: formula vs enumeration and the back-and-forth identity over the
/// small-model catalog, plus the martingale increments on ℤ/3.
/// Invariance: operator and generator verdicts on every subset of two
/// 12-state models, and no invariant subset of a degenerate funnel chain.
pub fn verify(suite: Suite) -> Result<Summary, CliError> {
    let mut verdicts = Vec::new();
    let mut residuals = BTreeMap::new();
    let mut record = |check: &str, value: f64, tol: f64| {
        residuals.insert(check.to_string(), value);
        verdicts.push(Verdict::at_most(check, value, tol));
    };
    if matches!(suite, Suite::Fibers | Suite::All) {
        let values = [0.7, -1.3, 2.1, 0.4];
        let (mut phi, mut identity) = (0.0f64, 0.0f64);
        for m in small_models(4) {
            let f = Observable::new((0..m.points()).map(|x| (StateId(x as u64), values[x])))
                .map_err(|e| CliError::Run(e.to_string()))?;
            let t = fiber_model_checks(&m, &f, 3, 5, None)?;
            phi = phi.max(t.phi);
            identity = identity.max(t.identity);
        }
        record("phi-formula-vs-direct", phi, DEFAULT_TOLERANCE);
        record("backforth-identity", identity, DEFAULT_TOLERANCE);
        let g = FiniteGroup::cyclic(3);
        let mu = StepLaw::new(vec![(g.generator(0), 0.5), (g.generator(1), 0.5)])
            .map_err(|e| CliError::Run(e.to_string()))?;
        let m = FiniteFiberModel::regular(g, mu)?;
        let cauchy = martingale_cauchy(&m, &Observable::indicator([StateId(0)]), 41)?;
        record("martingale-increment-at-40", cauchy.increments[40], 1e-6);
    }
    if matches!(suite, Suite::Invariance | Suite::All) {
        let law = crate::models::translation_law(12, &[(0, 0.2), (1, 0.5), (2, 0.3)])?;
        let mut disagreements = 0usize;
        for (order, copies) in [(3u32, 4u32), (12, 1)] {
            let model = build_cyclic_model(order, copies)?;
            let law = crate::models::translation_law(
                order,
                &law.atoms().iter().map(|(g, w)| (g.id() % order, *w)).collect::<Vec<_>>(),
            )?;
            for mask in 0u32..(1 << 12) {
                let set: StateSet = (0..12u64).filter(|i| mask >> i & 1 == 1).map(StateId).collect();
                let r = check_invariant_set(&model, &set, &law, DEFAULT_TOLERANCE)?;
                if r.operator_says_invariant() != r.generators_say_invariant() {
                    disagreements += 1;
                }
            }
        }
        record("operator-generator-disagreements", disagreements as f64, 0.0);
        let spec = crate::models::FunnelChainSpec {
            prefix: vec![1.0, 0.5, 0.25],
            tail: crate::models::TailRule::Constant(0.0),
            step_scale: 0.25,
            truncation_size: 11,
        };
        let funnel = build_funnel_chain(&spec)?;
        let n = funnel.len();
        let mut invariant = 0usize;
        for mask in 1u32..(1 << n) - 1 {
            let set: StateSet = (0..n as u64).filter(|i| mask >> i & 1 == 1).map(StateId).collect();
            if check_invariant_set(&funnel, &set, Driver::Chain, 1e-14)?.verdict == InvarianceVerdict::Invariant {
                invariant += 1;
            }
        }
        record("funnel-invariant-proper-subsets", invariant as f64, 0.0);
    }
    Ok(Summary {
        experiment: "verify".into(),
        params_hash: String::new(),
        verdicts,
        max_residuals: residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn evolve_row_at_eight() {
        let out = run(&config(
            r#"{"experiment": "evolve",
                "model": {"kind": "lattice", "dimension": 1, "radius": 20},
                "law": {"kind": "simple"},
                "schedule": {"n_steps": 8, "every": 4},
                "windows": [{"lo": [0], "hi": [0]}]}"#,
        ))
        .unwrap();
        let rows = &out.tables[0].rows;
        assert_eq!(rows.last().unwrap()[..3], ["8", "{0}", "0.2734375"]);
        assert_eq!(out.exit_code(), 0);
    }

    #[test]
    fn fiber_verify_on_two_element_group() {
        let out = run(&config(r#"{"experiment": "fiber-verify", "fiber": {"group": "Z2"}}"#)).unwrap();
        assert_eq!(out.exit_code(), 0);
        assert!(out.summary.max_residuals["phi-formula-vs-direct"] < 1e-12);
    }

    #[test]
    fn failed_expectation_exits_two() {
        let out = run(&config(
            r#"{"experiment": "evolve",
                "model": {"kind": "lattice", "dimension": 1, "radius": 20},
                "schedule": {"n_steps": 4},
                "windows": [{"lo": [-1], "hi": [1]}],
                "expect": {"final_at_most": 0.01}}"#,
        ))
        .unwrap();
        assert_eq!(out.exit_code(), 2);
    }

    #[test]
    fn semantic_errors_carry_pointers() {
        let err = run(&config(r#"{"experiment": "evolve", "schedule": {"n_steps": 3}}"#)).unwrap_err();
        assert_eq!(err, CliError::config("/model", "this experiment needs a model"));
        let err = run(&config(
            r#"{"experiment": "evolve",
                "model": {"kind": "lattice", "dimension": 1, "radius": 5},
                "law": {"kind": "atoms", "atoms": {"up": 1.0}},
                "schedule": {"n_steps": 3}}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, CliError::Config { pointer, .. } if pointer == "/law/atoms/up"));
    }

    #[test]
    fn overflow_is_a_run_error() {
        let err = run(&config(
            r#"{"experiment": "evolve",
                "model": {"kind": "lattice", "dimension": 1, "radius": 3},
                "schedule": {"n_steps": 20}}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, CliError::Run(_)));
    }

    #[test]
    fn monotone_check() {
        assert_eq!(max_increase(&[1.0, 0.5, 0.5, 0.2]), 0.0);
        assert_eq!(max_increase(&[1.0, 0.5, 0.75]), 0.25);
    }
}
