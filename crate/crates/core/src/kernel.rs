//! Exact evolution of distributions on countable (truncated) models.
//!
//! A [`MarkovModel`] is either a generator action on an enumerated state set
//! (driven by a [`StepLaw`]) or an explicit transition kernel (driven by
//! [`Driver::Chain`]). Every operation compiles the model into a dense CSR
//! operator and steps a dense mass vector; results are returned as sparse
//! [`StateVector`]s. Evolution is sequential with a fixed scatter order, so
//! identical inputs give bit-identical outputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{
    invert_law, is_symmetric, ActionOracle, GeneratorId, MeasureError, ReferenceWeights,
    StateId, StateSet, StateVector, StepLaw, PRUNE_THRESHOLD,
};

/// Row sums must equal one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Detailed-balance tolerance for reversible models.
pub const DETAILED_BALANCE_TOL: f64 = 1e-10;
/// Absorbed mass at or above this aborts an absorb-and-flag evolution.
pub const OVERFLOW_MASS: f64 = 1e-6;
/// Mass accounting must close within this tolerance.
pub const MASS_ACCOUNTING_TOL: f64 = 1e-9;
/// Symmetry tolerance used when a symmetric law is required.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("state {0} is not part of the model")]
    UnknownState(StateId),
    #[error("state {0} is listed twice")]
    DuplicateState(StateId),
    #[error("reference measure does not cover state {0}")]
    MissingReference(StateId),
    #[error("row of state {state} sums to {sum}")]
    RowNotStochastic { state: StateId, sum: f64 },
    #[error("transition probability {prob} out of state {state} is invalid")]
    InvalidProbability { state: StateId, prob: f64 },
    #[error("detailed balance fails with residual {residual:e}")]
    ReversibilityViolated { residual: f64 },
    #[error("reference measure is not invariant under generator {generator} at state {state}")]
    ReferenceNotInvariant { generator: u32, state: StateId },
    #[error("generator {generator} is not inverted by {inverse} at state {state}")]
    ActionNotInvertible {
        generator: u32,
        inverse: u32,
        state: StateId,
    },
    #[error("generator {0} is not part of the model")]
    LawIncompatible(u32),
    #[error("an action model needs a step law")]
    LawRequired,
    #[error("a kernel-row model is driven by its own rows, not by a step law")]
    LawNotApplicable,
    #[error("mass {absorbed:e} reached the truncation boundary by step {step}")]
    TruncationOverflow { step: usize, absorbed: f64 },
    #[error("operation requires a symmetric law or a reversible chain")]
    SymmetryRequired,
    #[error("{0}")]
    InvalidArgument(String),
}

/// What happens to mass that would leave the enumerated states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Move it to a sink, report it, and abort once it reaches
    /// [`OVERFLOW_MASS`].
    AbsorbAndFlag,
    /// Keep it in place (self-loop).
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    pub policy: BoundaryPolicy,
    pub label: String,
}

impl Truncation {
    pub fn new(policy: BoundaryPolicy, label: impl Into<String>) -> Self {
        Self {
            policy,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Dynamics {
    Action {
        generators: Vec<GeneratorId>,
        labels: Vec<String>,
        // targets[generator][state]; None = leaves the truncation
        targets: Vec<Vec<Option<u32>>>,
    },
    Rows {
        rows: Vec<Vec<(u32, f64)>>,
    },
}

/// How a model is driven: by a step law through its action, or by its own
/// transition rows.
#[derive(Debug, Clone, Copy)]
pub enum Driver<'a> {
    Law(&'a StepLaw),
    Chain,
}

impl<'a> From<&'a StepLaw> for Driver<'a> {
    fn from(mu: &'a StepLaw) -> Self {
        Driver::Law(mu)
    }
}

/// A state space with a transition structure and a reference measure λ.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    states: Arc<Vec<StateId>>,
    index: HashMap<StateId, u32>,
    dynamics: Dynamics,
    reference: ReferenceWeights,
    lambda: Vec<f64>,
    boundary: Vec<bool>,
    truncation: Truncation,
    reversible_claim: bool,
}

fn index_states(states: &[StateId]) -> Result<HashMap<StateId, u32>, KernelError> {
    let mut index = HashMap::with_capacity(states.len());
    for (i, &x) in states.iter().enumerate() {
        if index.insert(x, i as u32).is_some() {
            return Err(KernelError::DuplicateState(x));
        }
    }
    Ok(index)
}

fn dense_reference(states: &[StateId], reference: &ReferenceWeights) -> Result<Vec<f64>, KernelError> {
    states
        .iter()
        .map(|&x| reference.weight(x).ok_or(KernelError::MissingReference(x)))
        .collect()
}

impl MarkovModel {
    /// Model given by a generator action. Images outside `states` count as
    /// leaving the truncation. With `reversible_claim`, λ must be invariant
    /// under every generator, which makes every symmetric law reversible.
    pub fn from_action(
        states: Vec<StateId>,
        generators: Vec<(GeneratorId, String)>,
        act: &dyn ActionOracle,
        reference: ReferenceWeights,
        truncation: Truncation,
        reversible_claim: bool,
    ) -> Result<Self, KernelError> {
        let index = index_states(&states)?;
        let lambda = dense_reference(&states, &reference)?;
        let (generators, labels): (Vec<_>, Vec<_>) = generators.into_iter().unzip();
        let targets: Vec<Vec<Option<u32>>> = generators
            .iter()
            .map(|&g| {
                states
                    .iter()
                    .map(|&x| act.act(g, x).and_then(|y| index.get(&y).copied()))
                    .collect()
            })
            .collect();
        let position: HashMap<u32, usize> =
            generators.iter().enumerate().map(|(k, g)| (g.id(), k)).collect();
        for (k, &g) in generators.iter().enumerate() {
            let inverse_row = position.get(&g.inverse_id()).map(|&j| &targets[j]);
            for (i, target) in targets[k].iter().enumerate() {
                let Some(j) = *target else { continue };
                if let Some(inv) = inverse_row {
                    if let Some(back) = inv[j as usize] {
                        if back as usize != i {
                            return Err(KernelError::ActionNotInvertible {
                                generator: g.id(),
                                inverse: g.inverse_id(),
                                state: states[i],
                            });
                        }
                    }
                }
                if reversible_claim
                    && (lambda[i] - lambda[j as usize]).abs() > DETAILED_BALANCE_TOL * lambda[i].max(1.0)
                {
                    return Err(KernelError::ReferenceNotInvariant {
                        generator: g.id(),
                        state: states[i],
                    });
                }
            }
        }
        let boundary = (0..states.len())
            .map(|i| targets.iter().any(|row| row[i].is_none()))
            .collect();
        Ok(Self {
            states: Arc::new(states),
            index,
            dynamics: Dynamics::Action {
                generators,
                labels,
                targets,
            },
            reference,
            lambda,
            boundary,
            truncation,
            reversible_claim,
        })
    }

    /// Model given by explicit transition rows. `boundary_states` are the
    /// states whose rows were modified by the truncation.
    pub fn from_rows(
        states: Vec<StateId>,
        rows: Vec<Vec<(StateId, f64)>>,
        reference: ReferenceWeights,
        truncation: Truncation,
        boundary_states: &[StateId],
        reversible_claim: bool,
    ) -> Result<Self, KernelError> {
        if rows.len() != states.len() {
            return Err(KernelError::InvalidArgument(format!(
                "{} rows for {} states",
                rows.len(),
                states.len()
            )));
        }
        let index = index_states(&states)?;
        let lambda = dense_reference(&states, &reference)?;
        let mut dense_rows = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
            let mut sum = 0.0;
            for (y, p) in row {
                if !(0.0..=1.0 + ROW_SUM_TOL).contains(&p) {
                    return Err(KernelError::InvalidProbability { state: states[i], prob: p });
                }
                let j = *index.get(&y).ok_or(KernelError::UnknownState(y))?;
                sum += p;
                if p > 0.0 {
                    *merged.entry(j).or_insert(0.0) += p;
                }
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(KernelError::RowNotStochastic { state: states[i], sum });
            }
            dense_rows.push(merged.into_iter().collect::<Vec<_>>());
        }
        let mut boundary = vec![false; states.len()];
        for x in boundary_states {
            boundary[*index.get(x).ok_or(KernelError::UnknownState(*x))? as usize] = true;
        }
        let model = Self {
            states: Arc::new(states),
            index,
            dynamics: Dynamics::Rows { rows: dense_rows },
            reference,
            lambda,
            boundary,
            truncation,
            reversible_claim,
        };
        if reversible_claim {
            let residual = model.detailed_balance_residual(&model.compile(Driver::Chain, false)?);
            if residual > DETAILED_BALANCE_TOL {
                return Err(KernelError::ReversibilityViolated { residual });
            }
        }
        Ok(model)
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn contains(&self, x: StateId) -> bool {
        self.index.contains_key(&x)
    }

    pub fn reference(&self) -> &ReferenceWeights {
        &self.reference
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn reversible_claim(&self) -> bool {
        self.reversible_claim
    }

    pub fn is_boundary(&self, x: StateId) -> bool {
        self.index.get(&x).is_some_and(|&i| self.boundary[i as usize])
    }

    /// States none of whose transitions were cut by the truncation.
    pub fn interior_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states
            .iter()
            .zip(&self.boundary)
            .filter(|(_, &b)| !b)
            .map(|(&x, _)| x)
    }

    pub fn generators(&self) -> &[GeneratorId] {
        match &self.dynamics {
            Dynamics::Action { generators, .. } => generators,
            Dynamics::Rows { .. } => &[],
        }
    }

    pub fn generator_label(&self, g: GeneratorId) -> Option<&str> {
        match &self.dynamics {
            Dynamics::Action {
                generators, labels, ..
            } => generators
                .iter()
                .position(|h| h.id() == g.id())
                .map(|k| labels[k].as_str()),
            Dynamics::Rows { .. } => None,
        }
    }

    pub fn generator_by_label(&self, label: &str) -> Option<GeneratorId> {
        match &self.dynamics {
            Dynamics::Action {
                generators, labels, ..
            } => labels.iter().position(|l| l == label).map(|k| generators[k]),
            Dynamics::Rows { .. } => None,
        }
    }

    fn idx(&self, x: StateId) -> Result<usize, KernelError> {
        self.index
            .get(&x)
            .map(|&i| i as usize)
            .ok_or(KernelError::UnknownState(x))
    }

    fn generator_position(&self, id: u32) -> Option<usize> {
        self.generators().iter().position(|g| g.id() == id)
    }

    /// Compiles the one-step operator; `adjoint` gives the operator of the
    /// inverted law (or the λ-adjoint of a kernel-row chain).
    pub(crate) fn compile(&self, driver: Driver<'_>, adjoint: bool) -> Result<Operator, KernelError> {
        let n = self.states.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        let mut leak = vec![0.0; n];
        offsets.push(0);
        match (&self.dynamics, driver) {
            (Dynamics::Action { targets, .. }, Driver::Law(mu)) => {
                let law = if adjoint { invert_law(mu) } else { mu.clone() };
                let atoms: Vec<(usize, f64)> = law
                    .atoms()
                    .iter()
                    .map(|&(g, w)| {
                        self.generator_position(g.id())
                            .map(|k| (k, w))
                            .ok_or(KernelError::LawIncompatible(g.id()))
                    })
                    .collect::<Result<_, _>>()?;
                let mut row: BTreeMap<u32, f64> = BTreeMap::new();
                for i in 0..n {
                    row.clear();
                    for &(k, w) in &atoms {
                        match targets[k][i] {
                            Some(j) => *row.entry(j).or_insert(0.0) += w,
                            None => match self.truncation.policy {
                                BoundaryPolicy::AbsorbAndFlag => leak[i] += w,
                                BoundaryPolicy::Reflect => *row.entry(i as u32).or_insert(0.0) += w,
                            },
                        }
                    }
                    for (&j, &p) in &row {
                        cols.push(j);
                        probs.push(p);
                    }
                    offsets.push(cols.len());
                }
            }
            (Dynamics::Rows { rows }, Driver::Chain) => {
                if adjoint {
                    let mut transposed: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
                    for (i, row) in rows.iter().enumerate() {
                        for &(j, p) in row {
                            let j = j as usize;
                            transposed[j].push((i as u32, self.lambda[i] * p / self.lambda[j]));
                        }
                    }
                    for row in &mut transposed {
                        row.sort_by_key(|&(j, _)| j);
                        for &(j, p) in row.iter() {
                            cols.push(j);
                            probs.push(p);
                        }
                        offsets.push(cols.len());
                    }
                } else {
                    for row in rows {
                        for &(j, p) in row {
                            cols.push(j);
                            probs.push(p);
                        }
                        offsets.push(cols.len());
                    }
                }
            }
            (Dynamics::Action { .. }, Driver::Chain) => return Err(KernelError::LawRequired),
            (Dynamics::Rows { .. }, Driver::Law(_)) => return Err(KernelError::LawNotApplicable),
        }
        Ok(Operator {
            states: Arc::clone(&self.states),
            offsets,
            cols,
            probs,
            leak,
            absorbing: self.truncation.policy == BoundaryPolicy::AbsorbAndFlag,
        })
    }

    fn detailed_balance_residual(&self, op: &Operator) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..op.len() {
            for (j, p) in op.row(i) {
                let back = op.prob(j as usize, i as u32);
                let r = (self.lambda[i] * p - self.lambda[j as usize] * back).abs();
                worst = worst.max(r);
            }
        }
        worst
    }
}

impl ActionOracle for MarkovModel {
    fn act(&self, g: GeneratorId, x: StateId) -> Option<StateId> {
        let Dynamics::Action { targets, .. } = &self.dynamics else {
            return None;
        };
        let k = self.generator_position(g.id())?;
        let i = *self.index.get(&x)?;
        targets[k][i as usize].map(|j| self.states[j as usize])
    }
}

/// Compiled one-step operator in CSR form.
#[derive(Debug, Clone)]
pub(crate) struct Operator {
    states: Arc<Vec<StateId>>,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
    leak: Vec<f64>,
    absorbing: bool,
}

impl Operator {
    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.probs[range].iter().copied())
    }

    #[cfg(test)]
    pub(crate) fn row_for_tests(&self, i: usize) -> Vec<(u32, f64)> {
        self.row(i).collect()
    }

    fn prob(&self, i: usize, j: u32) -> f64 {
        let range = self.offsets[i]..self.offsets[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.probs[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Pushes `cur` forward one step into `next`; returns the mass that left
    /// through the truncation.
    fn push_forward(&self, cur: &[f64], next: &mut [f64]) -> f64 {
        next.fill(0.0);
        let mut leaked = 0.0;
        for (i, &m) in cur.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for k in self.offsets[i]..self.offsets[i + 1] {
                next[self.cols[k] as usize] += m * self.probs[k];
            }
            leaked += m * self.leak[i];
        }
        leaked
    }

    /// Pulls a function back one step: `(Pψ)(x) = Σ_y p(x,y) ψ(y)`.
    fn pull_back(&self, psi: &[f64], i: usize) -> f64 {
        self.row(i).map(|(j, p)| p * psi[j as usize]).sum()
    }

    fn to_state_vector(&self, dense: &[f64], pruned: f64) -> StateVector {
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(i, &m)| (self.states[i], m))
            .collect();
        StateVector::from_map_unchecked(entries, pruned)
    }
}

/// Dense stepping state with mass bookkeeping.
struct Evolver<'a> {
    op: &'a Operator,
    cur: Vec<f64>,
    next: Vec<f64>,
    step: usize,
    absorbed: f64,
    pruned: f64,
}

impl<'a> Evolver<'a> {
    fn from_index(op: &'a Operator, start: usize) -> Self {
        let mut cur = vec![0.0; op.len()];
        cur[start] = 1.0;
        Self::from_dense(op, cur, 0.0, 0.0)
    }

    fn from_dense(op: &'a Operator, cur: Vec<f64>, absorbed: f64, pruned: f64) -> Self {
        let next = vec![0.0; cur.len()];
        Self {
            op,
            cur,
            next,
            step: 0,
            absorbed,
            pruned,
        }
    }

    /// One step; returns (absorbed, pruned) for this step.
    fn advance(&mut self) -> Result<(f64, f64), KernelError> {
        let leaked = self.op.push_forward(&self.cur, &mut self.next);
        std::mem::swap(&mut self.cur, &mut self.next);
        let mut pruned = 0.0;
        for m in self.cur.iter_mut() {
            if *m > 0.0 && *m < PRUNE_THRESHOLD {
                pruned += *m;
                *m = 0.0;
            }
        }
        self.step += 1;
        self.absorbed += leaked;
        self.pruned += pruned;
        if self.op.absorbing && self.absorbed >= OVERFLOW_MASS {
            return Err(KernelError::TruncationOverflow {
                step: self.step,
                absorbed: self.absorbed,
            });
        }
        Ok((leaked, pruned))
    }

    fn snapshot(&self) -> StateVector {
        self.op.to_state_vector(&self.cur, self.pruned)
    }
}

/// Which step indices to keep. Step 0 and the final step are always kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotSchedule {
    /// Every k-th step.
    Every(usize),
    /// An explicit list of steps.
    At(Vec<usize>),
}

impl SnapshotSchedule {
    pub fn points(&self, n_max: usize) -> Vec<usize> {
        let mut points: Vec<usize> = match self {
            SnapshotSchedule::Every(k) if *k > 0 => (0..=n_max).step_by(*k).collect(),
            SnapshotSchedule::Every(_) => vec![0],
            SnapshotSchedule::At(list) => list.iter().copied().filter(|&n| n <= n_max).collect(),
        };
        points.push(0);
        points.push(n_max);
        points.sort_unstable();
        points.dedup();
        points
    }
}

/// The sequence `(μ*ⁿ∗δ_x)` at scheduled steps.
#[derive(Debug, Clone)]
pub struct EvolutionSeries {
    start: StateId,
    start_index: usize,
    law: Option<StepLaw>,
    snapshots: Vec<(usize, StateVector)>,
    pruned_mass_log: Vec<f64>,
    absorbed_mass_log: Vec<f64>,
    operator: Arc<Operator>,
}

impl EvolutionSeries {
    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn law(&self) -> Option<&StepLaw> {
        self.law.as_ref()
    }

    pub fn n_max(&self) -> usize {
        self.pruned_mass_log.len()
    }

    pub fn snapshots(&self) -> &[(usize, StateVector)] {
        &self.snapshots
    }

    pub fn snapshot(&self, n: usize) -> Option<&StateVector> {
        self.snapshots
            .binary_search_by_key(&n, |(k, _)| *k)
            .ok()
            .map(|k| &self.snapshots[k].1)
    }

    /// Mass pruned at each step (entry k is step k+1).
    pub fn pruned_mass_log(&self) -> &[f64] {
        &self.pruned_mass_log
    }

    /// Mass absorbed at the truncation boundary at each step.
    pub fn absorbed_mass_log(&self) -> &[f64] {
        &self.absorbed_mass_log
    }

    pub fn cumulative_absorbed(&self, n: usize) -> f64 {
        self.absorbed_mass_log[..n].iter().sum()
    }

    pub fn cumulative_pruned(&self, n: usize) -> f64 {
        self.pruned_mass_log[..n].iter().sum()
    }

    /// Worst `|interior + absorbed + pruned − 1|` over the snapshots.
    pub fn mass_accounting_residual(&self) -> f64 {
        self.snapshots
            .iter()
            .map(|(n, v)| {
                (v.total_mass() + self.cumulative_absorbed(*n) + self.cumulative_pruned(*n) - 1.0)
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Evolves `δ_x` for `n_max` steps, keeping the scheduled snapshots.
pub fn evolve<'a>(
    model: &MarkovModel,
    x: StateId,
    driver: impl Into<Driver<'a>>,
    n_max: usize,
    schedule: &SnapshotSchedule,
) -> Result<EvolutionSeries, KernelError> {
    let driver = driver.into();
    let start_index = model.idx(x)?;
    let op = Arc::new(model.compile(driver, false)?);
    let points = schedule.points(n_max);
    let mut evolver = Evolver::from_index(&op, start_index);
    let mut snapshots = Vec::with_capacity(points.len());
    let mut pruned_mass_log = Vec::with_capacity(n_max);
    let mut absorbed_mass_log = Vec::with_capacity(n_max);
    let mut next_point = points.iter().peekable();
    for n in 0..=n_max {
        if n > 0 {
            let (absorbed, pruned) = evolver.advance()?;
            absorbed_mass_log.push(absorbed);
            pruned_mass_log.push(pruned);
        }
        if next_point.peek() == Some(&&n) {
            snapshots.push((n, evolver.snapshot()));
            next_point.next();
        }
    }
    Ok(EvolutionSeries {
        start: x,
        start_index,
        law: match driver {
            Driver::Law(mu) => Some(mu.clone()),
            Driver::Chain => None,
        },
        snapshots,
        pruned_mass_log,
        absorbed_mass_log,
        operator: Arc::clone(&op),
    })
}

/// `(1/n) Σ_{k<n} μ*ᵏ∗δ_x`. Uses stored snapshots when the schedule covers
/// `0..n`, otherwise recomputes the missing steps.
pub fn cesaro(series: &EvolutionSeries, n: usize) -> Result<StateVector, KernelError> {
    if n == 0 {
        return Err(KernelError::InvalidArgument("Cesàro average needs n ≥ 1".into()));
    }
    let op = series.operator.as_ref();
    let mut sum = vec![0.0; op.len()];
    let mut pruned_sum = 0.0;
    let dense = series.snapshots.len() >= n && series.snapshots[..n].iter().enumerate().all(|(k, (m, _))| k == *m);
    if dense {
        let index: HashMap<StateId, usize> =
            op.states.iter().enumerate().map(|(i, &x)| (x, i)).collect();
        for (_, v) in &series.snapshots[..n] {
            for (x, m) in v.iter() {
                sum[index[&x]] += m;
            }
            pruned_sum += v.pruned_mass();
        }
    } else {
        let mut evolver = Evolver::from_index(op, series.start_index);
        for k in 0..n {
            if k > 0 {
                evolver.advance()?;
            }
            for (s, &m) in sum.iter_mut().zip(&evolver.cur) {
                *s += m;
            }
            pruned_sum += evolver.pruned;
        }
    }
    let scale = 1.0 / n as f64;
    for s in &mut sum {
        *s *= scale;
    }
    Ok(op.to_state_vector(&sum, pruned_sum * scale))
}

/// The back-and-forth sequence `μ*ⁿ∗μ̌*ⁿ∗δ_x` for `n = 0..=n_max`: the μ̌
/// steps act first.
pub fn back_and_forth<'a>(
    model: &MarkovModel,
    x: StateId,
    driver: impl Into<Driver<'a>>,
    n_max: usize,
) -> Result<Vec<StateVector>, KernelError> {
    let driver = driver.into();
    let start = model.idx(x)?;
    let forward = model.compile(driver, false)?;
    let backward = model.compile(driver, true)?;
    let mut back = Evolver::from_index(&backward, start);
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            back.advance()?;
        }
        let mut fwd = Evolver::from_dense(&forward, back.cur.clone(), back.absorbed, back.pruned);
        for _ in 0..n {
            fwd.advance()?;
        }
        out.push(fwd.snapshot());
    }
    Ok(out)
}

/// λ(A), or the infinite flag when A is the whole truncation of a model
/// whose reference measure has infinite total mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetMeasure {
    Finite(f64),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvarianceVerdict {
    Invariant,
    NotInvariant,
    InconclusiveAtTruncation,
}

/// Both sides of the invariance criterion for a set A: the operator residual
/// `sup |P1_A − 1_A|` and the per-generator masses `λ(g⁻¹A Δ A)`, both taken
/// over interior states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub set_measure: SetMeasure,
    pub operator_residual: f64,
    /// Per-generator residuals; a kernel-row chain reports one entry
    /// (`"chain"`), the λ-weighted probability flux across the boundary of A.
    pub generator_residuals: Vec<(String, f64)>,
    pub tolerance: f64,
    pub verdict: InvarianceVerdict,
}

impl InvarianceReport {
    pub fn operator_says_invariant(&self) -> bool {
        self.operator_residual <= self.tolerance
    }

    pub fn generators_say_invariant(&self) -> bool {
        self.generator_residuals.iter().all(|(_, r)| *r <= self.tolerance)
    }
}

pub fn check_invariant_set<'a>(
    model: &MarkovModel,
    set: &StateSet,
    driver: impl Into<Driver<'a>>,
    tol: f64,
) -> Result<InvarianceReport, KernelError> {
    let driver = driver.into();
    let n = model.len();
    let mut in_set = vec![false; n];
    for &x in set {
        in_set[model.idx(x)?] = true;
    }
    let op = model.compile(driver, false)?;
    let indicator: Vec<f64> = in_set.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let interior: Vec<usize> = (0..n).filter(|&i| !model.boundary[i]).collect();

    let operator_residual = interior
        .iter()
        .map(|&i| (op.pull_back(&indicator, i) - indicator[i]).abs())
        .fold(0.0, f64::max);

    let generator_residuals = match (&model.dynamics, driver) {
        (Dynamics::Action { targets, labels, .. }, Driver::Law(mu)) => mu
            .atoms()
            .iter()
            .map(|&(g, _)| {
                let k = model.generator_position(g.id()).expect("checked by compile");
                let residual = interior
                    .iter()
                    .filter(|&&i| targets[k][i].is_some_and(|j| in_set[j as usize] != in_set[i]))
                    .map(|&i| model.lambda[i])
                    .sum();
                (labels[k].clone(), residual)
            })
            .collect(),
        _ => {
            let flux = interior
                .iter()
                .map(|&i| {
                    let crossing: f64 = op
                        .row(i)
                        .filter(|&(j, _)| in_set[j as usize] != in_set[i])
                        .map(|(_, p)| p)
                        .sum();
                    model.lambda[i] * crossing
                })
                .sum();
            vec![("chain".to_string(), flux)]
        }
    };

    let whole = set.len() == n;
    let set_measure = if whole && model.reference.total_is_infinite() {
        SetMeasure::Infinite
    } else {
        SetMeasure::Finite(set.iter().map(|&x| model.lambda[model.index[&x] as usize]).sum())
    };
    let touches_boundary = (0..n).any(|i| in_set[i] && model.boundary[i]);
    let mut report = InvarianceReport {
        set_measure,
        operator_residual,
        generator_residuals,
        tolerance: tol,
        verdict: InvarianceVerdict::NotInvariant,
    };
    report.verdict = if touches_boundary && !whole {
        InvarianceVerdict::InconclusiveAtTruncation
    } else if report.operator_says_invariant() && report.generators_say_invariant() {
        InvarianceVerdict::Invariant
    } else {
        InvarianceVerdict::NotInvariant
    };
    Ok(report)
}

/// `sup_x |P_μψ(x) − ψ(x)|` over interior states.
pub fn harmonic_residual<'a>(
    model: &MarkovModel,
    psi: &dyn Fn(StateId) -> f64,
    driver: impl Into<Driver<'a>>,
) -> Result<f64, KernelError> {
    let op = model.compile(driver.into(), false)?;
    let values: Vec<f64> = model.states.iter().map(|&x| psi(x)).collect();
    Ok((0..model.len())
        .filter(|&i| !model.boundary[i])
        .map(|i| (op.pull_back(&values, i) - values[i]).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReversibilityReport {
    pub max_residual: f64,
    pub passed: bool,
}

/// Worst detailed-balance defect `|λ(x)p(x,y) − λ(y)p(y,x)|` over stored
/// pairs.
pub fn verify_reversibility<'a>(
    model: &MarkovModel,
    driver: impl Into<Driver<'a>>,
) -> Result<ReversibilityReport, KernelError> {
    let op = model.compile(driver.into(), false)?;
    let max_residual = model.detailed_balance_residual(&op);
    Ok(ReversibilityReport {
        max_residual,
        passed: max_residual <= DETAILED_BALANCE_TOL,
    })
}

/// Return probabilities `(μ*²ⁿ∗δ_x)({x})` for `n = 0..=n_max`.
pub fn even_return_curve<'a>(
    model: &MarkovModel,
    x: StateId,
    driver: impl Into<Driver<'a>>,
    n_max: usize,
) -> Result<Vec<f64>, KernelError> {
    let driver = driver.into();
    let symmetric = match driver {
        Driver::Law(mu) => is_symmetric(mu, SYMMETRY_TOL),
        Driver::Chain => verify_reversibility(model, Driver::Chain)?.passed,
    };
    if !symmetric {
        return Err(KernelError::SymmetryRequired);
    }
    let start = model.idx(x)?;
    let op = model.compile(driver, false)?;
    let mut evolver = Evolver::from_index(&op, start);
    let mut curve = Vec::with_capacity(n_max + 1);
    curve.push(1.0);
    for _ in 0..n_max {
        evolver.advance()?;
        evolver.advance()?;
        curve.push(evolver.cur[start]);
    }
    Ok(curve)
}
