//! Measure algebra on countable state spaces.
//!
//! A [`StepLaw`] is a finitely supported probability measure on generator
//! symbols. It acts on a [`StateVector`] (a finite nonnegative measure on
//! opaque [`StateId`]s) through an [`ActionOracle`]. Observables are paired
//! with state vectors by plain summation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Masses smaller than this are dropped after a convolution step and
/// accounted in [`StateVector::pruned_mass`].
pub const PRUNE_THRESHOLD: f64 = 1e-15;

/// Tolerance on `Σ weights = 1` for a step law.
pub const LAW_NORMALIZATION_TOL: f64 = 1e-12;

/// Upper slack on the total mass of a sub-probability state vector.
pub const MASS_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("step law has no atoms")]
    EmptyLaw,
    #[error("weight {weight} of generator {generator} is outside (0, 1]")]
    InvalidWeight { generator: u32, weight: f64 },
    #[error("step law weights sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("generator {0} appears twice in the step law")]
    DuplicateGenerator(u32),
    #[error("mass {mass} at state {state} is negative or not finite")]
    InvalidMass { state: u64, mass: f64 },
    #[error("total mass {0} exceeds 1")]
    MassTooLarge(f64),
    #[error("observable value at state {0} is not finite")]
    InvalidObservable(u64),
    #[error("reference weight {weight} at state {state} is not positive")]
    InvalidReferenceWeight { state: u64, weight: f64 },
    #[error("action is undefined for generator {generator} at state {state}")]
    ActionUndefined { generator: u32, state: u64 },
}

/// Opaque 64-bit state key. Models assign meaning; measures never look inside.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A group element in the support of a step law, together with the symbol
/// of its inverse.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct GeneratorId {
    id: u32,
    inverse_id: u32,
}

impl GeneratorId {
    pub const fn new(id: u32, inverse_id: u32) -> Self {
        Self { id, inverse_id }
    }

    /// A generator that is its own inverse.
    pub const fn involution(id: u32) -> Self {
        Self { id, inverse_id: id }
    }

    pub const fn id(self) -> u32 {
        self.id
    }

    pub const fn inverse_id(self) -> u32 {
        self.inverse_id
    }

    pub const fn inverse(self) -> Self {
        Self {
            id: self.inverse_id,
            inverse_id: self.id,
        }
    }
}

/// Finitely supported probability measure on generator symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLaw {
    atoms: Vec<(GeneratorId, f64)>,
}

impl StepLaw {
    pub fn new(atoms: Vec<(GeneratorId, f64)>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::EmptyLaw);
        }
        let mut seen = BTreeSet::new();
        let mut sum = 0.0;
        for &(g, w) in &atoms {
            if !(w > 0.0 && w <= 1.0) {
                return Err(MeasureError::InvalidWeight {
                    generator: g.id(),
                    weight: w,
                });
            }
            if !seen.insert(g.id()) {
                return Err(MeasureError::DuplicateGenerator(g.id()));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > LAW_NORMALIZATION_TOL {
            return Err(MeasureError::NotNormalized { sum });
        }
        Ok(Self { atoms })
    }

    pub fn dirac(g: GeneratorId) -> Self {
        Self {
            atoms: vec![(g, 1.0)],
        }
    }

    /// Uniform law on the given generators.
    pub fn uniform(generators: &[GeneratorId]) -> Result<Self, MeasureError> {
        let w = 1.0 / generators.len() as f64;
        Self::new(generators.iter().map(|&g| (g, w)).collect())
    }

    pub fn atoms(&self) -> &[(GeneratorId, f64)] {
        &self.atoms
    }

    pub fn generators(&self) -> impl Iterator<Item = GeneratorId> + '_ {
        self.atoms.iter().map(|&(g, _)| g)
    }

    /// Weight of the generator with symbol `id` (0 if absent).
    pub fn weight_of(&self, id: u32) -> f64 {
        self.atoms
            .iter()
            .find(|(g, _)| g.id() == id)
            .map_or(0.0, |&(_, w)| w)
    }

    /// Atom multiset keyed by generator symbol, for order-insensitive
    /// comparison.
    pub fn atom_map(&self) -> BTreeMap<u32, (u32, f64)> {
        self.atoms
            .iter()
            .map(|&(g, w)| (g.id(), (g.inverse_id(), w)))
            .collect()
    }
}

/// The image of `mu` under inversion.
pub fn invert_law(mu: &StepLaw) -> StepLaw {
    StepLaw {
        atoms: mu.atoms.iter().map(|&(g, w)| (g.inverse(), w)).collect(),
    }
}

/// True iff every atom's inverse carries the same weight, within `tol`.
pub fn is_symmetric(mu: &StepLaw, tol: f64) -> bool {
    mu.atoms
        .iter()
        .all(|&(g, w)| (mu.weight_of(g.inverse_id()) - w).abs() <= tol)
}

/// A (partial) action of generator symbols on states.
pub trait ActionOracle {
    fn act(&self, g: GeneratorId, x: StateId) -> Option<StateId>;
}

impl<F> ActionOracle for F
where
    F: Fn(GeneratorId, StateId) -> Option<StateId>,
{
    fn act(&self, g: GeneratorId, x: StateId) -> Option<StateId> {
        self(g, x)
    }
}

pub type StateSet = BTreeSet<StateId>;

/// Sparse nonnegative measure with total mass at most one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    entries: BTreeMap<StateId, f64>,
    total_mass: f64,
    pruned_mass: f64,
}

impl StateVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dirac(x: StateId) -> Self {
        Self {
            entries: BTreeMap::from([(x, 1.0)]),
            total_mass: 1.0,
            pruned_mass: 0.0,
        }
    }

    /// Builds a vector from (state, mass) pairs. Repeated states accumulate;
    /// exact zeros are dropped.
    pub fn from_entries<I>(entries: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (StateId, f64)>,
    {
        let mut map = BTreeMap::new();
        for (x, m) in entries {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(MeasureError::InvalidMass { state: x.0, mass: m });
            }
            if m > 0.0 {
                *map.entry(x).or_insert(0.0) += m;
            }
        }
        let v = Self::from_map_unchecked(map, 0.0);
        if v.total_mass > 1.0 + MASS_SLACK {
            return Err(MeasureError::MassTooLarge(v.total_mass));
        }
        Ok(v)
    }

    pub(crate) fn from_map_unchecked(entries: BTreeMap<StateId, f64>, pruned_mass: f64) -> Self {
        let total_mass = entries.values().sum();
        Self {
            entries,
            total_mass,
            pruned_mass,
        }
    }

    pub fn mass(&self, x: StateId) -> f64 {
        self.entries.get(&x).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Mass dropped by pruning while this vector was produced (cumulative
    /// along a chain of convolutions).
    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + '_ {
        self.entries.iter().map(|(&x, &m)| (x, m))
    }

    pub fn support(&self) -> impl Iterator<Item = StateId> + '_ {
        self.entries.keys().copied()
    }

    /// `a·self + b·other` for nonnegative coefficients.
    pub fn combine(&self, a: f64, other: &StateVector, b: f64) -> Result<Self, MeasureError> {
        let scaled_self = self.iter().map(|(x, m)| (x, a * m));
        let scaled_other = other.iter().map(|(x, m)| (x, b * m));
        Self::from_entries(scaled_self.chain(scaled_other))
    }

    /// Largest entrywise difference between two vectors.
    pub fn sup_distance(&self, other: &StateVector) -> f64 {
        let keys: BTreeSet<StateId> = self.support().chain(other.support()).collect();
        keys.into_iter()
            .map(|x| (self.mass(x) - other.mass(x)).abs())
            .fold(0.0, f64::max)
    }
}

/// Finite-support real function on states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observable {
    values: BTreeMap<StateId, f64>,
    sup_norm: f64,
}

impl Observable {
    pub fn new<I>(values: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (StateId, f64)>,
    {
        let mut map = BTreeMap::new();
        for (x, v) in values {
            if !v.is_finite() {
                return Err(MeasureError::InvalidObservable(x.0));
            }
            if v != 0.0 {
                map.insert(x, v);
            }
        }
        let sup_norm = map.values().map(|v: &f64| v.abs()).fold(0.0, f64::max);
        Ok(Self {
            values: map,
            sup_norm,
        })
    }

    /// Indicator function of a finite set.
    pub fn indicator<I>(states: I) -> Self
    where
        I: IntoIterator<Item = StateId>,
    {
        let values: BTreeMap<_, _> = states.into_iter().map(|x| (x, 1.0)).collect();
        let sup_norm = if values.is_empty() { 0.0 } else { 1.0 };
        Self { values, sup_norm }
    }

    pub fn value(&self, x: StateId) -> f64 {
        self.values.get(&x).copied().unwrap_or(0.0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + '_ {
        self.values.iter().map(|(&x, &v)| (x, v))
    }
}

/// The invariant reference measure λ restricted to the states a model
/// enumerates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights {
    weights: BTreeMap<StateId, f64>,
    total_is_infinite: bool,
}

impl ReferenceWeights {
    pub fn new<I>(weights: I, total_is_infinite: bool) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (StateId, f64)>,
    {
        let mut map = BTreeMap::new();
        for (x, w) in weights {
            if !(w > 0.0 && w.is_finite()) {
                return Err(MeasureError::InvalidReferenceWeight { state: x.0, weight: w });
            }
            map.insert(x, w);
        }
        Ok(Self {
            weights: map,
            total_is_infinite,
        })
    }

    /// Counting measure on the given states.
    pub fn counting<I>(states: I, total_is_infinite: bool) -> Self
    where
        I: IntoIterator<Item = StateId>,
    {
        Self {
            weights: states.into_iter().map(|x| (x, 1.0)).collect(),
            total_is_infinite,
        }
    }

    /// λ({x}); `None` when the state is not covered.
    pub fn weight(&self, x: StateId) -> Option<f64> {
        self.weights.get(&x).copied()
    }

    pub fn total_is_infinite(&self) -> bool {
        self.total_is_infinite
    }

    /// λ(A) for a finite set of covered states.
    pub fn measure_of<'a, I>(&self, states: I) -> f64
    where
        I: IntoIterator<Item = &'a StateId>,
    {
        states.into_iter().filter_map(|x| self.weight(*x)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + '_ {
        self.weights.iter().map(|(&x, &w)| (x, w))
    }
}

/// One step of the walk: `(μ∗ν)(y) = Σ_{g·x = y} μ(g) ν(x)`.
pub fn convolve_step(
    nu: &StateVector,
    mu: &StepLaw,
    act: &dyn ActionOracle,
) -> Result<StateVector, MeasureError> {
    let mut out: BTreeMap<StateId, f64> = BTreeMap::new();
    for (x, m) in nu.iter() {
        for &(g, w) in mu.atoms() {
            let y = act.act(g, x).ok_or(MeasureError::ActionUndefined {
                generator: g.id(),
                state: x.0,
            })?;
            *out.entry(y).or_insert(0.0) += w * m;
        }
    }
    let mut pruned = nu.pruned_mass;
    out.retain(|_, m| {
        if *m < PRUNE_THRESHOLD {
            pruned += *m;
            false
        } else {
            true
        }
    });
    Ok(StateVector::from_map_unchecked(out, pruned))
}

/// `ν(f) = Σ_x ν(x) f(x)`.
pub fn pair(nu: &StateVector, f: &Observable) -> f64 {
    // iterate the smaller side
    if f.values.len() < nu.entries.len() {
        f.iter().map(|(x, v)| nu.mass(x) * v).sum()
    } else {
        nu.iter().map(|(x, m)| m * f.value(x)).sum()
    }
}

/// Mass of `nu` inside a finite window.
pub fn window_mass(nu: &StateVector, window: &StateSet) -> f64 {
    window.iter().map(|&x| nu.mass(x)).sum()
}
