//! Conditional expectations along the fibres of the skew product
//! `(b, x) ↦ (Tb, b₁⁻¹x)` on fully enumerable models.
//!
//! `phi_formula` evaluates the closed form through the group-level
//! convolution power `μ*ⁿ`. `phi_direct` knows nothing about that: it walks
//! every `(b′, x′)` in `Γⁿ × X`, runs the skew product `n` times, keeps the
//! points landing where `(b, x)` lands, and averages `f(x′)` with weights
//! `μ^{⊗n}(b′)·λ(x′)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{back_and_forth, BoundaryPolicy, KernelError, MarkovModel, Truncation};
use crate::measures::{pair, GeneratorId, MeasureError, Observable, ReferenceWeights, StateId, StepLaw};

/// Enumerations larger than this many terms switch to an exact reduction.
pub const ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiberError {
    #[error("multiplication table is not a group: {0}")]
    NotAGroup(String),
    #[error("action table is not a group action: {0}")]
    NotAnAction(String),
    #[error("reference weights are not invariant at point {point} under element {element}")]
    LambdaNotInvariant { element: u32, point: u32 },
    #[error("law atom {0} is not a group element (or its inverse symbol is wrong)")]
    LawNotOnGroup(u32),
    #[error("letter {0} is not a group element")]
    UnknownLetter(u32),
    #[error("word of length {len} is shorter than n = {n}")]
    WordTooShort { n: usize, len: usize },
    #[error("point {0} is not in the space")]
    UnknownPoint(StateId),
    #[error("fibre enumeration of {0} terms exceeds the cap")]
    TooLarge(u128),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// A finite group given by its multiplication table; elements are `0..order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteGroup {
    name: String,
    table: Vec<Vec<u32>>,
    identity: u32,
    inverse: Vec<u32>,
}

impl FiniteGroup {
    /// Validates closure, associativity, identity and inverses.
    pub fn from_table(name: impl Into<String>, table: Vec<Vec<u32>>) -> Result<Self, FiberError> {
        let n = table.len();
        if n == 0 || table.iter().any(|row| row.len() != n) {
            return Err(FiberError::NotAGroup("table is not square".into()));
        }
        if table.iter().flatten().any(|&c| c as usize >= n) {
            return Err(FiberError::NotAGroup("product out of range".into()));
        }
        let identity = (0..n)
            .find(|&e| (0..n).all(|g| table[e][g] as usize == g && table[g][e] as usize == g))
            .ok_or_else(|| FiberError::NotAGroup("no identity".into()))? as u32;
        let mut inverse = Vec::with_capacity(n);
        for g in 0..n {
            let inv = (0..n)
                .find(|&h| table[g][h] == identity && table[h][g] == identity)
                .ok_or_else(|| FiberError::NotAGroup(format!("{g} has no inverse")))?;
            inverse.push(inv as u32);
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let left = table[table[a][b] as usize][c];
                    let right = table[a][table[b][c] as usize];
                    if left != right {
                        return Err(FiberError::NotAGroup(format!("({a}{b}){c} ≠ {a}({b}{c})")));
                    }
                }
            }
        }
        Ok(Self {
            name: name.into(),
            table,
            identity,
            inverse,
        })
    }

    pub fn cyclic(order: u32) -> Self {
        let table = (0..order)
            .map(|a| (0..order).map(|b| (a + b) % order).collect())
            .collect();
        Self::from_table(format!("Z{order}"), table).expect("cyclic table")
    }

    pub fn klein4() -> Self {
        let table = (0..4u32).map(|a| (0..4u32).map(|b| a ^ b).collect()).collect();
        Self::from_table("V4", table).expect("Klein table")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.table.len()
    }

    pub fn identity(&self) -> u32 {
        self.identity
    }

    pub fn mul(&self, a: u32, b: u32) -> u32 {
        self.table[a as usize][b as usize]
    }

    pub fn inv(&self, g: u32) -> u32 {
        self.inverse[g as usize]
    }

    /// The generator symbol of element `g` in step laws.
    pub fn generator(&self, g: u32) -> GeneratorId {
        GeneratorId::new(g, self.inv(g))
    }

    /// `μ*ⁿ` as a dense vector over the group: the law of `a₁⋯aₙ`.
    pub fn convolution_power(&self, mu: &StepLaw, n: usize) -> Vec<f64> {
        let mut cur = vec![0.0; self.order()];
        cur[self.identity as usize] = 1.0;
        let mut next = vec![0.0; self.order()];
        for _ in 0..n {
            next.fill(0.0);
            for (h, &m) in cur.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                for &(a, w) in mu.atoms() {
                    next[self.mul(h as u32, a.id()) as usize] += m * w;
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

/// A finite group acting on `0..points` with an invariant weight and a law.
#[derive(Debug, Clone)]
pub struct FiniteFiberModel {
    group: FiniteGroup,
    action: Vec<Vec<u32>>,
    lambda: Vec<f64>,
    mu: StepLaw,
}

impl FiniteFiberModel {
    /// `action[g][x]` is `g·x`. Checks the action axioms, invariance of
    /// `lambda`, and that `mu` lives on the group.
    pub fn new(
        group: FiniteGroup,
        action: Vec<Vec<u32>>,
        lambda: Vec<f64>,
        mu: StepLaw,
    ) -> Result<Self, FiberError> {
        let order = group.order();
        let points = lambda.len();
        if action.len() != order || action.iter().any(|row| row.len() != points) {
            return Err(FiberError::NotAnAction("table shape".into()));
        }
        if action.iter().flatten().any(|&y| y as usize >= points) {
            return Err(FiberError::NotAnAction("image out of range".into()));
        }
        for x in 0..points {
            if action[group.identity() as usize][x] as usize != x {
                return Err(FiberError::NotAnAction(format!("identity moves {x}")));
            }
            for g in 0..order as u32 {
                for h in 0..order as u32 {
                    let composed = action[g as usize][action[h as usize][x] as usize];
                    if action[group.mul(g, h) as usize][x] != composed {
                        return Err(FiberError::NotAnAction(format!("({g}{h})·{x} ≠ {g}·({h}·{x})")));
                    }
                }
            }
        }
        for (x, &w) in lambda.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(MeasureError::InvalidReferenceWeight {
                    state: x as u64,
                    weight: w,
                }
                .into());
            }
        }
        for (g, row) in action.iter().enumerate() {
            for (x, &y) in row.iter().enumerate() {
                if (lambda[y as usize] - lambda[x]).abs() > 1e-12 * lambda[x] {
                    return Err(FiberError::LambdaNotInvariant {
                        element: g as u32,
                        point: x as u32,
                    });
                }
            }
        }
        for &(a, _) in mu.atoms() {
            if a.id() as usize >= order || a.inverse_id() != group.inv(a.id()) {
                return Err(FiberError::LawNotOnGroup(a.id()));
            }
        }
        Ok(Self {
            group,
            action,
            lambda,
            mu,
        })
    }

    /// A group acting on itself by left translation, with counting measure.
    pub fn regular(group: FiniteGroup, mu: StepLaw) -> Result<Self, FiberError> {
        let n = group.order() as u32;
        let action = (0..n).map(|g| (0..n).map(|x| group.mul(g, x)).collect()).collect();
        Self::new(group, action, vec![1.0; n as usize], mu)
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn law(&self) -> &StepLaw {
        &self.mu
    }

    pub fn points(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self, x: u32) -> f64 {
        self.lambda[x as usize]
    }

    pub fn act(&self, g: u32, x: u32) -> u32 {
        self.action[g as usize][x as usize]
    }

    fn point(&self, x: StateId) -> Result<u32, FiberError> {
        if (x.0 as usize) < self.points() {
            Ok(x.0 as u32)
        } else {
            Err(FiberError::UnknownPoint(x))
        }
    }

    /// The same data as a kernel model; every group element is a generator.
    pub fn to_markov_model(&self) -> Result<MarkovModel, FiberError> {
        let states: Vec<StateId> = (0..self.points() as u64).map(StateId).collect();
        let generators = (0..self.group.order() as u32)
            .map(|g| (self.group.generator(g), g.to_string()))
            .collect();
        let act = |g: GeneratorId, x: StateId| Some(StateId(self.act(g.id(), x.0 as u32) as u64));
        let reference =
            ReferenceWeights::new(states.iter().zip(&self.lambda).map(|(&x, &w)| (x, w)), false)?;
        Ok(MarkovModel::from_action(
            states,
            generators,
            &act,
            reference,
            Truncation::new(BoundaryPolicy::AbsorbAndFlag, "finite"),
            true,
        )?)
    }

    /// Position of `(b, x)` after `n` skew-product steps: `bₙ⁻¹⋯b₁⁻¹x`.
    fn descend(&self, letters: &[u32], x: u32) -> u32 {
        letters
            .iter()
            .fold(x, |y, &b| self.act(self.group.inv(b), y))
    }
}

/// A finite prefix `(b₁, …, bₙ)` of a point of `Γ^ℕ` with its cylinder
/// weight `μ(b₁)⋯μ(bₙ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberWord {
    letters: Vec<u32>,
    weight: f64,
}

impl FiberWord {
    pub fn new(model: &FiniteFiberModel, letters: Vec<u32>) -> Result<Self, FiberError> {
        let mut weight = 1.0;
        for &b in &letters {
            if b as usize >= model.group.order() {
                return Err(FiberError::UnknownLetter(b));
            }
            weight *= model.mu.weight_of(b);
        }
        Ok(Self { letters, weight })
    }

    pub fn letters(&self) -> &[u32] {
        &self.letters
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }
}

fn prefix(b: &FiberWord, n: usize) -> Result<&[u32], FiberError> {
    b.letters.get(..n).ok_or(FiberError::WordTooShort { n, len: b.len() })
}

/// `Σ_h μ*ⁿ(h) f(h·bₙ⁻¹⋯b₁⁻¹x)`.
pub fn phi_formula(
    m: &FiniteFiberModel,
    n: usize,
    b: &FiberWord,
    x: StateId,
    f: &Observable,
) -> Result<f64, FiberError> {
    let z = m.descend(prefix(b, n)?, m.point(x)?);
    Ok(phi_at(m, &m.group.convolution_power(&m.mu, n), z, f))
}

fn phi_at(m: &FiniteFiberModel, power: &[f64], z: u32, f: &Observable) -> f64 {
    power
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(h, &w)| w * f.value(StateId(m.act(h as u32, z) as u64)))
        .sum()
}

/// Conditional expectation of `f(x)` given the `n`-th skew-product image,
/// by enumerating the whole fibre through `(b, x)`.
pub fn phi_direct(
    m: &FiniteFiberModel,
    n: usize,
    b: &FiberWord,
    x: StateId,
    f: &Observable,
) -> Result<f64, FiberError> {
    let target = m.descend(prefix(b, n)?, m.point(x)?);
    let support: Vec<(u32, f64)> = m.mu.atoms().iter().map(|&(g, w)| (g.id(), w)).collect();
    let terms = (support.len() as u128).pow(n as u32) * m.points() as u128;
    if terms > ENUMERATION_CAP {
        return Err(FiberError::TooLarge(terms));
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    let mut digits = vec![0usize; n];
    let mut word = vec![0u32; n];
    loop {
        let mut weight = 1.0;
        for (slot, &d) in word.iter_mut().zip(&digits) {
            *slot = support[d].0;
            weight *= support[d].1;
        }
        for x_alt in 0..m.points() as u32 {
            if m.descend(&word, x_alt) == target {
                let w = weight * m.lambda(x_alt);
                numerator += w * f.value(StateId(x_alt as u64));
                denominator += w;
            }
        }
        // odometer over supp(μ)ⁿ
        let mut k = 0;
        while k < n {
            digits[k] += 1;
            if digits[k] < support.len() {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    Ok(numerator / denominator)
}

/// Both sides of `∫ φₙ(b, x) dβ(b) = (μ*ⁿ∗μ̌*ⁿ∗δ_x)(f)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentitySides {
    pub lhs: f64,
    pub rhs: f64,
}

impl IdentitySides {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// The left side sums `μ^{⊗n}(b) φₙ(b, x)` over support words `b`; the right
/// side pairs the kernel's back-and-forth entry with `f`.
pub fn backforth_identity(
    m: &FiniteFiberModel,
    n: usize,
    x: StateId,
    f: &Observable,
) -> Result<IdentitySides, FiberError> {
    let start = m.point(x)?;
    let power = m.group.convolution_power(&m.mu, n);
    // distribution of bₙ⁻¹⋯b₁⁻¹x over support words, grouped by endpoint
    let mut endpoints: BTreeMap<u32, f64> = BTreeMap::from([(start, 1.0)]);
    for _ in 0..n {
        let mut next = BTreeMap::new();
        for (&y, &w) in &endpoints {
            for &(g, p) in m.mu.atoms() {
                *next.entry(m.act(g.inverse_id(), y)).or_insert(0.0) += w * p;
            }
        }
        endpoints = next;
    }
    let lhs = endpoints
        .iter()
        .map(|(&z, &w)| w * phi_at(m, &power, z, f))
        .sum();
    let model = m.to_markov_model()?;
    let series = back_and_forth(&model, x, &m.mu, n)?;
    let rhs = pair(&series[n], f);
    Ok(IdentitySides { lhs, rhs })
}

/// How a Cauchy increment was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluation {
    /// Every word of `supp(μ)^{n+1}` and every start point.
    Exhaustive,
    /// Exact, by grouping words through the reachable endpoints
    /// `bₙ⁻¹⋯b₁⁻¹x`, on which `φₙ` depends.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchyReport {
    /// `dₙ = max |φₙ₊₁ − φₙ|` over support words and start points.
    pub increments: Vec<f64>,
    pub evaluation: Vec<Evaluation>,
}

pub fn martingale_cauchy(
    m: &FiniteFiberModel,
    f: &Observable,
    n_max: usize,
) -> Result<CauchyReport, FiberError> {
    let support: Vec<u32> = m.mu.atoms().iter().map(|(g, _)| g.id()).collect();
    let mut powers = vec![m.group.convolution_power(&m.mu, 0)];
    let mut increments = Vec::with_capacity(n_max);
    let mut evaluation = Vec::with_capacity(n_max);
    // reachable endpoints after n steps, over all start points
    let mut reachable: BTreeSet<u32> = (0..m.points() as u32).collect();
    for n in 0..n_max {
        let next_power = m.group.convolution_power(&m.mu, n + 1);
        let terms = (support.len() as u128).pow(n as u32 + 1) * m.points() as u128;
        let phi = |power: &[f64], z: u32| phi_at(m, power, z, f);
        let d = if terms <= ENUMERATION_CAP {
            evaluation.push(Evaluation::Exhaustive);
            let mut worst: f64 = 0.0;
            let mut digits = vec![0usize; n + 1];
            let mut word = vec![0u32; n + 1];
            loop {
                for (slot, &d) in word.iter_mut().zip(&digits) {
                    *slot = support[d];
                }
                for x in 0..m.points() as u32 {
                    let z_n = m.descend(&word[..n], x);
                    let z_next = m.descend(&word[n..], z_n);
                    worst = worst.max((phi(&next_power, z_next) - phi(&powers[n], z_n)).abs());
                }
                let mut k = 0;
                while k <= n {
                    digits[k] += 1;
                    if digits[k] < support.len() {
                        break;
                    }
                    digits[k] = 0;
                    k += 1;
                }
                if k > n {
                    break;
                }
            }
            worst
        } else {
            evaluation.push(Evaluation::Reduced);
            let mut worst: f64 = 0.0;
            for &z in &reachable {
                for &c in &support {
                    let z_next = m.act(m.group.inv(c), z);
                    worst = worst.max((phi(&next_power, z_next) - phi(&powers[n], z)).abs());
                }
            }
            worst
        };
        increments.push(d);
        reachable = reachable
            .iter()
            .flat_map(|&z| support.iter().map(move |&c| (z, c)))
            .map(|(z, c)| m.act(m.group.inv(c), z))
            .collect();
        powers.push(next_power);
    }
    Ok(CauchyReport {
        increments,
        evaluation,
    })
}

/// The groups of order at most four: trivial, ℤ/2, ℤ/3, ℤ/4 and the Klein
/// group, each with a generating set.
pub fn small_groups() -> Vec<(FiniteGroup, Vec<u32>)> {
    vec![
        (FiniteGroup::cyclic(1), vec![]),
        (FiniteGroup::cyclic(2), vec![1]),
        (FiniteGroup::cyclic(3), vec![1]),
        (FiniteGroup::cyclic(4), vec![1]),
        (FiniteGroup::klein4(), vec![1, 2]),
    ]
}

fn permutations(k: usize) -> Vec<Vec<u32>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, (k - 1) as u32);
            out.push(q);
        }
    }
    out
}

/// Every action of `group` on `0..points`, as tables `action[g][x]`.
pub fn all_actions(group: &FiniteGroup, generators: &[u32], points: usize) -> Vec<Vec<Vec<u32>>> {
    let perms = permutations(points);
    let mut out = Vec::new();
    let mut choice = vec![0usize; generators.len()];
    loop {
        if let Some(table) = extend_to_action(group, generators, &choice, &perms, points) {
            out.push(table);
        }
        let mut k = 0;
        while k < choice.len() {
            choice[k] += 1;
            if choice[k] < perms.len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
        if k == choice.len() {
            break;
        }
    }
    out
}

fn extend_to_action(
    group: &FiniteGroup,
    generators: &[u32],
    choice: &[usize],
    perms: &[Vec<u32>],
    points: usize,
) -> Option<Vec<Vec<u32>>> {
    let mut image: Vec<Option<Vec<u32>>> = vec![None; group.order()];
    image[group.identity() as usize] = Some((0..points as u32).collect());
    let mut queue = VecDeque::from([group.identity()]);
    while let Some(h) = queue.pop_front() {
        for (k, &s) in generators.iter().enumerate() {
            let g = group.mul(s, h);
            let composed: Vec<u32> = {
                let ph = image[h as usize].as_ref().expect("visited");
                ph.iter().map(|&y| perms[choice[k]][y as usize]).collect()
            };
            match &image[g as usize] {
                Some(existing) if *existing != composed => return None,
                Some(_) => {}
                None => {
                    image[g as usize] = Some(composed);
                    queue.push_back(g);
                }
            }
        }
    }
    let table: Vec<Vec<u32>> = image.into_iter().collect::<Option<_>>()?;
    for g in 0..group.order() as u32 {
        for h in 0..group.order() as u32 {
            for x in 0..points {
                let gh = table[group.mul(g, h) as usize][x];
                if gh != table[g as usize][table[h as usize][x] as usize] {
                    return None;
                }
            }
        }
    }
    Some(table)
}

/// `1 + orbit index` at each point: invariant and not constant when the
/// action has several orbits.
pub fn orbit_weights(action: &[Vec<u32>], points: usize) -> Vec<f64> {
    let mut orbit = vec![usize::MAX; points];
    let mut next = 0;
    for x in 0..points {
        if orbit[x] != usize::MAX {
            continue;
        }
        for row in action {
            orbit[row[x] as usize] = next;
        }
        next += 1;
    }
    orbit.into_iter().map(|o| 1.0 + o as f64).collect()
}

/// Uniform, skewed (`∝ g + 1`) and, for nontrivial groups, `δ₁`.
pub fn catalog_laws(group: &FiniteGroup) -> Vec<StepLaw> {
    let n = group.order() as u32;
    let gens: Vec<GeneratorId> = (0..n).map(|g| group.generator(g)).collect();
    let total = (n * (n + 1) / 2) as f64;
    let mut laws = vec![
        StepLaw::uniform(&gens).expect("nonempty"),
        StepLaw::new(gens.iter().map(|&g| (g, (g.id() + 1) as f64 / total)).collect()).expect("normalized"),
    ];
    if n > 1 {
        laws.push(StepLaw::dirac(group.generator(1)));
    }
    laws
}

/// Every model built from a group of order ≤ 4, an action on at most
/// `max_points` points, orbit weights and a catalog law.
pub fn small_models(max_points: usize) -> Vec<FiniteFiberModel> {
    let mut out = Vec::new();
    for (group, gens) in small_groups() {
        for points in 1..=max_points {
            for action in all_actions(&group, &gens, points) {
                let lambda = orbit_weights(&action, points);
                for mu in catalog_laws(&group) {
                    out.push(
                        FiniteFiberModel::new(group.clone(), action.clone(), lambda.clone(), mu)
                            .expect("catalog models are valid"),
                    );
                }
            }
        }
    }
    out
}
