use crate::kernel::{BoundaryPolicy, MarkovModel, Truncation};
use crate::measures::{GeneratorId, ReferenceWeights, StateId, StepLaw};

use super::ModelError;

fn zigzag(x: i64) -> u64 {
    ((x << 1) ^ (x >> 63)) as u64
}

fn unzigzag(z: u64) -> i64 {
    ((z >> 1) as i64) ^ -((z & 1) as i64)
}

/// Packs a point of ℤ^d (d ≤ 2, coordinates within ±2³¹) into a state id.
pub fn lattice_state(coords: &[i64]) -> StateId {
    StateId(
        coords
            .iter()
            .fold(0u64, |acc, &c| (acc << 32) | (zigzag(c) & 0xffff_ffff)),
    )
}

pub fn lattice_coords(x: StateId, d: usize) -> Vec<i64> {
    (0..d)
        .map(|k| unzigzag((x.0 >> (32 * (d - 1 - k))) & 0xffff_ffff))
        .collect()
}

/// ℤ^d (d ∈ {1, 2}) truncated to the box `[−radius, radius]^d`, counting
/// measure, generators `±e_k` with ids `2k` / `2k+1`.
pub fn build_lattice_model(d: usize, radius: i64) -> Result<MarkovModel, ModelError> {
    if !(1..=2).contains(&d) {
        return Err(ModelError::SpecInvalid(format!("dimension {d} is not 1 or 2")));
    }
    if radius < 2 {
        return Err(ModelError::SpecInvalid(format!("radius {radius} < 2")));
    }
    let side: Vec<i64> = (-radius..=radius).collect();
    let points: Vec<Vec<i64>> = if d == 1 {
        side.iter().map(|&x| vec![x]).collect()
    } else {
        side.iter()
            .flat_map(|&x| side.iter().map(move |&y| vec![x, y]))
            .collect()
    };
    let states: Vec<StateId> = points.iter().map(|p| lattice_state(p)).collect();
    let generators = (0..d)
        .flat_map(|k| {
            let k32 = k as u32;
            [
                (GeneratorId::new(2 * k32, 2 * k32 + 1), format!("+e{k}")),
                (GeneratorId::new(2 * k32 + 1, 2 * k32), format!("-e{k}")),
            ]
        })
        .collect();
    let act = move |g: GeneratorId, x: StateId| {
        let mut p = lattice_coords(x, d);
        let k = (g.id() / 2) as usize;
        p[k] += if g.id().is_multiple_of(2) { 1 } else { -1 };
        (p[k].abs() <= radius).then(|| lattice_state(&p))
    };
    let label = format!("[-{radius},{radius}]^{d}");
    Ok(MarkovModel::from_action(
        states.clone(),
        generators,
        &act,
        ReferenceWeights::counting(states, true),
        Truncation::new(BoundaryPolicy::AbsorbAndFlag, label),
        true,
    )?)
}

/// Uniform law on the `2d` unit steps.
pub fn simple_walk(d: usize) -> StepLaw {
    let gens: Vec<GeneratorId> = (0..2 * d as u32).map(|id| GeneratorId::new(id, id ^ 1)).collect();
    StepLaw::uniform(&gens).expect("nonempty")
}

/// `copies` disjoint copies of ℤ/order; generator `k` translates by `k`
/// inside each copy. State `c·order + r` is residue `r` of copy `c`.
pub fn build_cyclic_model(order: u32, copies: u32) -> Result<MarkovModel, ModelError> {
    if order == 0 || copies == 0 {
        return Err(ModelError::SpecInvalid("empty cyclic model".into()));
    }
    let states: Vec<StateId> = (0..(order * copies) as u64).map(StateId).collect();
    let generators = (0..order)
        .map(|k| (GeneratorId::new(k, (order - k) % order), k.to_string()))
        .collect();
    let n = order as u64;
    let act = move |g: GeneratorId, x: StateId| {
        let (copy, r) = (x.0 / n, x.0 % n);
        Some(StateId(copy * n + (r + g.id() as u64) % n))
    };
    Ok(MarkovModel::from_action(
        states.clone(),
        generators,
        &act,
        ReferenceWeights::counting(states, false),
        Truncation::new(BoundaryPolicy::AbsorbAndFlag, "finite"),
        true,
    )?)
}

/// A law on the translations of ℤ/order given as `(shift, weight)` pairs.
pub fn translation_law(order: u32, atoms: &[(u32, f64)]) -> Result<StepLaw, ModelError> {
    StepLaw::new(
        atoms
            .iter()
            .map(|&(k, w)| (GeneratorId::new(k % order, (order - k % order) % order), w))
            .collect(),
    )
    .map_err(|e| ModelError::SpecInvalid(e.to_string()))
}
