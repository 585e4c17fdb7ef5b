use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::kernel::{BoundaryPolicy, MarkovModel, Truncation};
use crate::measures::{ReferenceWeights, StateId};

use super::ModelError;

/// Neck lengths below this are raised to it so the chain stays irreducible.
pub const NECK_FLOOR: f64 = 1e-12;

/// How neck lengths continue past the explicit prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TailRule {
    Constant(f64),
    /// `λ_i = first · ratio^{i−1}`.
    Geometric { first: f64, ratio: f64 },
    /// The prefix must cover every neck.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FunnelChainSpec {
    /// `λ_1, λ_2, …` overriding the tail rule.
    #[serde(default)]
    pub prefix: Vec<f64>,
    pub tail: TailRule,
    pub step_scale: f64,
    pub truncation_size: u64,
}

impl FunnelChainSpec {
    pub fn new(tail: TailRule, step_scale: f64, truncation_size: u64) -> Self {
        Self {
            prefix: Vec::new(),
            tail,
            step_scale,
            truncation_size,
        }
    }

    /// `λ_i` for `i ≥ 1`, floored at [`NECK_FLOOR`].
    pub fn neck(&self, i: u64) -> Result<f64, ModelError> {
        let raw = match self.prefix.get((i - 1) as usize) {
            Some(&v) => v,
            None => match self.tail {
                TailRule::Constant(c) => c,
                TailRule::Geometric { first, ratio } => first * ratio.powf((i - 1) as f64),
                TailRule::Custom => {
                    return Err(ModelError::SpecInvalid(format!("no neck length for block {i}")))
                }
            },
        };
        if !(raw.is_finite() && raw >= 0.0) {
            return Err(ModelError::SpecInvalid(format!("neck length {raw} at block {i}")));
        }
        Ok(raw.max(NECK_FLOOR))
    }
}

/// Birth-death chain on `0..=M` with `p(i, i+1) = p(i+1, i) = ε·min(λ_{i+1}, 1)`
/// and self-loops; reflecting at `M`, reference weight 1 per block.
pub fn build_funnel_chain(spec: &FunnelChainSpec) -> Result<MarkovModel, ModelError> {
    let eps = spec.step_scale;
    if !(eps > 0.0 && eps <= 0.25) {
        return Err(ModelError::SpecInvalid(format!("step scale {eps} outside (0, 1/4]")));
    }
    let m = spec.truncation_size;
    if m == 0 {
        return Err(ModelError::SpecInvalid("truncation size must be at least 1".into()));
    }
    let cross: Vec<f64> = (1..=m)
        .map(|i| spec.neck(i).map(|l| eps * l.min(1.0)))
        .collect::<Result<_, _>>()?;
    let states: Vec<StateId> = (0..=m).map(StateId).collect();
    let mut rows = Vec::with_capacity(states.len());
    for i in 0..=m as usize {
        let up = if i < m as usize { cross[i] } else { 0.0 };
        let down = if i > 0 { cross[i - 1] } else { 0.0 };
        if up + down > 1.0 {
            return Err(ModelError::SpecInvalid(format!("off-diagonal mass {} at {i}", up + down)));
        }
        let mut row = Vec::with_capacity(3);
        if i > 0 {
            row.push((StateId(i as u64 - 1), down));
        }
        row.push((StateId(i as u64), 1.0 - up - down));
        if i < m as usize {
            row.push((StateId(i as u64 + 1), up));
        }
        rows.push(row);
    }
    Ok(MarkovModel::from_rows(
        states.clone(),
        rows,
        ReferenceWeights::counting(states, true),
        Truncation::new(BoundaryPolicy::Reflect, format!("0..={m}")),
        &[StateId(m)],
        true,
    )?)
}
