//! Orbits of `T(x) = x − 1/x` in double-double arithmetic.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// An iterate this close to 0 aborts the orbit.
pub const BOOLE_SINGULAR_RADIUS: f64 = 1e-12;

// unit roundoff of a double-double operation, with a safety factor
const DD_EPS: f64 = 8.0 * 1.232_595_164_407_831e-32;

pub fn boole_map(x: f64) -> f64 {
    x - 1.0 / x
}

/// `Σ 1/|T′(y)|` over the two preimages `y = (x ± √(x²+4))/2`.
pub fn preimage_jacobian_sum(x: f64) -> f64 {
    let root = (x * x + 4.0).sqrt();
    // stable pair: the product of the roots is −1
    let big = if x >= 0.0 { (x + root) / 2.0 } else { (x - root) / 2.0 };
    let small = -1.0 / big;
    [big, small].iter().map(|&y| 1.0 / (1.0 + 1.0 / (y * y))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn sub(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, -o.hi);
        let (t, f) = two_sum(self.lo, -o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    fn recip(self) -> Dd {
        let q1 = 1.0 / self.hi;
        // r = 1 − q1·x, exactly enough via fma
        let p = q1 * self.hi;
        let p_err = q1.mul_add(self.hi, -p);
        let r = ((1.0 - p) - p_err) - q1 * self.lo;
        let q2 = q1 * r;
        let (hi, lo) = quick_two_sum(q1, q2);
        let refine = Dd { hi, lo };
        // one Newton correction
        let p = refine.hi * self.hi;
        let p_err = refine.hi.mul_add(self.hi, -p);
        let r = (((1.0 - p) - p_err) - refine.hi * self.lo) - refine.lo * self.hi;
        let (hi, lo) = quick_two_sum(refine.hi, refine.lo + refine.hi * r);
        Dd { hi, lo }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BooleOrbitSpec {
    pub starts: Vec<f64>,
    pub horizon: usize,
    /// Occupation is measured for `[−window, window]`.
    pub window: f64,
    pub revisit_radius: f64,
    /// Occupation fractions are recorded every this many steps (and at the
    /// horizon).
    pub record_every: usize,
}

impl BooleOrbitSpec {
    fn validate(&self) -> Result<(), ModelError> {
        if self.horizon == 0 || self.record_every == 0 {
            return Err(ModelError::SpecInvalid("horizon and record_every must be ≥ 1".into()));
        }
        if !(self.window > 0.0 && self.revisit_radius > 0.0) {
            return Err(ModelError::SpecInvalid("window and revisit radius must be positive".into()));
        }
        for &x in &self.starts {
            if !x.is_finite() || x.abs() < BOOLE_SINGULAR_RADIUS {
                return Err(ModelError::SpecInvalid(format!("start point {x}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitRecord {
    pub start: f64,
    /// `(n, fraction of 0 ≤ k < n with |Tᵏx| ≤ window)`.
    pub occupation: Vec<(usize, f64)>,
    /// Every `n ≥ 1` with `|Tⁿx − x| < revisit_radius`.
    pub revisits: Vec<usize>,
    /// Sum of one-step rounding bounds along the computed orbit.
    pub drift_bound: f64,
    pub final_point: f64,
}

impl OrbitRecord {
    pub fn occupation_at(&self, n: usize) -> Option<f64> {
        self.occupation.iter().find(|(k, _)| *k == n).map(|(_, f)| *f)
    }

    pub fn final_occupation(&self) -> f64 {
        self.occupation.last().map_or(0.0, |(_, f)| *f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BooleOrbitReport {
    pub orbits: Vec<OrbitRecord>,
}

impl BooleOrbitReport {
    /// Mean occupation fraction over starts at step `n`.
    pub fn mean_occupation(&self, n: usize) -> Option<f64> {
        let values: Option<Vec<f64>> = self.orbits.iter().map(|o| o.occupation_at(n)).collect();
        let values = values?;
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn max_drift_bound(&self) -> f64 {
        self.orbits.iter().map(|o| o.drift_bound).fold(0.0, f64::max)
    }
}

pub fn boole_orbit(spec: &BooleOrbitSpec) -> Result<BooleOrbitReport, ModelError> {
    spec.validate()?;
    let orbits = spec
        .starts
        .iter()
        .map(|&start| single_orbit(spec, start))
        .collect::<Result<_, _>>()?;
    Ok(BooleOrbitReport { orbits })
}

fn single_orbit(spec: &BooleOrbitSpec, start: f64) -> Result<OrbitRecord, ModelError> {
    let mut x = Dd::new(start);
    let mut inside = 0usize;
    let mut occupation = Vec::with_capacity(spec.horizon / spec.record_every + 1);
    let mut revisits = Vec::new();
    let mut drift = 0.0;
    for n in 1..=spec.horizon {
        // x currently holds T^{n−1}(start)
        if x.value().abs() <= spec.window {
            inside += 1;
        }
        if n % spec.record_every == 0 || n == spec.horizon {
            occupation.push((n, inside as f64 / n as f64));
        }
        let r = x.recip();
        x = x.sub(r);
        drift += DD_EPS * (x.value().abs() + r.value().abs());
        if x.value().abs() < BOOLE_SINGULAR_RADIUS {
            return Err(ModelError::OrbitSingular { start, step: n });
        }
        if (x.sub(Dd::new(start))).value().abs() < spec.revisit_radius {
            revisits.push(n);
        }
    }
    Ok(OrbitRecord {
        start,
        occupation,
        revisits,
        drift_bound: drift,
        final_point: x.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_values() {
        assert_eq!(boole_map(1.0), 0.0);
        assert_eq!(boole_map(2.0), 1.5);
    }

    #[test]
    fn jacobian_sums() {
        assert_eq!(preimage_jacobian_sum(0.0), 1.0);
        for x in [0.3, 1.7, -2.4] {
            assert!((preimage_jacobian_sum(x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dd_reciprocal_is_accurate() {
        for v in [3.0, -0.7, 1e-5, 12345.678] {
            let r = Dd::new(v).recip();
            // v·r − 1 with the product carried exactly
            let p = r.hi * v;
            let e = r.hi.mul_add(v, -p);
            let residual = (p - 1.0) + e + r.lo * v;
            assert!(residual.abs() < 1e-30, "{v}: {residual:e}");
        }
    }

    #[test]
    fn dd_orbit_tracks_f64_for_a_few_steps() {
        let spec = BooleOrbitSpec {
            starts: vec![2.0],
            horizon: 3,
            window: 10.0,
            revisit_radius: 0.1,
            record_every: 1,
        };
        let report = boole_orbit(&spec).unwrap();
        let plain = boole_map(boole_map(boole_map(2.0)));
        assert!((report.orbits[0].final_point - plain).abs() < 1e-14);
        assert_eq!(report.orbits[0].occupation, vec![(1, 1.0), (2, 1.0), (3, 1.0)]);
    }

    #[test]
    fn singular_orbit_is_reported() {
        let spec = BooleOrbitSpec {
            starts: vec![1.0],
            horizon: 5,
            window: 10.0,
            revisit_radius: 0.1,
            record_every: 1,
        };
        assert!(matches!(boole_orbit(&spec), Err(ModelError::OrbitSingular { step: 1, .. })));
    }
}
