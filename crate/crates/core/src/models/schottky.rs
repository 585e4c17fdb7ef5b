//! A two-generator Schottky group and the chart of its quotient.
//!
//! A point is a frame `K ∈ SL(2,ℝ)` kept reduced modulo the group acting on
//! the left: `K` is replaced by `sK` for a generator `s` as long as that
//! lowers `‖K‖_F`. Since `‖K‖_F² = 2 cosh d(i, K·i)`, the reduced frame
//! sits in the Dirichlet domain centred at `i`, and its distance to `i` is
//! the escape proxy.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::sl2::{check_unimodular, rotation, Mat2};
use super::{EscapeProxy, ModelError};

const REDUCTION_SLACK: f64 = 1e-12;
const MAX_REDUCTIONS: usize = 100_000;

/// Generators `a, a⁻¹, b, b⁻¹`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchottkyLetter {
    A,
    AInv,
    B,
    BInv,
}

impl SchottkyLetter {
    pub const ALL: [SchottkyLetter; 4] = [Self::A, Self::AInv, Self::B, Self::BInv];

    pub fn inverse(self) -> Self {
        match self {
            Self::A => Self::AInv,
            Self::AInv => Self::A,
            Self::B => Self::BInv,
            Self::BInv => Self::B,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Appends `letters` to `word`, cancelling adjacent inverse pairs.
pub fn free_reduce(word: &[SchottkyLetter], letters: &[SchottkyLetter]) -> Vec<SchottkyLetter> {
    let mut out = word.to_vec();
    for &g in letters {
        if out.last() == Some(&g.inverse()) {
            out.pop();
        } else {
            out.push(g);
        }
    }
    out
}

/// `a = diag(3, 1/3)` and `b = r a r⁻¹` with `r` the SO(2) rotation by π/4,
/// which turns the disk by a quarter turn.
pub fn default_schottky_generators() -> (Mat2, Mat2) {
    let a = Mat2::new(3.0, 0.0, 0.0, 1.0 / 3.0);
    let r = rotation(std::f64::consts::FRAC_PI_4);
    let b = r * a * r.transpose();
    (a, b)
}

/// The generator matrices, validated by the ping-pong check.
#[derive(Debug, Clone, PartialEq)]
pub struct SchottkyChart {
    matrices: [Mat2; 4],
}

// (α, β) of the disk model of g: w ↦ (αw + β)/(β̄w + ᾱ)
fn disk_form(g: &Mat2) -> (Complex64, Complex64) {
    let i = Complex64::i();
    let (a, b, c, d) = (
        Complex64::from(g[(0, 0)]),
        Complex64::from(g[(0, 1)]),
        Complex64::from(g[(1, 0)]),
        Complex64::from(g[(1, 1)]),
    );
    // C g C⁻¹ with C = [[1, −i], [1, i]], C⁻¹ = [[i, i], [−1, 1]] / 2i
    let alpha = ((a + d) + i * (b - c)) / 2.0;
    let beta = ((a - d) - i * (b + c)) / 2.0;
    (alpha, beta)
}

impl SchottkyChart {
    pub fn new(a: Mat2, b: Mat2) -> Result<Self, ModelError> {
        check_unimodular(&a)?;
        check_unimodular(&b)?;
        let inv = |m: &Mat2| Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]);
        let matrices = [a, inv(&a), b, inv(&b)];
        let mut disks = Vec::with_capacity(4);
        for (k, m) in matrices.iter().enumerate() {
            let (alpha, beta) = disk_form(m);
            if beta.norm() < 1e-12 {
                return Err(ModelError::PingPongViolation(format!(
                    "generator {:?} fixes the centre",
                    SchottkyLetter::ALL[k]
                )));
            }
            disks.push((-alpha.conj() / beta.conj(), 1.0 / beta.norm()));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let (ci, ri) = disks[i];
                let (cj, rj) = disks[j];
                if (ci - cj).norm() <= ri + rj {
                    return Err(ModelError::PingPongViolation(format!(
                        "isometric circles of {:?} and {:?} meet",
                        SchottkyLetter::ALL[i],
                        SchottkyLetter::ALL[j]
                    )));
                }
            }
        }
        Ok(Self { matrices })
    }

    pub fn default_generators() -> Self {
        let (a, b) = default_schottky_generators();
        Self::new(a, b).expect("default generators play ping-pong")
    }

    pub fn matrix(&self, g: SchottkyLetter) -> &Mat2 {
        &self.matrices[g.index()]
    }

    /// The point of the quotient with frame `h`.
    pub fn point(&self, h: Mat2) -> Result<SchottkyPoint, ModelError> {
        check_unimodular(&h)?;
        let frame = self.reduce(h)?;
        Ok(SchottkyPoint::from_frame(Vec::new(), frame))
    }

    fn reduce(&self, mut k: Mat2) -> Result<Mat2, ModelError> {
        for _ in 0..MAX_REDUCTIONS {
            let norm = k.norm_squared();
            let best = self
                .matrices
                .iter()
                .map(|s| s * k)
                .min_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
                .expect("four generators");
            if best.norm_squared() < norm * (1.0 - REDUCTION_SLACK) {
                k = best;
            } else {
                return Ok(k);
            }
        }
        Err(ModelError::DegenerateBasis)
    }

    /// `word ← word·g`, frame moved by `g` on the right and reduced.
    pub fn schottky_step(&self, point: &SchottkyPoint, g: SchottkyLetter) -> Result<SchottkyPoint, ModelError> {
        let frame = self.reduce(point.frame * self.matrix(g))?;
        Ok(SchottkyPoint::from_frame(free_reduce(&point.word, &[g]), frame))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchottkyPoint {
    word: Vec<SchottkyLetter>,
    frame: Mat2,
    position: Complex64,
    core_distance: f64,
}

impl SchottkyPoint {
    fn from_frame(word: Vec<SchottkyLetter>, frame: Mat2) -> Self {
        let i = Complex64::i();
        let z = (frame[(0, 0)] * i + frame[(0, 1)]) / (frame[(1, 0)] * i + frame[(1, 1)]);
        let position = (z - i) / (z + i);
        let core_distance = (frame.norm_squared() / 2.0).max(1.0).acosh();
        Self {
            word,
            frame,
            position,
            core_distance,
        }
    }

    pub fn identity() -> Self {
        Self::from_frame(Vec::new(), Mat2::identity())
    }

    pub fn word(&self) -> &[SchottkyLetter] {
        &self.word
    }

    pub fn frame(&self) -> &Mat2 {
        &self.frame
    }

    /// Disk coordinate of the reduced frame applied to the centre.
    pub fn position(&self) -> Complex64 {
        self.position
    }

    pub fn core_distance(&self) -> f64 {
        self.core_distance
    }
}

impl EscapeProxy for SchottkyPoint {
    fn escape_proxy(&self) -> f64 {
        self.core_distance
    }
}
