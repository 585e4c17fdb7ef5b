//! Unimodular lattices in ℝ², i.e. points of SL(2,ℝ)/SL(2,ℤ).

use nalgebra::{Matrix2, Vector2};

use super::{EscapeProxy, ModelError};

pub type Mat2 = Matrix2<f64>;

pub const DET_TOL: f64 = 1e-9;
pub const MAX_SWAPS: usize = 1000;

/// Rotation by `angle` in SO(2).
pub fn rotation(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Largest eigenvalue modulus of a determinant-one matrix.
pub fn spectral_radius(g: &Mat2) -> f64 {
    let t = g.trace().abs() / 2.0;
    if t > 1.0 {
        t + (t * t - 1.0).sqrt()
    } else {
        1.0
    }
}

pub(crate) fn check_unimodular(m: &Mat2) -> Result<(), ModelError> {
    let det = m.determinant();
    if (det - 1.0).abs() < DET_TOL {
        Ok(())
    } else {
        Err(ModelError::NotUnimodular(det))
    }
}

/// The lattice spanned by the columns of `basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sl2LatticePoint {
    basis: Mat2,
    shortest_len: f64,
}

impl Sl2LatticePoint {
    /// Builds and reduces.
    pub fn new(basis: Mat2) -> Result<Self, ModelError> {
        check_unimodular(&basis)?;
        sl2_reduce(&Self {
            basis,
            shortest_len: f64::NAN,
        })
    }

    pub fn identity() -> Self {
        Self {
            basis: Mat2::identity(),
            shortest_len: 1.0,
        }
    }

    pub fn basis(&self) -> &Mat2 {
        &self.basis
    }

    pub fn shortest_len(&self) -> f64 {
        self.shortest_len
    }
}

impl EscapeProxy for Sl2LatticePoint {
    fn escape_proxy(&self) -> f64 {
        self.shortest_len
    }
}

/// Gauss reduction of the basis by integer column operations.
pub fn sl2_reduce(point: &Sl2LatticePoint) -> Result<Sl2LatticePoint, ModelError> {
    check_unimodular(&point.basis)?;
    let mut u: Vector2<f64> = point.basis.column(0).into();
    let mut v: Vector2<f64> = point.basis.column(1).into();
    if v.norm_squared() < u.norm_squared() {
        (u, v) = (v, -u);
    }
    let mut swaps = 0;
    loop {
        let m = (u.dot(&v) / u.norm_squared()).round();
        v -= m * u;
        if v.norm_squared() < u.norm_squared() {
            // (u, v) → (v, −u) keeps the orientation
            (u, v) = (v, -u);
            swaps += 1;
            if swaps > MAX_SWAPS {
                return Err(ModelError::DegenerateBasis);
            }
        } else {
            break;
        }
    }
    Ok(Sl2LatticePoint {
        basis: Mat2::from_columns(&[u, v]),
        shortest_len: u.norm(),
    })
}

/// Moves the lattice by `g` on the left and reduces.
pub fn sl2_step(point: &Sl2LatticePoint, g: &Mat2) -> Result<Sl2LatticePoint, ModelError> {
    check_unimodular(g)?;
    sl2_reduce(&Sl2LatticePoint {
        basis: g * point.basis,
        shortest_len: f64::NAN,
    })
}
