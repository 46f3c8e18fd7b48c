//! Rotations and differentiable voxel warping.
//!
//! # Coordinate conventions (fixed here, used everywhere)
//!
//! * Vectors are `(x, y, z)` with **x right, y down** (image convention),
//!   z along depth. Rotation matrices are row-major 3x3 and act on column
//!   vectors; they are right-handed in this basis, so `rot_z(θ)` with
//!   θ > 0 turns +x toward +y.
//! * Voxel grids are indexed `[depth, height, width]`; index axis order
//!   `(d, h, w)` corresponds to coordinates `(z, y, x)`. Each axis is
//!   normalized to `[-1, 1]` independently of its extent (anisotropic
//!   volumes are treated as a unit cube), with the center of cell `i` of
//!   `n` at `(2i + 1)/n - 1`.
//! * [`warp::rotate_voxel`]`(v, r)` rotates the *content* of `v` by `r`:
//!   each output cell center `p` samples the input at `rᵀ·p`.
//!
//! The 6D rotation parameterization maps a pair of 3-vectors to a rotation
//! matrix by Gram–Schmidt: `b1 = normalize(v[0..3])`,
//! `b2 = normalize(v[3..6] - (v[3..6]·b1) b1)`, `b3 = b1 × b2`, columns
//! `(b1, b2, b3)`. It is continuous in the input, which is why the
//! rotation head regresses it instead of quaternions or Euler angles.

pub mod warp;

mod rot6d;

pub use rot6d::{rot6d_to_matrix_batch, rotation_loss_batch, Rot6d};
pub use warp::{grid_sample_trilinear, make_warp_grid, rotate_voxel, WarpGrid};

use crate::{Error, Result, Scalar};

/// Conditioning threshold below which Gram–Schmidt inputs are treated as
/// degenerate (zero or near-parallel vectors).
pub const DEGENERACY_EPS: f64 = 1e-6;

/// Row-major 3x3 rotation matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct RotationMatrix<T: Scalar> {
    m: [T; 9],
}

impl<T: Scalar> std::fmt::Debug for RotationMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[[{} {} {}] [{} {} {}] [{} {} {}]]",
            self.m[0], self.m[1], self.m[2], self.m[3], self.m[4], self.m[5], self.m[6], self.m[7], self.m[8]
        )
    }
}

impl<T: Scalar> RotationMatrix<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        RotationMatrix { m: [o, z, z, z, o, z, z, z, o] }
    }

    /// From a row-major 9-element array; does not validate orthonormality.
    pub fn from_array(m: [T; 9]) -> Self {
        RotationMatrix { m }
    }

    pub fn as_array(&self) -> &[T; 9] {
        &self.m
    }

    /// Convert the scalar type (e.g. an `f64` rotation driving an `f32`
    /// feature warp).
    pub fn cast<U: Scalar>(&self) -> RotationMatrix<U> {
        let mut m = [U::zero(); 9];
        for (o, &v) in m.iter_mut().zip(&self.m) {
            *o = U::from_f64(v.to_f64());
        }
        RotationMatrix { m }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.m[row * 3 + col]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        RotationMatrix { m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]] }
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut out = [T::zero(); 9];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += self.m[r * 3 + k] * other.m[k * 3 + c];
                }
                out[r * 3 + c] = acc;
            }
        }
        RotationMatrix { m: out }
    }

    /// Apply to a column vector `(x, y, z)`.
    pub fn apply(&self, v: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    /// Apply the transpose (inverse) to a column vector.
    pub fn apply_transpose(&self, v: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
            m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
        ]
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Orthonormality plus determinant +1, within `tol`.
    pub fn is_rotation(&self, tol: T) -> bool {
        let rt = self.transpose();
        let p = self.compose(&rt);
        let id = Self::identity();
        let mut max_dev = T::zero();
        for i in 0..9 {
            let d = (p.m[i] - id.m[i]).abs();
            if d > max_dev {
                max_dev = d;
            }
        }
        max_dev <= tol && (self.det() - T::one()).abs() <= tol
    }

    /// Rodrigues formula. Errors when the axis is numerically zero.
    pub fn from_axis_angle(axis: [T; 3], angle: T) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n.to_f64() < DEGENERACY_EPS {
            return Err(Error::numeric("from_axis_angle: zero-length axis".to_string()));
        }
        let (ux, uy, uz) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (c, s) = (angle.cos(), angle.sin());
        let ic = T::one() - c;
        Ok(RotationMatrix {
            m: [
                c + ux * ux * ic,
                ux * uy * ic - uz * s,
                ux * uz * ic + uy * s,
                uy * ux * ic + uz * s,
                c + uy * uy * ic,
                uy * uz * ic - ux * s,
                uz * ux * ic - uy * s,
                uz * uy * ic + ux * s,
                c + uz * uz * ic,
            ],
        })
    }

    pub fn rot_x(angle: T) -> Self {
        Self::from_axis_angle([T::one(), T::zero(), T::zero()], angle).expect("unit axis")
    }
    pub fn rot_y(angle: T) -> Self {
        Self::from_axis_angle([T::zero(), T::one(), T::zero()], angle).expect("unit axis")
    }
    pub fn rot_z(angle: T) -> Self {
        Self::from_axis_angle([T::zero(), T::zero(), T::one()], angle).expect("unit axis")
    }

    /// Uniform (Haar) random rotation: Gram–Schmidt applied to a standard
    /// Gaussian 6-vector yields a uniformly distributed orthonormal 2-frame,
    /// and completing it with the cross product gives Haar measure on the
    /// rotation group.
    pub fn random_uniform(rng: &mut impl rand::Rng) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::StandardNormal;
        loop {
            let mut v = [T::zero(); 6];
            for vi in v.iter_mut() {
                let z: f64 = dist.sample(rng);
                *vi = T::from_f64(z);
            }
            if let Ok(m) = Rot6d::new(v).to_matrix() {
                return m;
            }
            // Degenerate draws have probability ~0; resample.
        }
    }
}

/// Geodesic angle between two rotations:
/// `arccos((trace(aᵀ·b) - 1) / 2)`, with the argument clamped to `[-1, 1]`
/// so that roundoff near 0 and π cannot produce NaN.
pub fn geodesic_angle<T: Scalar>(a: &RotationMatrix<T>, b: &RotationMatrix<T>) -> T {
    let r = a.transpose().compose(b);
    let trace = r.m[0] + r.m[4] + r.m[8];
    let half = (trace - T::one()) / T::from_f64(2.0);
    let clamped = half.max(-T::one()).min(T::one());
    clamped.acos()
}

/// Rotation supervision distance: Frobenius norm of `pred·gtᵀ - I`.
/// Zero iff the rotations agree; for Rz(π) against identity it equals √8.
pub fn rotation_loss<T: Scalar>(pred: &RotationMatrix<T>, gt: &RotationMatrix<T>) -> T {
    let a = pred.compose(&gt.transpose());
    let id = RotationMatrix::identity();
    let mut acc = T::zero();
    for i in 0..9 {
        let d = a.m[i] - id.m[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// The 24 axis-aligned rotations (signed permutation matrices with
/// determinant +1), in a deterministic order.
pub fn axis_aligned_rotations<T: Scalar>() -> Vec<RotationMatrix<T>> {
    let mut out = Vec::with_capacity(24);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for perm in perms {
        for signs in 0..8u32 {
            let mut m = [T::zero(); 9];
            for (row, &col) in perm.iter().enumerate() {
                let s = if signs & (1 << row) != 0 { -T::one() } else { T::one() };
                m[row * 3 + col] = s;
            }
            let r = RotationMatrix::from_array(m);
            if (r.det() - T::one()).abs() < T::from_f64(0.5) {
                out.push(r);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn rot_z_quarter_turn_moves_x_to_y() {
        let r = RotationMatrix::<f64>::rot_z(FRAC_PI_2);
        let v = r.apply([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
        assert!(r.is_rotation(1e-12));
    }

    #[test]
    fn geodesic_quarter_turn_is_half_pi() {
        let a = RotationMatrix::<f64>::identity();
        let b = RotationMatrix::<f64>::rot_z(FRAC_PI_2);
        assert!((geodesic_angle(&a, &b) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn geodesic_clamps_at_extremes() {
        let a = RotationMatrix::<f64>::identity();
        assert_eq!(geodesic_angle(&a, &a), 0.0);
        let b = RotationMatrix::<f64>::rot_z(PI);
        assert!((geodesic_angle(&a, &b) - PI).abs() < 1e-12);
    }

    #[test]
    fn rotation_loss_half_turn_is_sqrt8() {
        let pred = RotationMatrix::<f64>::rot_z(PI);
        let gt = RotationMatrix::<f64>::identity();
        assert!((rotation_loss(&pred, &gt) - 8.0f64.sqrt()).abs() < 1e-9);
        assert!(rotation_loss(&gt, &gt) < 1e-12);
    }

    #[test]
    fn axis_aligned_set_has_24_distinct_rotations() {
        let rots = axis_aligned_rotations::<f64>();
        assert_eq!(rots.len(), 24);
        for r in &rots {
            assert!(r.is_rotation(1e-12));
        }
        for (i, a) in rots.iter().enumerate() {
            for b in &rots[i + 1..] {
                assert!(a.as_array() != b.as_array());
            }
        }
    }

    #[test]
    fn random_uniform_is_valid_and_seed_stable() {
        let mut rng = crate::rng::stream_rng(3, 0, 0);
        let r1 = RotationMatrix::<f64>::random_uniform(&mut rng);
        assert!(r1.is_rotation(1e-9));
        let mut rng2 = crate::rng::stream_rng(3, 0, 0);
        let r2 = RotationMatrix::<f64>::random_uniform(&mut rng2);
        assert_eq!(r1.as_array(), r2.as_array());
    }

    #[test]
    fn compose_transpose_is_inverse() {
        let mut rng = crate::rng::stream_rng(5, 0, 0);
        let r = RotationMatrix::<f64>::random_uniform(&mut rng);
        let p = r.compose(&r.transpose());
        for (i, &v) in p.as_array().iter().enumerate() {
            let expect = if i % 4 == 0 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
