//! Continuous 6D rotation parameterization and its differentiable ops.

use super::{RotationMatrix, DEGENERACY_EPS};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Two stacked 3-vectors; Gram–Schmidt turns them into the first two
/// columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6d<T: Scalar> {
    v: [T; 6],
}

impl<T: Scalar> Rot6d<T> {
    pub fn new(v: [T; 6]) -> Self {
        Rot6d { v }
    }

    pub fn as_array(&self) -> &[T; 6] {
        &self.v
    }

    /// First two columns of the matrix, column 0 then column 1.
    pub fn from_matrix(m: &RotationMatrix<T>) -> Self {
        let a = m.as_array();
        Rot6d { v: [a[0], a[3], a[6], a[1], a[4], a[7]] }
    }

    /// Gram–Schmidt to a rotation matrix. Errors when either the first
    /// vector is near zero or the pair is near parallel (conditioning
    /// threshold [`DEGENERACY_EPS`]).
    pub fn to_matrix(&self) -> Result<RotationMatrix<T>> {
        let v = &self.v;
        let a1 = [v[0], v[1], v[2]];
        let a2 = [v[3], v[4], v[5]];
        let n1 = norm3(a1);
        if n1.to_f64() < DEGENERACY_EPS {
            return Err(Error::numeric("rot6d: first vector is near zero".to_string()));
        }
        let b1 = scale3(a1, T::one() / n1);
        let d = dot3(a2, b1);
        let u2 = sub3(a2, scale3(b1, d));
        let n2 = norm3(u2);
        if n2.to_f64() < DEGENERACY_EPS {
            return Err(Error::numeric("rot6d: vectors are near parallel".to_string()));
        }
        let b2 = scale3(u2, T::one() / n2);
        let b3 = cross3(b1, b2);
        Ok(RotationMatrix::from_array([
            b1[0], b2[0], b3[0],
            b1[1], b2[1], b3[1],
            b1[2], b2[2], b3[2],
        ]))
    }
}

fn dot3<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm3<T: Scalar>(a: [T; 3]) -> T {
    dot3(a, a).sqrt()
}
fn scale3<T: Scalar>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn sub3<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add3<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn cross3<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Batched differentiable Gram–Schmidt: `[n, 6] -> [n, 9]` row-major
/// matrices. Degenerate rows map to the identity with zero gradient, and
/// are reported in the returned mask (`true` = valid).
///
/// The backward pass is derived by hand from the forward chain
/// `b1 = a1/|a1|`, `u2 = a2 - (a2·b1) b1`, `b2 = u2/|u2|`, `b3 = b1 x b2`:
/// for `c = a x b` the adjoints are `ga += b x gc`, `gb += gc x a`; for
/// `b = u/|u|` the adjoint is `gu = (gb - (gb·b) b)/|u|`; and for the
/// projection `u2` the adjoints are `ga2 = gu - (gu·b1) b1` and
/// `gb1 -= d·gu + (gu·b1) a2` with `d = a2·b1`.
pub fn rot6d_to_matrix_batch<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(Error::shape(format!("rot6d_to_matrix_batch: expected [n, 6], got {shape:?}")));
    }
    let n = shape[0];
    let x = input.data();
    let mut out = vec![T::zero(); n * 9];
    let mut valid = vec![true; n];
    // Saved forward intermediates for the backward closure.
    let mut saved = vec![T::zero(); n * 18];
    for i in 0..n {
        let v = &x[i * 6..i * 6 + 6];
        let r = Rot6d::new([v[0], v[1], v[2], v[3], v[4], v[5]]).to_matrix();
        match r {
            Ok(m) => {
                out[i * 9..i * 9 + 9].copy_from_slice(m.as_array());
                let a1 = [v[0], v[1], v[2]];
                let a2 = [v[3], v[4], v[5]];
                let n1 = norm3(a1);
                let b1 = scale3(a1, T::one() / n1);
                let d = dot3(a2, b1);
                let u2 = sub3(a2, scale3(b1, d));
                let n2 = norm3(u2);
                let b2 = scale3(u2, T::one() / n2);
                let s = &mut saved[i * 18..i * 18 + 18];
                s[0..3].copy_from_slice(&b1);
                s[3..6].copy_from_slice(&b2);
                s[6..9].copy_from_slice(&a2);
                s[9] = n1;
                s[10] = n2;
                s[11] = d;
            }
            Err(_) => {
                valid[i] = false;
                out[i * 9..i * 9 + 9].copy_from_slice(RotationMatrix::identity().as_array());
            }
        }
    }
    drop(x);

    let input_c = input.clone();
    let valid_c = valid.clone();
    let t = Tensor::from_op(vec![n, 9], out, vec![input.clone()], move |grad: &[T]| {
        let mut gx = vec![T::zero(); n * 6];
        for i in 0..n {
            if !valid_c[i] {
                continue;
            }
            let g = &grad[i * 9..i * 9 + 9];
            let s = &saved[i * 18..i * 18 + 18];
            let b1 = [s[0], s[1], s[2]];
            let b2 = [s[3], s[4], s[5]];
            let a2 = [s[6], s[7], s[8]];
            let (n1, n2, d) = (s[9], s[10], s[11]);
            // Column adjoints from the row-major 3x3 gradient.
            let gb1_out = [g[0], g[3], g[6]];
            let gb2_out = [g[1], g[4], g[7]];
            let gb3 = [g[2], g[5], g[8]];
            // b3 = b1 x b2.
            let mut gb1 = add3(gb1_out, cross3(b2, gb3));
            let gb2 = add3(gb2_out, cross3(gb3, b1));
            // b2 = u2/n2.
            let gu = scale3(sub3(gb2, scale3(b2, dot3(gb2, b2))), T::one() / n2);
            // u2 = a2 - d*b1 with d = a2·b1.
            let gu_b1 = dot3(gu, b1);
            let ga2 = sub3(gu, scale3(b1, gu_b1));
            gb1 = sub3(gb1, add3(scale3(gu, d), scale3(a2, gu_b1)));
            // b1 = a1/n1.
            let ga1 = scale3(sub3(gb1, scale3(b1, dot3(gb1, b1))), T::one() / n1);
            gx[i * 6..i * 6 + 3].copy_from_slice(&ga1);
            gx[i * 6 + 3..i * 6 + 6].copy_from_slice(&ga2);
        }
        input_c.accumulate_grad_if_tracked(&gx);
    });
    Ok((t, valid))
}

/// Mean Frobenius distance `‖pred_i·gt_iᵀ - I‖_F` over the rows selected
/// by `mask`. `preds` is `[n, 9]` row-major. Errors when the mask selects
/// no rows.
pub fn rotation_loss_batch<T: Scalar>(
    preds: &Tensor<T>,
    gts: &[RotationMatrix<T>],
    mask: &[bool],
) -> Result<Tensor<T>> {
    let shape = preds.shape();
    if shape.len() != 2 || shape[1] != 9 {
        return Err(Error::shape(format!("rotation_loss_batch: expected [n, 9], got {shape:?}")));
    }
    let n = shape[0];
    if gts.len() != n || mask.len() != n {
        return Err(Error::shape(format!(
            "rotation_loss_batch: {n} predictions but {} targets, {} mask entries",
            gts.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::numeric("rotation_loss_batch: mask selects no rows".to_string()));
    }
    let x = preds.data();
    let mut total = T::zero();
    // Per-row residual matrices and norms, saved for backward.
    let mut resid = vec![T::zero(); n * 9];
    let mut norms = vec![T::zero(); n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let p = RotationMatrix::from_array(x[i * 9..i * 9 + 9].try_into().unwrap());
        let a = p.compose(&gts[i].transpose());
        let id = RotationMatrix::<T>::identity();
        let mut acc = T::zero();
        for k in 0..9 {
            let e = a.as_array()[k] - id.as_array()[k];
            resid[i * 9 + k] = e;
            acc += e * e;
        }
        let f = acc.sqrt();
        norms[i] = f;
        total += f;
    }
    drop(x);
    let mean = total / T::from_usize(count);

    let preds_c = preds.clone();
    let gts_c: Vec<RotationMatrix<T>> = gts.to_vec();
    let mask_c = mask.to_vec();
    let inv_count = T::one() / T::from_usize(count);
    Ok(Tensor::from_op(vec![1], vec![mean], vec![preds.clone()], move |grad: &[T]| {
        let g0 = grad[0] * inv_count;
        let mut gx = vec![T::zero(); n * 9];
        for i in 0..n {
            if !mask_c[i] || norms[i].to_f64() < 1e-12 {
                continue;
            }
            // d‖P·Gᵀ - I‖_F / dP = ((P·Gᵀ - I)/‖·‖_F)·G.
            let e = RotationMatrix::from_array(resid[i * 9..i * 9 + 9].try_into().unwrap());
            let dp = e.compose(&gts_c[i]);
            for k in 0..9 {
                gx[i * 9 + k] = g0 * dp.as_array()[k] / norms[i];
            }
        }
        preds_c.accumulate_grad_if_tracked(&gx);
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_angle;
    use crate::tensor::{grad_check, Probe};
    use std::f64::consts::PI;

    #[test]
    fn roundtrip_matrix_to_6d_and_back() {
        let mut rng = crate::rng::stream_rng(11, 0, 0);
        for _ in 0..32 {
            let r = RotationMatrix::<f64>::random_uniform(&mut rng);
            let back = Rot6d::from_matrix(&r).to_matrix().unwrap();
            // acos conditioning puts an ~1e-8 floor on the measurable
            // angle between rotations that differ only by roundoff.
            let ang = geodesic_angle(&r, &back);
            assert!(ang < 1e-6, "roundtrip angle {ang}");
        }
    }

    #[test]
    fn gram_schmidt_output_is_rotation_for_generic_input() {
        let mut rng = crate::rng::stream_rng(12, 0, 0);
        for _ in 0..16 {
            let r = RotationMatrix::<f64>::random_uniform(&mut rng);
            assert!(r.is_rotation(1e-9));
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(Rot6d::new([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).to_matrix().is_err());
        assert!(Rot6d::new([1.0, 0.0, 0.0, 2.0, 1e-9, 0.0]).to_matrix().is_err());
    }

    #[test]
    fn batch_matches_scalar_path_and_masks_degenerates() {
        let rows: Vec<f64> = vec![
            1.0, 0.1, -0.2, 0.3, 2.0, 0.5, // generic
            0.0, 0.0, 0.0, 1.0, 0.0, 0.0, // degenerate
        ];
        let t = Tensor::from_vec(&[2, 6], rows.clone(), false);
        let (m, valid) = rot6d_to_matrix_batch(&t).unwrap();
        assert_eq!(valid, vec![true, false]);
        let scalar = Rot6d::new(rows[0..6].try_into().unwrap()).to_matrix().unwrap();
        let data = m.data();
        for k in 0..9 {
            assert!((data[k] - scalar.as_array()[k]).abs() < 1e-12f64);
        }
        for k in 9..18 {
            let expect = if (k - 9) % 4 == 0 { 1.0 } else { 0.0 };
            assert_eq!(data[k], expect);
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let x0: Vec<f64> = vec![0.9, 0.2, -0.4, 0.1, 1.2, 0.6, -0.5, 0.8, 0.3, 1.1, -0.2, 0.7];
        let weights: Vec<f64> = (0..18).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let w = weights.clone();
        let report = grad_check(
            &move |x| {
                let (m, _) = rot6d_to_matrix_batch(x)?;
                let wt = Tensor::from_vec(&[2, 9], w.clone(), false);
                Ok(m.mul(&wt)?.sum())
            },
            &[2, 6],
            &x0,
            Probe::All,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn degenerate_row_gets_zero_gradient() {
        let rows = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let t = Tensor::from_vec(&[2, 6], rows, true);
        let (m, valid) = rot6d_to_matrix_batch(&t).unwrap();
        assert_eq!(valid, vec![true, false]);
        // Weighted sum: the plain entry sum has zero gradient at the
        // identity frame (its tangent matrices are skew-symmetric).
        let w: Vec<f64> = (0..18).map(|i| i as f64 + 1.0).collect();
        m.mul(&Tensor::from_vec(&[2, 9], w, false)).unwrap().sum().backward().unwrap();
        let g = t.grad();
        assert!(g[0..6].iter().any(|&v| v != 0.0));
        assert!(g[6..12].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_batch_fixture_and_gradient() {
        // Row 0: Rz(pi) vs identity -> sqrt(8); row 1 masked out.
        let rz: Vec<f64> = RotationMatrix::<f64>::rot_z(PI).as_array().to_vec();
        let mut rows = rz.clone();
        rows.extend(RotationMatrix::<f64>::identity().as_array());
        let preds = Tensor::from_vec(&[2, 9], rows.clone(), false);
        let gts = vec![RotationMatrix::identity(), RotationMatrix::rot_z(1.0)];
        let loss = rotation_loss_batch(&preds, &gts, &[true, false]).unwrap();
        assert!((loss.item() - 8.0f64.sqrt()).abs() < 1e-9);

        let gts2 = gts.clone();
        let report = grad_check(
            &move |x| rotation_loss_batch(x, &gts2, &[true, true]),
            &[2, 9],
            &rows,
            Probe::All,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn loss_batch_rejects_empty_mask() {
        let preds = Tensor::from_vec(&[1, 9], RotationMatrix::<f64>::identity().as_array().to_vec(), false);
        assert!(rotation_loss_batch(&preds, &[RotationMatrix::identity()], &[false]).is_err());
    }
}
