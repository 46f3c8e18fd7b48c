//! Rotation warp grids and differentiable trilinear resampling.

use super::RotationMatrix;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};
use rayon::prelude::*;

/// Normalized sample coordinates for one resampling pass.
#[derive(Clone, Debug)]
pub struct WarpGrid<T: Scalar> {
    /// Output extents `(d, h, w)`.
    pub dims: [usize; 3],
    /// Sample coordinate `(x, y, z)` in `[-1, 1]` per output cell,
    /// row-major over `(d, h, w)`.
    pub coords: Vec<[T; 3]>,
}

/// Center of cell `i` out of `n` on a `[-1, 1]` axis.
pub fn cell_center<T: Scalar>(i: usize, n: usize) -> T {
    T::from_usize(2 * i + 1) / T::from_usize(n) - T::one()
}

/// Grid that samples the input at `rᵀ·p` for every output cell center `p`,
/// so that the sampled content appears rotated by `r`.
pub fn make_warp_grid<T: Scalar>(r: &RotationMatrix<T>, dims: [usize; 3]) -> WarpGrid<T> {
    let [d, h, w] = dims;
    let mut coords = Vec::with_capacity(d * h * w);
    for zi in 0..d {
        let pz = cell_center(zi, d);
        for yi in 0..h {
            let py = cell_center(yi, h);
            for xi in 0..w {
                let px = cell_center(xi, w);
                coords.push(r.apply_transpose([px, py, pz]));
            }
        }
    }
    WarpGrid { dims, coords }
}

/// One axis of a trilinear tap: low index, and the fractional weight that
/// goes to `index + 1`. Index is `i64` because samples can fall one cell
/// outside the volume.
fn axis_tap<T: Scalar>(coord: T, n: usize) -> (i64, T) {
    let nf = T::from_usize(n);
    let f = (coord + T::one()) * nf / T::from_f64(2.0) - T::from_f64(0.5);
    // Snap to the nearest cell center when the distance is at roundoff
    // scale. This makes identity and axis-aligned warps exact in floating
    // point while being a no-op for any geometrically meaningful offset.
    let k = f.round();
    let tol = T::from_f64(32.0) * T::epsilon() * f.abs().max(T::one());
    let f = if (f - k).abs() <= tol { k } else { f };
    let i0 = f.floor();
    (i0.to_f64() as i64, f - i0)
}

/// Trilinear resampling of `v` (`[b, c, d, h, w]`) at the grid's sample
/// coordinates; output is `[b, c, gd, gh, gw]`. Out-of-range taps read
/// zero. Differentiable with respect to `v` only: the grid enters as a
/// constant, so predicted rotations receive no gradient through the warp.
pub fn grid_sample_trilinear<T: Scalar>(v: &Tensor<T>, grid: &WarpGrid<T>) -> Result<Tensor<T>> {
    let shape = v.shape();
    if shape.len() != 5 {
        return Err(Error::shape(format!(
            "grid_sample_trilinear: expected [b, c, d, h, w], got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let (id, ih, iw) = (shape[2], shape[3], shape[4]);
    let [gd, gh, gw] = grid.dims;
    let out_spatial = gd * gh * gw;
    if grid.coords.len() != out_spatial {
        return Err(Error::shape(format!(
            "grid_sample_trilinear: grid has {} coords for dims {:?}",
            grid.coords.len(),
            grid.dims
        )));
    }
    let in_spatial = id * ih * iw;

    // Taps are shared across every (b, c) slab: 8 (flat index, weight)
    // pairs per output cell, out-of-range corners carrying weight zero.
    let mut taps: Vec<[(u32, T); 8]> = Vec::with_capacity(out_spatial);
    for s in &grid.coords {
        let (x0, fx) = axis_tap(s[0], iw);
        let (y0, fy) = axis_tap(s[1], ih);
        let (z0, fz) = axis_tap(s[2], id);
        let xs = [(x0, T::one() - fx), (x0 + 1, fx)];
        let ys = [(y0, T::one() - fy), (y0 + 1, fy)];
        let zs = [(z0, T::one() - fz), (z0 + 1, fz)];
        let mut cell = [(0u32, T::zero()); 8];
        let mut k = 0;
        for (zi, wz) in zs {
            for (yi, wy) in ys {
                for (xi, wx) in xs {
                    let weight = wx * wy * wz;
                    let inside = xi >= 0
                        && (xi as usize) < iw
                        && yi >= 0
                        && (yi as usize) < ih
                        && zi >= 0
                        && (zi as usize) < id;
                    if inside && weight != T::zero() {
                        let flat = (zi as usize * ih + yi as usize) * iw + xi as usize;
                        cell[k] = (flat as u32, weight);
                    }
                    k += 1;
                }
            }
        }
        taps.push(cell);
    }

    let data = v.data();
    let input: &[T] = &data;
    let mut out = vec![T::zero(); b * c * out_spatial];
    out.par_chunks_mut(out_spatial).enumerate().for_each(|(slab, out_slab)| {
        let src = &input[slab * in_spatial..(slab + 1) * in_spatial];
        for (cell, o) in taps.iter().zip(out_slab.iter_mut()) {
            let mut acc = T::zero();
            for &(idx, weight) in cell {
                if weight != T::zero() {
                    acc += src[idx as usize] * weight;
                }
            }
            *o = acc;
        }
    });
    drop(data);

    let v_c = v.clone();
    let numel = b * c * in_spatial;
    Ok(Tensor::from_op(
        vec![b, c, gd, gh, gw],
        out,
        vec![v.clone()],
        move |grad: &[T]| {
            let mut gx = vec![T::zero(); numel];
            gx.par_chunks_mut(in_spatial).enumerate().for_each(|(slab, gx_slab)| {
                let go = &grad[slab * out_spatial..(slab + 1) * out_spatial];
                for (cell, &g) in taps.iter().zip(go.iter()) {
                    if g == T::zero() {
                        continue;
                    }
                    for &(idx, weight) in cell {
                        if weight != T::zero() {
                            gx_slab[idx as usize] += weight * g;
                        }
                    }
                }
            });
            v_c.accumulate_grad_if_tracked(&gx);
        },
    ))
}

/// Rotate the content of `v` (`[b, c, d, h, w]`) by `r`, resampling onto
/// the same lattice.
pub fn rotate_voxel<T: Scalar>(v: &Tensor<T>, r: &RotationMatrix<T>) -> Result<Tensor<T>> {
    let shape = v.shape();
    if shape.len() != 5 {
        return Err(Error::shape(format!("rotate_voxel: expected [b, c, d, h, w], got {shape:?}")));
    }
    let grid = make_warp_grid(r, [shape[2], shape[3], shape[4]]);
    grid_sample_trilinear(v, &grid)
}
