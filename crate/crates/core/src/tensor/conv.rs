//! Convolutions: 2D/3D, grouped, strided, and transposed, plus average
//! pooling.
//!
//! Everything is built on three volume kernels over a shared geometry
//! descriptor — correlation ([`conv_fwd`]), its exact linear adjoint
//! ([`conv_adjoint`]), and the weight gradient ([`conv_wgrad`]):
//!
//! * `conv3d`/`conv2d` forward is `conv_fwd`; input gradient is
//!   `conv_adjoint`; weight gradient is `conv_wgrad`.
//! * `conv_transpose3d`/`conv_transpose2d` forward is `conv_adjoint` run on
//!   the mirrored geometry, which makes the transposed conv the exact
//!   adjoint of the matching conv by construction.
//!
//! 2D ops reuse the 3D kernels with a unit depth axis. All three kernels
//! write each output element from exactly one rayon task with a fixed
//! inner summation order, so results are bit-identical regardless of the
//! thread count.
//!
//! Kernels are plain loops — no im2col, no FFT — accumulating in the
//! element type.

use super::Tensor;
use crate::{Error, Result, Scalar};
use rayon::prelude::*;

/// Geometry of one convolution: batch, channel split, per-axis kernel,
/// stride, padding, and the resolved input/output extents.
#[derive(Clone, Copy, Debug)]
struct Geom {
    b: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Geom {
    fn icpg(&self) -> usize {
        self.cin / self.groups
    }
    fn ocpg(&self) -> usize {
        self.cout / self.groups
    }
    fn in_sp(&self) -> usize {
        self.ind.iter().product()
    }
    fn out_sp(&self) -> usize {
        self.outd.iter().product()
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
}

/// Output extent of a (non-transposed) convolution along one axis.
fn conv_out_extent(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::shape(format!(
            "conv: kernel {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Range of output indices `o` with `o*s - p + koff` inside `[0, input)`.
fn out_range(input: usize, out: usize, k_off: usize, s: usize, p: usize) -> (usize, usize) {
    let lo_num = p as i64 - k_off as i64;
    let lo = if lo_num <= 0 { 0 } else { ((lo_num as usize) + s - 1) / s };
    let hi_num = input as i64 - 1 + p as i64 - k_off as i64;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = std::cmp::min(out as i64 - 1, hi_num / s as i64);
    if hi < lo as i64 {
        (1, 0)
    } else {
        (lo, hi as usize)
    }
}

/// out[b, oc, zo, yo, xo] (+)= sum_{icg, k} x[b, ic, zo*s - p + kz, ...] * w[oc, icg, k]
fn conv_fwd<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (icpg, ocpg) = (g.icpg(), g.ocpg());
    let (isp, osp, kv) = (g.in_sp(), g.out_sp(), g.kvol());
    let [ind_d, ind_h, ind_w] = g.ind;
    let [od, oh, ow] = g.outd;
    let [kd, kh, kw] = g.k;
    let [sd, sh, sw] = g.s;
    let [pd, ph, pw] = g.p;
    out.par_chunks_mut(osp).enumerate().for_each(|(chunk, oslab)| {
        let b = chunk / g.cout;
        let oc = chunk % g.cout;
        let grp = oc / ocpg;
        if let Some(bias) = bias {
            oslab.fill(bias[oc]);
        }
        for icg in 0..icpg {
            let ic = grp * icpg + icg;
            let xin = &x[(b * g.cin + ic) * isp..(b * g.cin + ic + 1) * isp];
            let wbase = (oc * icpg + icg) * kv;
            for kz in 0..kd {
                let (zo_lo, zo_hi) = out_range(ind_d, od, kz, sd, pd);
                for ky in 0..kh {
                    let (yo_lo, yo_hi) = out_range(ind_h, oh, ky, sh, ph);
                    for kx in 0..kw {
                        let wv = w[wbase + (kz * kh + ky) * kw + kx];
                        let (xo_lo, xo_hi) = out_range(ind_w, ow, kx, sw, pw);
                        if xo_lo > xo_hi || yo_lo > yo_hi || zo_lo > zo_hi {
                            continue;
                        }
                        for zo in zo_lo..=zo_hi {
                            let zi = zo * sd + kz - pd;
                            for yo in yo_lo..=yo_hi {
                                let yi = yo * sh + ky - ph;
                                let orow = &mut oslab[(zo * oh + yo) * ow..][xo_lo..=xo_hi];
                                let xrow0 = (zi * ind_h + yi) * ind_w + (xo_lo * sw + kx - pw);
                                if sw == 1 {
                                    let xrow = &xin[xrow0..xrow0 + orow.len()];
                                    for (o, &v) in orow.iter_mut().zip(xrow) {
                                        *o += wv * v;
                                    }
                                } else {
                                    let mut xi = xrow0;
                                    for o in orow.iter_mut() {
                                        *o += wv * xin[xi];
                                        xi += sw;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Exact adjoint of [`conv_fwd`] in the weights:
/// x[b, ic, zi, yi, xi] (+)= sum_{oc in grp, k: zo=(zi+p-kz)/s valid} y[b, oc, zo, ...] * w[oc, icg, k]
///
/// Written in gather form — each input cell sums its own contributions —
/// so parallel execution stays deterministic.
fn conv_adjoint<T: Scalar>(g: &Geom, y: &[T], w: &[T], xout: &mut [T]) {
    let (icpg, ocpg) = (g.icpg(), g.ocpg());
    let (isp, osp, kv) = (g.in_sp(), g.out_sp(), g.kvol());
    let [ind_d, ind_h, ind_w] = g.ind;
    let [od, oh, ow] = g.outd;
    let [kd, kh, kw] = g.k;
    let [sd, sh, sw] = g.s;
    let [pd, ph, pw] = g.p;
    // o = (i + p - k) / s when divisible and in range.
    let axis_hits = |i: usize, input_k: usize, s: usize, p: usize, o_max: usize| {
        let mut hits: Vec<(usize, usize)> = Vec::with_capacity(input_k);
        for k in 0..input_k {
            let num = i as i64 + p as i64 - k as i64;
            if num < 0 || num % s as i64 != 0 {
                continue;
            }
            let o = (num / s as i64) as usize;
            if o < o_max {
                hits.push((k, o));
            }
        }
        hits
    };
    xout.par_chunks_mut(isp).enumerate().for_each(|(chunk, xslab)| {
        let b = chunk / g.cin;
        let ic = chunk % g.cin;
        let grp = ic / icpg;
        let icg = ic % icpg;
        for zi in 0..ind_d {
            let z_hits = axis_hits(zi, kd, sd, pd, od);
            for yi in 0..ind_h {
                let y_hits = axis_hits(yi, kh, sh, ph, oh);
                for xi in 0..ind_w {
                    let x_hits = axis_hits(xi, kw, sw, pw, ow);
                    let mut acc = T::zero();
                    for oc_g in 0..ocpg {
                        let oc = grp * ocpg + oc_g;
                        let ybase = (b * g.cout + oc) * osp;
                        let wbase = (oc * icpg + icg) * kv;
                        for &(kz, zo) in &z_hits {
                            for &(ky, yo) in &y_hits {
                                let yrow = ybase + (zo * oh + yo) * ow;
                                let wrow = wbase + (kz * kh + ky) * kw;
                                for &(kx, xo) in &x_hits {
                                    acc += y[yrow + xo] * w[wrow + kx];
                                }
                            }
                        }
                    }
                    xslab[(zi * ind_h + yi) * ind_w + xi] = acc;
                }
            }
        }
    });
}

/// dw[oc, icg, k] = sum_{b, zo, yo, xo} y[b, oc, zo, ...] * x[b, ic, zo*s - p + kz, ...]
fn conv_wgrad<T: Scalar>(g: &Geom, x: &[T], y: &[T], dw: &mut [T]) {
    let (icpg, ocpg) = (g.icpg(), g.ocpg());
    let (isp, osp, kv) = (g.in_sp(), g.out_sp(), g.kvol());
    let [ind_d, ind_h, ind_w] = g.ind;
    let [od, oh, ow] = g.outd;
    let [kd, kh, kw] = g.k;
    let [sd, sh, sw] = g.s;
    let [pd, ph, pw] = g.p;
    dw.par_chunks_mut(icpg * kv).enumerate().for_each(|(oc, wslab)| {
        let grp = oc / ocpg;
        for b in 0..g.b {
            let ybase = (b * g.cout + oc) * osp;
            for icg in 0..icpg {
                let ic = grp * icpg + icg;
                let xbase = (b * g.cin + ic) * isp;
                for kz in 0..kd {
                    let (zo_lo, zo_hi) = out_range(ind_d, od, kz, sd, pd);
                    for ky in 0..kh {
                        let (yo_lo, yo_hi) = out_range(ind_h, oh, ky, sh, ph);
                        for kx in 0..kw {
                            let (xo_lo, xo_hi) = out_range(ind_w, ow, kx, sw, pw);
                            if xo_lo > xo_hi || yo_lo > yo_hi || zo_lo > zo_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for zo in zo_lo..=zo_hi {
                                let zi = zo * sd + kz - pd;
                                for yo in yo_lo..=yo_hi {
                                    let yi = yo * sh + ky - ph;
                                    let yrow = &y[ybase + (zo * oh + yo) * ow..][xo_lo..=xo_hi];
                                    let x0 = xbase + (zi * ind_h + yi) * ind_w + (xo_lo * sw + kx - pw);
                                    if sw == 1 {
                                        let xrow = &x[x0..x0 + yrow.len()];
                                        for (&yv, &xv) in yrow.iter().zip(xrow) {
                                            acc += yv * xv;
                                        }
                                    } else {
                                        let mut xi = x0;
                                        for &yv in yrow {
                                            acc += yv * x[xi];
                                            xi += sw;
                                        }
                                    }
                                }
                            }
                            wslab[icg * kv + (kz * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    });
}

fn bias_grad<T: Scalar>(cout: usize, osp: usize, b: usize, g: &[T]) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for bi in 0..b {
        for (oc, dbv) in db.iter_mut().enumerate() {
            let base = (bi * cout + oc) * osp;
            for &gv in &g[base..base + osp] {
                *dbv += gv;
            }
        }
    }
    db
}

// ── Shared validation / node assembly ──────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn make_geom(
    op: &str,
    input_shape: &[usize],
    cin_w: usize,
    cout: usize,
    groups: usize,
    spatial: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
) -> Result<Geom> {
    let b = input_shape[0];
    let cin = input_shape[1];
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::shape(format!(
            "{op}: groups {groups} must divide input channels {cin} and output channels {cout}"
        )));
    }
    if cin_w != cin / groups {
        return Err(Error::shape(format!(
            "{op}: weight expects {cin_w} channels per group, input supplies {}",
            cin / groups
        )));
    }
    let outd = [
        conv_out_extent(spatial[0], k[0], s[0], p[0])?,
        conv_out_extent(spatial[1], k[1], s[1], p[1])?,
        conv_out_extent(spatial[2], k[2], s[2], p[2])?,
    ];
    Ok(Geom { b, cin, cout, groups, ind: spatial, outd, k, s, p })
}

/// Builds the autodiff node for a direct convolution with resolved geometry.
fn conv_node<T: Scalar>(
    geom: Geom,
    out_shape: Vec<usize>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let mut out = vec![T::zero(); geom.b * geom.cout * geom.out_sp()];
    conv_fwd(&geom, &input.data(), &weight.data(), bias.map(|b| b.to_vec()).as_deref(), &mut out);
    let (px, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g: &[T]| {
            if px.requires_grad() {
                let mut dx = vec![T::zero(); px.numel()];
                conv_adjoint(&geom, g, &pw.data(), &mut dx);
                px.accumulate_grad(&dx);
            }
            if pw.requires_grad() {
                let mut dw = vec![T::zero(); pw.numel()];
                conv_wgrad(&geom, &px.data(), g, &mut dw);
                pw.accumulate_grad(&dw);
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    pb.accumulate_grad(&bias_grad(geom.cout, geom.out_sp(), geom.b, g));
                }
            }
        }),
    )
}

/// Builds the autodiff node for a transposed convolution: the forward pass
/// is the adjoint of the mirrored direct convolution, so `geom` here
/// describes that mirrored conv (its "input" is the transposed conv's
/// output).
fn tconv_node<T: Scalar>(
    geom: Geom,
    out_shape: Vec<usize>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let mut out = vec![T::zero(); geom.b * geom.cin * geom.in_sp()];
    conv_adjoint(&geom, &input.data(), &weight.data(), &mut out);
    if let Some(bias) = bias {
        let bvals = bias.to_vec();
        let isp = geom.in_sp();
        for bi in 0..geom.b {
            for (c, &bv) in bvals.iter().enumerate() {
                let base = (bi * geom.cin + c) * isp;
                for v in &mut out[base..base + isp] {
                    *v += bv;
                }
            }
        }
    }
    let (px, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g: &[T]| {
            if px.requires_grad() {
                let mut dx = vec![T::zero(); px.numel()];
                conv_fwd(&geom, g, &pw.data(), None, &mut dx);
                px.accumulate_grad(&dx);
            }
            if pw.requires_grad() {
                let mut dw = vec![T::zero(); pw.numel()];
                conv_wgrad(&geom, g, &px.data(), &mut dw);
                pw.accumulate_grad(&dw);
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    // Bias adds once per output cell of the transposed conv.
                    let isp = geom.in_sp();
                    let mut db = vec![T::zero(); geom.cin];
                    for bi in 0..geom.b {
                        for (c, dbv) in db.iter_mut().enumerate() {
                            let base = (bi * geom.cin + c) * isp;
                            for &gv in &g[base..base + isp] {
                                *dbv += gv;
                            }
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            }
        }),
    )
}

// ── Public ops ──────────────────────────────────────────────────────────

/// 3D convolution: input `[B, C, D, H, W]`, weight `[O, C/groups, 3, 3, 3]`,
/// stride 1. With `padding = 1` the spatial extents are preserved, which is
/// how every voxel-pipeline conv here is configured.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 5 || weight.shape().len() != 5 {
        return Err(Error::shape(format!(
            "conv3d: expected 5-D input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let ws = weight.shape().to_vec();
    let is = input.shape().to_vec();
    let geom = make_geom(
        "conv3d",
        &is,
        ws[1],
        ws[0],
        groups,
        [is[2], is[3], is[4]],
        [ws[2], ws[3], ws[4]],
        [1, 1, 1],
        [padding; 3],
    )?;
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape(format!(
                "conv3d: bias shape {:?} does not match {} output channels",
                b.shape(),
                ws[0]
            )));
        }
    }
    let out_shape = vec![geom.b, geom.cout, geom.outd[0], geom.outd[1], geom.outd[2]];
    Ok(conv_node(geom, out_shape, input, weight, bias))
}

/// 2D convolution: input `[B, C, H, W]`, weight `[O, C/groups, k, k]`,
/// odd `k`, arbitrary stride/padding/groups.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::shape(format!(
            "conv2d: expected 4-D input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let ws = weight.shape().to_vec();
    if ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d: kernel must be square with odd extent, got {}x{}",
            ws[2], ws[3]
        )));
    }
    let is = input.shape().to_vec();
    let geom = make_geom(
        "conv2d",
        &is,
        ws[1],
        ws[0],
        groups,
        [1, is[2], is[3]],
        [1, ws[2], ws[3]],
        [1, stride, stride],
        [0, padding, padding],
    )?;
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                ws[0]
            )));
        }
    }
    let out_shape = vec![geom.b, geom.cout, geom.outd[1], geom.outd[2]];
    Ok(conv_node(geom, out_shape, input, weight, bias))
}

/// Transposed 3D convolution: input `[B, C, D, H, W]`, weight
/// `[C, O, k, k, k]`. Output extent per axis is
/// `(in - 1) * stride - 2 * padding + k + output_padding`.
///
/// For weights shared with a stride-1 `conv3d` this is its exact linear
/// adjoint (same kernel, mirrored geometry).
pub fn conv_transpose3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 5 || weight.shape().len() != 5 {
        return Err(Error::shape(format!(
            "conv_transpose3d: expected 5-D input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if output_padding >= stride {
        return Err(Error::shape(format!(
            "conv_transpose3d: output_padding {output_padding} must be < stride {stride}"
        )));
    }
    let ws = weight.shape().to_vec();
    let is = input.shape().to_vec();
    if ws[0] != is[1] {
        return Err(Error::shape(format!(
            "conv_transpose3d: weight expects {} input channels, input has {}",
            ws[0], is[1]
        )));
    }
    let ext = |i: usize, k: usize| (i - 1) * stride + k + output_padding - 2 * padding;
    let outd = [ext(is[2], ws[2]), ext(is[3], ws[3]), ext(is[4], ws[4])];
    // Mirrored geometry: the transposed conv's output plays the conv input.
    let geom = Geom {
        b: is[0],
        cin: ws[1],
        cout: is[1],
        groups: 1,
        ind: outd,
        outd: [is[2], is[3], is[4]],
        k: [ws[2], ws[3], ws[4]],
        s: [stride; 3],
        p: [padding; 3],
    };
    if let Some(b) = bias {
        if b.shape() != [ws[1]] {
            return Err(Error::shape(format!(
                "conv_transpose3d: bias shape {:?} does not match {} output channels",
                b.shape(),
                ws[1]
            )));
        }
    }
    let out_shape = vec![is[0], ws[1], outd[0], outd[1], outd[2]];
    Ok(tconv_node(geom, out_shape, input, weight, bias))
}

/// Transposed 2D convolution: input `[B, C, H, W]`, weight `[C, O, k, k]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::shape(format!(
            "conv_transpose2d: expected 4-D input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if output_padding >= stride {
        return Err(Error::shape(format!(
            "conv_transpose2d: output_padding {output_padding} must be < stride {stride}"
        )));
    }
    let ws = weight.shape().to_vec();
    let is = input.shape().to_vec();
    if ws[0] != is[1] {
        return Err(Error::shape(format!(
            "conv_transpose2d: weight expects {} input channels, input has {}",
            ws[0], is[1]
        )));
    }
    let ext = |i: usize, k: usize| (i - 1) * stride + k + output_padding - 2 * padding;
    let outd = [1, ext(is[2], ws[2]), ext(is[3], ws[3])];
    let geom = Geom {
        b: is[0],
        cin: ws[1],
        cout: is[1],
        groups: 1,
        ind: outd,
        outd: [1, is[2], is[3]],
        k: [1, ws[2], ws[3]],
        s: [1, stride, stride],
        p: [0, padding, padding],
    };
    if let Some(b) = bias {
        if b.shape() != [ws[1]] {
            return Err(Error::shape(format!(
                "conv_transpose2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                ws[1]
            )));
        }
    }
    let out_shape = vec![is[0], ws[1], outd[1], outd[2]];
    Ok(tconv_node(geom, out_shape, input, weight, bias))
}

/// Average pooling over non-overlapping 2x2x2 windows (kernel = stride = 2,
/// floor semantics: trailing cells that do not fill a window are dropped
/// and receive zero gradient).
pub fn avg_pool3d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape().len() != 5 {
        return Err(Error::shape(format!(
            "avg_pool3d: expected [B, C, D, H, W], got {:?}",
            input.shape()
        )));
    }
    let [b, c, d, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
        input.shape()[4],
    ];
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    if od == 0 || oh == 0 || ow == 0 {
        return Err(Error::shape(format!(
            "avg_pool3d: spatial extents {:?} too small for a 2x2x2 window",
            &input.shape()[2..]
        )));
    }
    let inv8 = T::one() / T::from_f64(8.0);
    let mut out = vec![T::zero(); b * c * od * oh * ow];
    {
        let x = input.data();
        for bc in 0..b * c {
            let xb = &x[bc * d * h * w..];
            let ob = &mut out[bc * od * oh * ow..(bc + 1) * od * oh * ow];
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = T::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += xb[((2 * zo + dz) * h + 2 * yo + dy) * w + 2 * xo + dx];
                                }
                            }
                        }
                        ob[(zo * oh + yo) * ow + xo] = acc * inv8;
                    }
                }
            }
        }
    }
    let p = input.clone();
    let total = input.numel();
    Ok(Tensor::from_op(
        vec![b, c, od, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g: &[T]| {
            if p.requires_grad() {
                let mut dx = vec![T::zero(); total];
                for bc in 0..b * c {
                    let gb = &g[bc * od * oh * ow..];
                    let db = &mut dx[bc * d * h * w..(bc + 1) * d * h * w];
                    for zo in 0..od {
                        for yo in 0..oh {
                            for xo in 0..ow {
                                let gv = gb[(zo * oh + yo) * ow + xo] * inv8;
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        for dx2 in 0..2 {
                                            db[((2 * zo + dz) * h + 2 * yo + dy) * w + 2 * xo + dx2] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                p.accumulate_grad(&dx);
            }
        }),
    ))
}
