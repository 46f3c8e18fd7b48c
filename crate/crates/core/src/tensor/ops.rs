//! Elementwise ops, reductions, shape ops, dense layers, and pooling.
//!
//! Every op returns a fresh node whose backward closure accumulates into
//! the parents. Ops that can be called with inconsistent shapes return
//! `Err(Error::Shape)` rather than panicking.

use super::{spatial_numel, Tensor};
use crate::{Error, Result, Scalar};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[T]| {
                pa.accumulate_grad_if_tracked(g);
                pb.accumulate_grad_if_tracked(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[T]| {
                pa.accumulate_grad_if_tracked(g);
                if pb.requires_grad() {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[T]| {
                if pa.requires_grad() {
                    let da: Vec<T> = g.iter().zip(pb.data().iter()).map(|(&g, &b)| g * b).collect();
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let db: Vec<T> = g.iter().zip(pa.data().iter()).map(|(&g, &a)| g * a).collect();
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Elementwise maximum; the gradient routes to whichever input is
    /// larger (ties go to `self`).
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("maximum", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| if a >= b { a } else { b })
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[T]| {
                let a = pa.data().clone();
                let b = pb.data().clone();
                if pa.requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(a.iter().zip(&b))
                        .map(|(&g, (&a, &b))| if a >= b { g } else { T::zero() })
                        .collect();
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let db: Vec<T> = g
                        .iter()
                        .zip(a.iter().zip(&b))
                        .map(|(&g, (&a, &b))| if a >= b { T::zero() } else { g })
                        .collect();
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let d: Vec<T> = g.iter().map(|&x| x * c).collect();
                    p.accumulate_grad(&d);
                }
            }),
        )
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&a| a + c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| p.accumulate_grad_if_tracked(g)),
        )
    }

    /// Rectified linear unit; subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let d: Vec<T> = g
                        .iter()
                        .zip(p.data().iter())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    p.accumulate_grad(&d);
                }
            }),
        )
    }

    /// Leaky rectified linear unit with the given negative slope; the
    /// subgradient at exactly 0 uses the negative slope branch times 0
    /// input, i.e. contributes `slope * g`.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * slope })
            .collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let d: Vec<T> = g
                        .iter()
                        .zip(p.data().iter())
                        .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                        .collect();
                    p.accumulate_grad(&d);
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let one = T::one();
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&a| {
                // Stable in both tails.
                if a >= T::zero() {
                    one / (one + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (one + e)
                }
            })
            .collect();
        let p = self.clone();
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let d: Vec<T> = g
                        .iter()
                        .zip(saved.iter())
                        .map(|(&g, &s)| g * s * (one - s))
                        .collect();
                    p.accumulate_grad(&d);
                }
            }),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    p.accumulate_grad(&vec![g[0]; n]);
                }
            }),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::one() / T::from_f64(n as f64);
        let s: T = self.data().iter().copied().sum();
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s * inv],
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    p.accumulate_grad(&vec![g[0] * inv; n]);
                }
            }),
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} ({} elements) as {:?} ({n} elements)",
                self.shape(),
                self.numel(),
                shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g: &[T]| p.accumulate_grad_if_tracked(g)),
        ))
    }

    /// Collapse all dims after the first into one: `[B, ...] -> [B, rest]`.
    pub fn flatten(&self) -> Tensor<T> {
        let b = self.shape()[0];
        let rest = self.numel() / b;
        self.reshape(&[b, rest]).expect("flatten preserves numel")
    }

    /// Tile a `[1, ...]` tensor `n` times along the batch dim.
    pub fn repeat_batch(&self, n: usize) -> Result<Tensor<T>> {
        if self.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "repeat_batch: expected leading dim 1, got {:?}",
                self.shape()
            )));
        }
        let per = self.numel();
        let mut data = Vec::with_capacity(per * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data());
        }
        let mut shape = self.shape().to_vec();
        shape[0] = n;
        let p = self.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let mut d = vec![T::zero(); per];
                    for copy in g.chunks(per) {
                        for (di, &gi) in d.iter_mut().zip(copy) {
                            *di += gi;
                        }
                    }
                    p.accumulate_grad(&d);
                }
            }),
        ))
    }

    /// Select rows (dim-0 slices) by index; duplicates allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let b = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} out of range for leading dim {b}"
            )));
        }
        let row = self.numel() / b;
        let mut data = Vec::with_capacity(indices.len() * row);
        {
            let src = self.data();
            for &i in indices {
                data.extend_from_slice(&src[i * row..(i + 1) * row]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let p = self.clone();
        let idx = indices.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let mut d = vec![T::zero(); total];
                    for (k, &i) in idx.iter().enumerate() {
                        for (di, &gi) in d[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                            *di += gi;
                        }
                    }
                    p.accumulate_grad(&d);
                }
            }),
        ))
    }

    /// Concatenate along dim 0; all trailing dims must agree.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_batch: empty input list".to_string()));
        }
        let tail = &parts[0].shape()[1..];
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape(format!(
                    "concat_batch: trailing dims differ: {:?} vs {:?}",
                    &p.shape()[1..],
                    tail
                )));
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor<T>> = parts.to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            owned.clone(),
            Box::new(move |g: &[T]| {
                let mut off = 0;
                for p in &owned {
                    let n = p.numel();
                    if p.requires_grad() {
                        p.accumulate_grad(&g[off..off + n]);
                    }
                    off += n;
                }
            }),
        ))
    }

    /// Interleave the channels of two same-shape `[B, C, ...]` tensors into
    /// `[B, 2C, ...]` ordered `a_1, b_1, a_2, b_2, ...`, so that a grouped
    /// conv with `groups = C` sees exactly one channel of each input per
    /// group.
    pub fn interleave_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("interleave_channels", self, other)?;
        if self.shape().len() < 2 {
            return Err(Error::shape(format!(
                "interleave_channels: need [B, C, ...], got {:?}",
                self.shape()
            )));
        }
        let b = self.shape()[0];
        let c = self.shape()[1];
        let sp = spatial_numel(self.shape());
        let mut shape = self.shape().to_vec();
        shape[1] = 2 * c;
        let mut data = vec![T::zero(); self.numel() * 2];
        {
            let a = self.data();
            let bd = other.data();
            for bi in 0..b {
                for ci in 0..c {
                    let src = (bi * c + ci) * sp;
                    let dst_a = (bi * 2 * c + 2 * ci) * sp;
                    let dst_b = (bi * 2 * c + 2 * ci + 1) * sp;
                    data[dst_a..dst_a + sp].copy_from_slice(&a[src..src + sp]);
                    data[dst_b..dst_b + sp].copy_from_slice(&bd[src..src + sp]);
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g: &[T]| {
                let n = pa.numel();
                let mut da = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for bi in 0..b {
                    for ci in 0..c {
                        let dst = (bi * c + ci) * sp;
                        let src_a = (bi * 2 * c + 2 * ci) * sp;
                        let src_b = (bi * 2 * c + 2 * ci + 1) * sp;
                        da[dst..dst + sp].copy_from_slice(&g[src_a..src_a + sp]);
                        db[dst..dst + sp].copy_from_slice(&g[src_b..src_b + sp]);
                    }
                }
                pa.accumulate_grad_if_tracked(&da);
                pb.accumulate_grad_if_tracked(&db);
            }),
        ))
    }

    // ── Dense layer ─────────────────────────────────────────────────────

    /// `out[b, o] = sum_f x[b, f] * w[f, o] (+ bias[o])`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.shape().len() != 2 || weight.shape().len() != 2 {
            return Err(Error::shape(format!(
                "linear: expected 2-D input and weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            )));
        }
        let (b, f) = (self.shape()[0], self.shape()[1]);
        let (fw, o) = (weight.shape()[0], weight.shape()[1]);
        if f != fw {
            return Err(Error::shape(format!(
                "linear: input features {f} do not match weight rows {fw}"
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(Error::shape(format!(
                    "linear: bias shape {:?} does not match output width {o}",
                    bias.shape()
                )));
            }
        }
        let mut out = vec![T::zero(); b * o];
        {
            let x = self.data();
            let w = weight.data();
            for bi in 0..b {
                let orow = &mut out[bi * o..(bi + 1) * o];
                if let Some(bias) = bias {
                    orow.copy_from_slice(&bias.data());
                }
                for fi in 0..f {
                    let xv = x[bi * f + fi];
                    if xv == T::zero() {
                        continue;
                    }
                    let wrow = &w[fi * o..(fi + 1) * o];
                    for (ov, &wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let px = self.clone();
        let pw = weight.clone();
        let pbias = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Ok(Tensor::from_op(
            vec![b, o],
            out,
            parents,
            Box::new(move |g: &[T]| {
                if px.requires_grad() {
                    // dx[b, f] = sum_o g[b, o] * w[f, o]
                    let w = pw.data();
                    let mut dx = vec![T::zero(); b * f];
                    for bi in 0..b {
                        let grow = &g[bi * o..(bi + 1) * o];
                        for fi in 0..f {
                            let wrow = &w[fi * o..(fi + 1) * o];
                            let mut acc = T::zero();
                            for (gv, wv) in grow.iter().zip(wrow) {
                                acc += *gv * *wv;
                            }
                            dx[bi * f + fi] = acc;
                        }
                    }
                    px.accumulate_grad(&dx);
                }
                if pw.requires_grad() {
                    // dw[f, o] = sum_b x[b, f] * g[b, o]
                    let x = px.data();
                    let mut dw = vec![T::zero(); f * o];
                    for bi in 0..b {
                        let grow = &g[bi * o..(bi + 1) * o];
                        for fi in 0..f {
                            let xv = x[bi * f + fi];
                            if xv == T::zero() {
                                continue;
                            }
                            let drow = &mut dw[fi * o..(fi + 1) * o];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += xv * gv;
                            }
                        }
                    }
                    pw.accumulate_grad(&dw);
                }
                if let Some(pb) = &pbias {
                    if pb.requires_grad() {
                        let mut db = vec![T::zero(); o];
                        for bi in 0..b {
                            for (dv, &gv) in db.iter_mut().zip(&g[bi * o..(bi + 1) * o]) {
                                *dv += gv;
                            }
                        }
                        pb.accumulate_grad(&db);
                    }
                }
            }),
        ))
    }

    // ── Pooling ─────────────────────────────────────────────────────────

    /// Mean over all spatial dims: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.shape().len() < 3 {
            return Err(Error::shape(format!(
                "global_avg_pool: need [B, C, spatial...], got {:?}",
                self.shape()
            )));
        }
        let b = self.shape()[0];
        let c = self.shape()[1];
        let sp = spatial_numel(self.shape());
        let inv = T::one() / T::from_f64(sp as f64);
        let mut out = vec![T::zero(); b * c];
        {
            let x = self.data();
            for (i, ov) in out.iter_mut().enumerate() {
                let base = i * sp;
                let mut acc = T::zero();
                for &v in &x[base..base + sp] {
                    acc += v;
                }
                *ov = acc * inv;
            }
        }
        let p = self.clone();
        let total = self.numel();
        Ok(Tensor::from_op(
            vec![b, c],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                if p.requires_grad() {
                    let mut d = vec![T::zero(); total];
                    for (i, &gv) in g.iter().enumerate() {
                        let base = i * sp;
                        let gin = gv * inv;
                        for dv in &mut d[base..base + sp] {
                            *dv = gin;
                        }
                    }
                    p.accumulate_grad(&d);
                }
            }),
        ))
    }
}
