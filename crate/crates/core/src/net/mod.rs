//! The detection model: a shared 2D encoder, a channel-reshape plus
//! transposed-3D-conv lifting from image features to a feature volume, a
//! rotation-aligned multi-view aggregator, voxel-relation heads for
//! rotation estimation and instance matching, a 2D-correlation baseline
//! head, a voxel-to-image decoder for the reconstruction pretext task, and
//! anchor/ROI heads for box supervision.
//!
//! Orientation convention (matching [`crate::geometry::rotate_voxel`] and
//! the renderer in [`crate::synth`]): a feature volume lifted from an
//! image rendered at rotation `r` holds content rotated by `r` from the
//! instance's base frame. The aggregator un-rotates every view into the
//! base frame; the rotation head predicts the rotation that carries a
//! query's content *into* the base frame (the transpose of the query's
//! pose); the decoder warps the base-frame volume by the target view's
//! rotation before rendering it.

pub mod layers;

use crate::geometry::{rot6d_to_matrix_batch, rotate_voxel, RotationMatrix};
use crate::proposals::{generate_anchors, Box2d};
use crate::rng::stream_rng;
use crate::tensor::{l1_loss, Tensor};
use crate::{Error, Result, Scalar};
use layers::{Conv2dLayer, Conv3dLayer, Deconv2dLayer, Deconv3dLayer, LinearLayer};
use rand::Rng;

/// Default weight on the pixel L1 term of the reconstruction loss.
pub const DEFAULT_W_RECON: f64 = 10.0;
/// Default weight on the feature-space (perceptual) term.
pub const DEFAULT_W_PERCEP: f64 = 1.0;
/// Weight an adversarial image-realism term would carry in this loss
/// family. No adversarial branch is implemented; the constant is recorded
/// so the loss bookkeeping is complete.
pub const W_ADVERSARIAL_UNUSED: f64 = 0.01;

// ── configuration ──

/// Architecture hyperparameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Input image side length (square images).
    pub image_size: usize,
    /// Encoder output channels (C).
    pub enc_channels: usize,
    /// ROI feature side length (w).
    pub roi_size: usize,
    /// Channel groups folded into the depth axis when lifting 2D→3D (d).
    pub lift_depth: usize,
    /// Feature-volume channels (C_v).
    pub voxel_channels: usize,
    /// Feature-volume depth (D).
    pub voxel_depth: usize,
    /// Feature-volume height/width (L).
    pub voxel_size: usize,
    /// Template views per instance (M).
    pub num_templates: usize,
    /// Views held out as reconstruction targets (K).
    pub heldout_views: usize,
    /// Proposals scored per query (N).
    pub num_proposals: usize,
    /// Hidden width of the rotation/match/score MLPs.
    pub mlp_hidden: usize,
    /// Channels after the decoder's depth collapse.
    pub dec_channels: usize,
}

impl Default for NetConfig {
    /// Desk-scale configuration: trainable on CPU in minutes.
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            enc_channels: 64,
            roi_size: 7,
            lift_depth: 8,
            voxel_channels: 32,
            voxel_depth: 8,
            voxel_size: 7,
            num_templates: 10,
            heldout_views: 4,
            num_proposals: 64,
            mlp_hidden: 96,
            dec_channels: 64,
        }
    }
}

impl NetConfig {
    /// Full-scale reference configuration; used only to validate shape
    /// arithmetic, never trained here.
    pub fn large() -> Self {
        NetConfig {
            image_size: 64,
            enc_channels: 256,
            roi_size: 7,
            lift_depth: 8,
            voxel_channels: 256,
            voxel_depth: 16,
            voxel_size: 14,
            num_templates: 10,
            heldout_views: 4,
            num_proposals: 500,
            mlp_hidden: 96,
            dec_channels: 64,
        }
    }

    /// Encoder downsampling factor (three stride-2 stages).
    pub const STRIDE: usize = 8;

    /// Upsampling factor of the 2D→3D lift: 1 keeps `d×w×w`, 2 doubles
    /// every axis.
    pub fn lift_scale(&self) -> usize {
        self.voxel_depth / self.lift_depth.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg.to_string())) };
        c(self.image_size % Self::STRIDE == 0, "image_size must be divisible by 8")?;
        c(self.enc_channels % 4 == 0, "enc_channels must be divisible by 4")?;
        c(self.lift_depth > 0 && self.enc_channels % self.lift_depth == 0,
            "enc_channels must be divisible by lift_depth")?;
        let s = self.lift_scale();
        c(s == 1 || s == 2, "voxel_depth must be lift_depth or 2*lift_depth")?;
        c(self.voxel_depth == self.lift_depth * s && self.voxel_size == self.roi_size * s,
            "voxel dims inconsistent with the transposed-conv lift (depth and size must scale together)")?;
        c(self.voxel_channels % 2 == 0, "voxel_channels must be even")?;
        c(self.num_templates >= 2, "num_templates must be at least 2")?;
        c(self.heldout_views >= 1 && self.heldout_views < self.num_templates,
            "heldout_views must be in 1..num_templates")?;
        c(self.num_proposals >= 1, "num_proposals must be at least 1")?;
        c(self.mlp_hidden >= 4 && self.dec_channels >= 8, "head widths too small")?;
        self.decoder_plan()?;
        Ok(())
    }

    /// Flattened size of a relation volume, the MLP input width.
    pub fn relation_dim(&self) -> usize {
        self.voxel_channels * self.voxel_depth * self.voxel_size * self.voxel_size
    }

    /// Decoder upsampling plan: `(grow_steps, doublings)` — first grow the
    /// side length by +1 per step, then double it until it reaches
    /// `image_size`.
    pub fn decoder_plan(&self) -> Result<(usize, usize)> {
        let mut base = self.image_size;
        let mut doublings = 0;
        while base % 2 == 0 && base / 2 >= self.voxel_size {
            base /= 2;
            doublings += 1;
        }
        if base < self.voxel_size || base - self.voxel_size > 2 {
            return Err(Error::config(format!(
                "no decoder plan from side {} to image {} (nearest doubling base {base})",
                self.voxel_size, self.image_size
            )));
        }
        Ok((base - self.voxel_size, doublings))
    }
}

// ── encoder ──

/// Three stride-2 conv stages; channels C/4, C/2, C. The stage outputs
/// double as the perceptual-loss feature pyramid.
#[derive(Clone)]
pub struct Encoder<T: Scalar> {
    pub c1: Conv2dLayer<T>,
    pub c2: Conv2dLayer<T>,
    pub c3: Conv2dLayer<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        Encoder {
            c1: Conv2dLayer::new(3, c / 4, 3, 2, 1, rng),
            c2: Conv2dLayer::new(c / 4, c / 2, 3, 2, 1, rng),
            c3: Conv2dLayer::new(c / 2, c, 3, 2, 1, rng),
        }
    }

    /// All three stage outputs, shallowest first.
    pub fn forward_levels(&self, img: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("encoder: expected [B, 3, H, W], got {s:?}")));
        }
        if s[2] % NetConfig::STRIDE != 0 || s[3] % NetConfig::STRIDE != 0 {
            return Err(Error::shape(format!(
                "encoder: H and W must be divisible by {}, got {}x{}",
                NetConfig::STRIDE,
                s[2],
                s[3]
            )));
        }
        let f1 = self.c1.forward(img)?.relu();
        let f2 = self.c2.forward(&f1)?.relu();
        let f3 = self.c3.forward(&f2)?.relu();
        Ok([f1, f2, f3])
    }

    /// Final feature map `[B, C, H/8, W/8]`.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_levels(img)?[2].clone())
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.c1.params(&format!("{prefix}.c1"));
        p.extend(self.c2.params(&format!("{prefix}.c2")));
        p.extend(self.c3.params(&format!("{prefix}.c3")));
        p
    }

    /// Copy with constant (non-trainable) weights, for use as a fixed
    /// feature extractor in the perceptual loss.
    pub fn frozen_clone(&self) -> Self {
        Encoder { c1: self.c1.frozen_clone(), c2: self.c2.frozen_clone(), c3: self.c3.frozen_clone() }
    }
}

// ── 2D → 3D lift ──

/// Folds encoder channels into a depth axis, then two transposed 3D convs
/// produce the feature volume: `[B, C, w, w] → [B, C/d, d, w, w] →
/// [B, C_v, D, L, L]`.
#[derive(Clone)]
pub struct Mapping<T: Scalar> {
    pub up1: Deconv3dLayer<T>,
    pub up2: Deconv3dLayer<T>,
    lift_depth: usize,
}

impl<T: Scalar> Mapping<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let cin = cfg.enc_channels / cfg.lift_depth;
        let mid = cfg.voxel_channels / 2;
        let (k, s) = if cfg.lift_scale() == 2 { (4, 2) } else { (3, 1) };
        Mapping {
            up1: Deconv3dLayer::new(cin, mid, k, s, 1, rng),
            up2: Deconv3dLayer::new(mid, cfg.voxel_channels, 3, 1, 1, rng),
            lift_depth: cfg.lift_depth,
        }
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let s = f.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("mapping: expected [B, C, w, w], got {s:?}")));
        }
        if s[1] % self.lift_depth != 0 {
            return Err(Error::config(format!(
                "mapping: {} channels not divisible by lift depth {}",
                s[1], self.lift_depth
            )));
        }
        let lifted = f.reshape(&[s[0], s[1] / self.lift_depth, self.lift_depth, s[2], s[3]])?;
        let h = self.up1.forward(&lifted)?.relu();
        self.up2.forward(&h)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.up1.params(&format!("{prefix}.up1"));
        p.extend(self.up2.params(&format!("{prefix}.up2")));
        p
    }
}

// ── template aggregation ──

/// An instance's aggregated template: a base-frame feature volume plus a
/// pooled 2D descriptor for the global match branch.
#[derive(Clone)]
pub struct TemplateVoxel<T: Scalar> {
    /// `[1, C_v, D, L, L]`, content in the base (view-0) frame.
    pub v: Tensor<T>,
    /// `[1, C]`: view-and-space average of the template 2D features.
    pub support_vector: Tensor<T>,
    /// Rotation defining the reference frame (view 0's rotation).
    pub frame0_pose: RotationMatrix<f64>,
}

/// Rotation-aligned mean of per-view volumes through one shared conv.
#[derive(Clone)]
pub struct Aggregator<T: Scalar> {
    pub conv: Conv3dLayer<T>,
}

impl<T: Scalar> Aggregator<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Aggregator { conv: Conv3dLayer::new(cfg.voxel_channels, cfg.voxel_channels, 3, 1, 1, rng) }
    }

    /// `views[i]` is the volume lifted from the view rendered at
    /// `rotations[i]`; `support_feats` is `[M, C, w, w]`, the stacked 2D
    /// ROI features of the same views.
    pub fn aggregate(
        &self,
        views: &[Tensor<T>],
        rotations: &[RotationMatrix<f64>],
        support_feats: &Tensor<T>,
    ) -> Result<TemplateVoxel<T>> {
        if views.is_empty() {
            return Err(Error::config("aggregate: no template views".to_string()));
        }
        if views.len() != rotations.len() {
            return Err(Error::shape(format!(
                "aggregate: {} views vs {} rotations",
                views.len(),
                rotations.len()
            )));
        }
        if support_feats.shape()[0] != views.len() {
            return Err(Error::shape(format!(
                "aggregate: support features batch {} vs {} views",
                support_feats.shape()[0],
                views.len()
            )));
        }
        let m = views.len();
        let mut acc: Option<Tensor<T>> = None;
        for (view, rot) in views.iter().zip(rotations) {
            let aligned = rotate_voxel(view, &rot.transpose().cast::<T>())?;
            let mapped = self.conv.forward(&aligned)?;
            acc = Some(match acc {
                None => mapped,
                Some(a) => a.add(&mapped)?,
            });
        }
        let v = acc.unwrap().scale(T::one() / T::from_usize(m));

        let gap = support_feats.global_avg_pool()?; // [M, C]
        let mut sv: Option<Tensor<T>> = None;
        for i in 0..m {
            let row = gap.gather_rows(&[i])?;
            sv = Some(match sv {
                None => row,
                Some(a) => a.add(&row)?,
            });
        }
        let support_vector = sv.unwrap().scale(T::one() / T::from_usize(m));
        Ok(TemplateVoxel { v, support_vector, frame0_pose: rotations[0] })
    }
}

// ── voxel relation ──

/// How two volumes are compared channel-by-channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationKind {
    /// Interleave channels and apply a grouped conv, so each group's
    /// kernel sees the matching channel pair — the full relation.
    Interleaved,
    /// Elementwise product followed by a depthwise conv — the reduced
    /// comparison used as the relation ablation.
    Depthwise,
}

#[derive(Clone)]
pub struct RelationConv<T: Scalar> {
    pub kind: RelationKind,
    pub conv: Conv3dLayer<T>,
}

impl<T: Scalar> RelationConv<T> {
    pub fn new(c: usize, kind: RelationKind, rng: &mut impl Rng) -> Self {
        let conv = match kind {
            RelationKind::Interleaved => Conv3dLayer::new(2 * c, c, 3, 1, c, rng),
            RelationKind::Depthwise => Conv3dLayer::new(c, c, 3, 1, c, rng),
        };
        RelationConv { kind, conv }
    }

    pub fn relate(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let paired = match self.kind {
            RelationKind::Interleaved => a.interleave_channels(b)?,
            RelationKind::Depthwise => a.mul(b)?,
        };
        self.conv.forward(&paired)
    }
}

// ── rotation head ──

pub struct RotationHead<T: Scalar> {
    pub rel: RelationConv<T>,
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

/// 6D parameterization of the identity rotation (first two matrix columns).
const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl<T: Scalar> RotationHead<T> {
    pub fn new(cfg: &NetConfig, kind: RelationKind, rng: &mut impl Rng) -> Self {
        RotationHead {
            rel: RelationConv::new(cfg.voxel_channels, kind, rng),
            fc1: LinearLayer::new(cfg.relation_dim(), cfg.mlp_hidden, rng),
            // Near-identity start: alignment behaves like a no-op until the
            // head learns, which keeps early matching stable.
            fc2: LinearLayer::small_with_bias(cfg.mlp_hidden, 6, 0.01, &IDENTITY_6D, rng),
        }
    }

    /// Predict one rotation per query: returns row-major `[N, 9]` (with
    /// gradient back into the 6D parameters) and a per-row validity mask;
    /// degenerate rows decode to the identity and are reported invalid.
    pub fn forward(&self, template_v: &Tensor<T>, queries: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        let n = queries.shape()[0];
        let rel = self.rel.relate(&template_v.repeat_batch(n)?, queries)?;
        let h = self.fc1.forward(&rel.flatten())?.relu();
        let six = self.fc2.forward(&h)?;
        rot6d_to_matrix_batch(&six)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.rel.conv.params(&format!("{prefix}.rel"));
        p.extend(self.fc1.params(&format!("{prefix}.fc1")));
        p.extend(self.fc2.params(&format!("{prefix}.fc2")));
        p
    }
}

/// Read predicted matrices out as f64 rotations for warping; invalid rows
/// become the identity. This is a constant extraction — alignment warps do
/// not backpropagate into the rotation parameters.
pub fn rotations_from_batch<T: Scalar>(preds: &Tensor<T>, valid: &[bool]) -> Vec<RotationMatrix<f64>> {
    let n = preds.shape()[0];
    let data = preds.data();
    (0..n)
        .map(|i| {
            if valid[i] {
                let mut m = [0.0f64; 9];
                for (j, o) in m.iter_mut().enumerate() {
                    *o = data[i * 9 + j].to_f64();
                }
                RotationMatrix::from_array(m)
            } else {
                RotationMatrix::identity()
            }
        })
        .collect()
}

// ── match head ──

pub struct MatchHead<T: Scalar> {
    pub rel: RelationConv<T>,
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

impl<T: Scalar> MatchHead<T> {
    pub fn new(cfg: &NetConfig, kind: RelationKind, rng: &mut impl Rng) -> Self {
        MatchHead {
            rel: RelationConv::new(cfg.voxel_channels, kind, rng),
            fc1: LinearLayer::new(cfg.relation_dim(), cfg.mlp_hidden, rng),
            fc2: LinearLayer::new(cfg.mlp_hidden, 1, rng),
        }
    }

    /// Instance-match logits `[N, 1]` for already-aligned query volumes.
    /// `query_gap` (`[N, C]`, pooled 2D ROI features) enables the global
    /// branch: the pooled correlation against the template's support
    /// vector is added to each logit.
    pub fn forward(
        &self,
        template: &TemplateVoxel<T>,
        aligned_queries: &Tensor<T>,
        query_gap: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = aligned_queries.shape()[0];
        let rel = self.rel.relate(&template.v.repeat_batch(n)?, aligned_queries)?;
        let h = self.fc1.forward(&rel.flatten())?.relu();
        let mut logits = self.fc2.forward(&h)?;
        if let Some(gap) = query_gap {
            let c = gap.shape()[1];
            if template.support_vector.shape()[1] != c {
                return Err(Error::shape(format!(
                    "match: support vector width {} vs query features {}",
                    template.support_vector.shape()[1],
                    c
                )));
            }
            let corr = gap.mul(&template.support_vector.repeat_batch(n)?)?;
            // Mean over channels via a constant averaging matrix.
            let avg = Tensor::from_vec(&[c, 1], vec![T::one() / T::from_usize(c); c], false);
            logits = logits.add(&corr.linear(&avg, None)?)?;
        }
        Ok(logits)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.rel.conv.params(&format!("{prefix}.rel"));
        p.extend(self.fc1.params(&format!("{prefix}.fc1")));
        p.extend(self.fc2.params(&format!("{prefix}.fc2")));
        p
    }
}

// ── 2D correlation baseline head ──

/// Purely 2D baseline: per-view pooled correlation between template and
/// query features, scored by cosine-plus-MLP, max over views. No lift, no
/// rotation reasoning — the comparison arm for the template-count sweep.
pub struct Corr2dHead<T: Scalar> {
    pub affine: LinearLayer<T>,
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

impl<T: Scalar> Corr2dHead<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Corr2dHead {
            // Cosine term starts as identity (scale 1, shift 0) so an
            // untrained head already ranks by plain feature similarity.
            affine: LinearLayer {
                w: Tensor::from_vec(&[1, 1], vec![T::one()], true),
                b: Tensor::from_vec(&[1], vec![T::zero()], true),
            },
            fc1: LinearLayer::new(cfg.enc_channels, cfg.mlp_hidden, rng),
            fc2: LinearLayer::small_with_bias(cfg.mlp_hidden, 1, 1e-3, &[0.0], rng),
        }
    }

    /// `template_feats`: `[M, C, w, w]`; `query_feats`: `[N, C, w, w]`;
    /// returns `[N, 1]` logits, maximum over template views.
    pub fn forward(&self, template_feats: &Tensor<T>, query_feats: &Tensor<T>) -> Result<Tensor<T>> {
        if template_feats.shape()[1] != query_feats.shape()[1] {
            return Err(Error::shape(format!(
                "corr2d: channel mismatch {} vs {}",
                template_feats.shape()[1],
                query_feats.shape()[1]
            )));
        }
        let m = template_feats.shape()[0];
        let n = query_feats.shape()[0];
        let tg = template_feats.global_avg_pool()?; // [M, C]
        let qg = query_feats.global_avg_pool()?; // [N, C]
        let c = qg.shape()[1];

        // Cosine similarities as constants: the trainable path is the MLP
        // over the correlation vector plus an affine on the cosine.
        let t_rows = tg.to_vec();
        let q_rows = qg.to_vec();
        let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();

        let mut logits: Option<Tensor<T>> = None;
        for view in 0..m {
            let t_row = &t_rows[view * c..(view + 1) * c];
            let tn = norm(t_row);
            let mut cos = vec![T::zero(); n];
            for (i, cv) in cos.iter_mut().enumerate() {
                let q_row = &q_rows[i * c..(i + 1) * c];
                let qn = norm(q_row);
                let dot: T = q_row.iter().zip(t_row).map(|(&a, &b)| a * b).sum();
                let denom = tn * qn;
                *cv = if denom.to_f64() > 1e-12 { dot / denom } else { T::zero() };
            }
            let cos_t = Tensor::from_vec(&[n, 1], cos, false);
            let corr = qg.mul(&tg.gather_rows(&[view])?.repeat_batch(n)?)?;
            let h = self.fc1.forward(&corr)?.relu();
            let score = self.fc2.forward(&h)?.add(&self.affine.forward(&cos_t)?)?;
            logits = Some(match logits {
                None => score,
                Some(acc) => acc.maximum(&score)?,
            });
        }
        Ok(logits.unwrap())
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.affine.params(&format!("{prefix}.affine"));
        p.extend(self.fc1.params(&format!("{prefix}.fc1")));
        p.extend(self.fc2.params(&format!("{prefix}.fc2")));
        p
    }
}

// ── decoder ──

/// Feature volume → image: warp to the target view, 3D conv, collapse
/// depth into channels, grow/double the side length with transposed 2D
/// convs, finish with a sigmoid RGB head.
pub struct Decoder<T: Scalar> {
    pub c3d: Conv3dLayer<T>,
    pub collapse: Conv2dLayer<T>,
    pub grow: Vec<Deconv2dLayer<T>>,
    pub ups: Vec<Deconv2dLayer<T>>,
    pub out: Conv2dLayer<T>,
    voxel_channels: usize,
    voxel_depth: usize,
    voxel_size: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        let (grow_steps, doublings) = cfg.decoder_plan()?;
        let c3d = Conv3dLayer::new(cfg.voxel_channels, cfg.voxel_channels, 3, 1, 1, rng);
        let collapse =
            Conv2dLayer::new(cfg.voxel_channels * cfg.voxel_depth, cfg.dec_channels, 3, 1, 1, rng);
        let mut ch = cfg.dec_channels;
        let grow = (0..grow_steps).map(|_| Deconv2dLayer::new(ch, ch, 2, 1, 0, rng)).collect();
        let mut ups = Vec::with_capacity(doublings);
        for _ in 0..doublings {
            let next = (ch / 2).max(8);
            ups.push(Deconv2dLayer::new(ch, next, 4, 2, 1, rng));
            ch = next;
        }
        let out = Conv2dLayer::new(ch, 3, 3, 1, 1, rng);
        Ok(Decoder {
            c3d,
            collapse,
            grow,
            ups,
            out,
            voxel_channels: cfg.voxel_channels,
            voxel_depth: cfg.voxel_depth,
            voxel_size: cfg.voxel_size,
        })
    }

    /// Render the base-frame volume as seen from the view at `view_rot`
    /// (same convention as template rotations). Output `[1, 3, H, W]` in
    /// `(0, 1)`.
    pub fn forward(&self, v: &Tensor<T>, view_rot: &RotationMatrix<f64>) -> Result<Tensor<T>> {
        let warped = rotate_voxel(v, &view_rot.cast::<T>())?;
        let h = self.c3d.forward(&warped)?.relu();
        let b = h.shape()[0];
        let collapsed =
            h.reshape(&[b, self.voxel_channels * self.voxel_depth, self.voxel_size, self.voxel_size])?;
        let mut x = self.collapse.forward(&collapsed)?.relu();
        for g in &self.grow {
            x = g.forward(&x)?.relu();
        }
        for up in &self.ups {
            x = up.forward(&x)?.relu();
        }
        Ok(self.out.forward(&x)?.sigmoid())
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.c3d.params(&format!("{prefix}.c3d"));
        p.extend(self.collapse.params(&format!("{prefix}.collapse")));
        for (i, g) in self.grow.iter().enumerate() {
            p.extend(g.params(&format!("{prefix}.grow{i}")));
        }
        for (i, u) in self.ups.iter().enumerate() {
            p.extend(u.params(&format!("{prefix}.up{i}")));
        }
        p.extend(self.out.params(&format!("{prefix}.out")));
        p
    }
}

// ── box heads ──

/// Objectness + box-delta head over the scene feature map, one output set
/// per anchor shape.
pub struct RpnHead<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub obj: Conv2dLayer<T>,
    pub reg: Conv2dLayer<T>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl<T: Scalar> RpnHead<T> {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        let scales = vec![16.0, 24.0, 40.0];
        let ratios = vec![0.5, 1.0, 2.0];
        let a = scales.len() * ratios.len();
        RpnHead {
            conv: Conv2dLayer::new(c, c, 3, 1, 1, rng),
            obj: Conv2dLayer::new(c, a, 1, 1, 0, rng),
            reg: Conv2dLayer::new(c, 4 * a, 1, 1, 0, rng),
            scales,
            ratios,
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// `(objectness [1, A, h, w], deltas [1, 4A, h, w])`.
    pub fn forward(&self, feat: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.conv.forward(feat)?.relu();
        Ok((self.obj.forward(&h)?, self.reg.forward(&h)?))
    }

    /// Anchor list in the same order as the flattened head outputs
    /// (anchor-shape major, then row, then column).
    pub fn anchors(&self, image_size: usize, stride: usize) -> Vec<Box2d> {
        let gen = generate_anchors(image_size, stride, &self.scales, &self.ratios);
        let cells = image_size / stride;
        let hw = cells * cells;
        let a_n = self.anchors_per_cell();
        let mut out = vec![Box2d { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }; gen.len()];
        for pos in 0..hw {
            for a in 0..a_n {
                out[a * hw + pos] = gen[pos * a_n + a];
            }
        }
        out
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.conv.params(&format!("{prefix}.conv"));
        p.extend(self.obj.params(&format!("{prefix}.obj")));
        p.extend(self.reg.params(&format!("{prefix}.reg")));
        p
    }
}

/// Per-proposal refinement: objectness score and box deltas from ROI
/// features.
pub struct RoiHead<T: Scalar> {
    pub fc1: LinearLayer<T>,
    pub score: LinearLayer<T>,
    pub delta: LinearLayer<T>,
}

impl<T: Scalar> RoiHead<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let fin = cfg.enc_channels * cfg.roi_size * cfg.roi_size;
        RoiHead {
            fc1: LinearLayer::new(fin, cfg.mlp_hidden, rng),
            score: LinearLayer::new(cfg.mlp_hidden, 1, rng),
            // Deltas start near zero: refined boxes ≈ the proposals.
            delta: LinearLayer::small_with_bias(cfg.mlp_hidden, 4, 1e-3, &[0.0; 4], rng),
        }
    }

    /// `(scores [N, 1], deltas [N, 4])`.
    pub fn forward(&self, roi_feats: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.fc1.forward(&roi_feats.flatten())?.relu();
        Ok((self.score.forward(&h)?, self.delta.forward(&h)?))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = self.fc1.params(&format!("{prefix}.fc1"));
        p.extend(self.score.params(&format!("{prefix}.score")));
        p.extend(self.delta.params(&format!("{prefix}.delta")));
        p
    }
}

// ── the whole model ──

pub struct Model<T: Scalar> {
    pub cfg: NetConfig,
    pub encoder: Encoder<T>,
    pub mapping: Mapping<T>,
    pub aggregator: Aggregator<T>,
    pub rotation_head: RotationHead<T>,
    pub match_head: MatchHead<T>,
    pub corr_head: Corr2dHead<T>,
    pub decoder: Decoder<T>,
    pub rpn: RpnHead<T>,
    pub roi_head: RoiHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Build with seeded weights. `relation` selects the full interleaved
    /// voxel relation or its depthwise ablation for both relation heads.
    pub fn new(cfg: &NetConfig, relation: RelationKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0x10, 0);
        Ok(Model {
            cfg: cfg.clone(),
            encoder: Encoder::new(cfg.enc_channels, &mut rng),
            mapping: Mapping::new(cfg, &mut rng),
            aggregator: Aggregator::new(cfg, &mut rng),
            rotation_head: RotationHead::new(cfg, relation, &mut rng),
            match_head: MatchHead::new(cfg, relation, &mut rng),
            corr_head: Corr2dHead::new(cfg, &mut rng),
            decoder: Decoder::new(cfg, &mut rng)?,
            rpn: RpnHead::new(cfg.enc_channels, &mut rng),
            roi_head: RoiHead::new(cfg, &mut rng),
        })
    }

    /// Every named parameter, for checkpointing.
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut p = self.encoder.params("enc");
        p.extend(self.mapping.params("map"));
        p.extend(self.aggregator.conv.params("agg.conv"));
        p.extend(self.rotation_head.params("rot"));
        p.extend(self.match_head.params("match"));
        p.extend(self.corr_head.params("corr"));
        p.extend(self.decoder.params("dec"));
        p.extend(self.rpn.params("rpn"));
        p.extend(self.roi_head.params("roi"));
        p
    }

    /// Parameters trained by the reconstruction stage.
    pub fn recon_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut p = self.encoder.params("enc");
        p.extend(self.mapping.params("map"));
        p.extend(self.aggregator.conv.params("agg.conv"));
        p.extend(self.decoder.params("dec"));
        p
    }

    /// Detection-stage parameters at the base learning rate (the 2D→3D
    /// mapping is listed separately — it trains at a reduced rate).
    pub fn detect_main_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut p = self.encoder.params("enc");
        p.extend(self.aggregator.conv.params("agg.conv"));
        p.extend(self.match_head.params("match"));
        p.extend(self.rpn.params("rpn"));
        p.extend(self.roi_head.params("roi"));
        p
    }

    pub fn mapping_params(&self) -> Vec<(String, Tensor<T>)> {
        self.mapping.params("map")
    }

    pub fn corr_params(&self) -> Vec<(String, Tensor<T>)> {
        self.corr_head.params("corr")
    }

    /// Rotation-head parameters — the only ones trained in the final
    /// detection phase.
    pub fn rotation_params(&self) -> Vec<(String, Tensor<T>)> {
        self.rotation_head.params("rot")
    }
}

/// Warp each batch entry by its own rotation (content convention, like
/// [`rotate_voxel`]). Used to align every query volume with its predicted
/// rotation.
pub fn rotate_each<T: Scalar>(v: &Tensor<T>, rots: &[RotationMatrix<f64>]) -> Result<Tensor<T>> {
    let n = v.shape()[0];
    if rots.len() != n {
        return Err(Error::shape(format!("rotate_each: {} rotations for batch {n}", rots.len())));
    }
    let mut parts = Vec::with_capacity(n);
    for (i, r) in rots.iter().enumerate() {
        let row = v.gather_rows(&[i])?;
        parts.push(rotate_voxel(&row, &r.cast::<T>())?);
    }
    Tensor::concat_batch(&parts)
}

// ── loss assemblies ──

/// Weighted pixel L1 plus feature-space L1 over the frozen encoder's
/// stage outputs. Zero exactly when `fake == real`.
pub fn recon_loss<T: Scalar>(
    fake: &Tensor<T>,
    real: &Tensor<T>,
    phi: &Encoder<T>,
    w_recon: T,
    w_percep: T,
) -> Result<Tensor<T>> {
    let mut total = l1_loss(fake, real)?.scale(w_recon);
    let lf = phi.forward_levels(fake)?;
    let lr = phi.forward_levels(real)?;
    for (a, b) in lf.iter().zip(lr.iter()) {
        total = total.add(&l1_loss(a, b)?.scale(w_percep))?;
    }
    Ok(total)
}

/// Weighted sum of scalar loss terms. Zero-weight terms are skipped
/// entirely, so their subgraphs receive no gradient; negative weights are
/// rejected.
pub fn detection_loss<T: Scalar>(terms: &[&Tensor<T>], weights: &[T]) -> Result<Tensor<T>> {
    if terms.len() != weights.len() {
        return Err(Error::shape(format!(
            "detection_loss: {} terms vs {} weights",
            terms.len(),
            weights.len()
        )));
    }
    for (i, t) in terms.iter().enumerate() {
        if t.numel() != 1 {
            return Err(Error::shape(format!("detection_loss: term {i} is not a scalar")));
        }
    }
    if let Some(w) = weights.iter().find(|w| **w < T::zero()) {
        return Err(Error::config(format!("detection_loss: negative weight {w}")));
    }
    let mut total = Tensor::scalar(T::zero());
    for (t, &w) in terms.iter().zip(weights) {
        if w != T::zero() {
            total = total.add(&t.scale(w))?;
        }
    }
    Ok(total)
}
