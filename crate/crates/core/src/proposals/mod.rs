//! Class-agnostic box proposals.
//!
//! Two sources feed the detection head: a learned single-scale objectness
//! grid (anchor boxes scored by IoU regression) and an oracle-jitter mode
//! that perturbs ground-truth boxes, which keeps benchmark variance focused
//! on the matching stage rather than proposal recall. Box algebra is plain
//! `f64`; only [`roi_crop`] touches tensors.

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Axis-aligned pixel box, corners exclusive of width: `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2d {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box2d { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite =
            self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite();
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::shape(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clip to `[0, w] x [0, h]`, keeping at least one pixel of extent.
    pub fn clip(&self, w: f64, h: f64) -> Box2d {
        let x1 = self.x1.max(0.0).min(w - 1.0);
        let y1 = self.y1.max(0.0).min(h - 1.0);
        Box2d {
            x1,
            y1,
            x2: self.x2.max(x1 + 1.0).min(w),
            y2: self.y2.max(y1 + 1.0).min(h),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 only for identical ones.
pub fn box_iou(a: &Box2d, b: &Box2d) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Where a proposal set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Learned,
    OracleJitter,
    Grid,
}

/// Exactly `n` scored boxes, sorted by descending objectness (ties by
/// ascending original index).
#[derive(Clone, Debug)]
pub struct ProposalSet {
    pub boxes: Vec<Box2d>,
    pub objectness: Vec<f64>,
    pub source: ProposalSource,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Dense single-scale anchor grid, row-major over (y, x) cells, then
/// scales, then ratios; clipped to the image.
pub fn generate_anchors(image_size: usize, stride: usize, scales: &[f64], ratios: &[f64]) -> Vec<Box2d> {
    let cells = image_size / stride;
    let img = image_size as f64;
    let mut out = Vec::with_capacity(cells * cells * scales.len() * ratios.len());
    for cy in 0..cells {
        for cx in 0..cells {
            let x = (cx * stride) as f64 + stride as f64 / 2.0;
            let y = (cy * stride) as f64 + stride as f64 / 2.0;
            for &scale in scales {
                for &ratio in ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    let b = Box2d { x1: x - w / 2.0, y1: y - h / 2.0, x2: x + w / 2.0, y2: y + h / 2.0 };
                    out.push(b.clip(img, img));
                }
            }
        }
    }
    out
}

/// Center/size regression target from an anchor to its ground-truth box.
pub fn encode_delta(anchor: &Box2d, gt: &Box2d) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Apply a predicted delta to its anchor.
pub fn decode_delta(anchor: &Box2d, delta: [f64; 4]) -> Box2d {
    let (acx, acy) = anchor.center();
    let cx = acx + delta[0] * anchor.width();
    let cy = acy + delta[1] * anchor.height();
    // Exponent clamp keeps garbage predictions from producing inf boxes.
    let w = anchor.width() * delta[2].min(4.0).exp();
    let h = anchor.height() * delta[3].min(4.0).exp();
    Box2d { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
}

/// Per-anchor objectness targets (max IoU over ground truth) and, for
/// anchors overlapping at least 0.3, the regression delta toward their
/// best-matching box.
pub fn assign_objectness_targets(
    anchors: &[Box2d],
    gts: &[Box2d],
) -> Result<(Vec<f64>, Vec<Option<[f64; 4]>>)> {
    let mut targets = vec![0.0; anchors.len()];
    let mut deltas = vec![None; anchors.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for gt in gts {
            let iou = box_iou(anchor, gt)?;
            if iou > best {
                best = iou;
                best_gt = Some(gt);
            }
        }
        targets[ai] = best;
        if best >= 0.3 {
            deltas[ai] = best_gt.map(|gt| encode_delta(anchor, gt));
        }
    }
    Ok((targets, deltas))
}

/// Decode, clip, lightly de-duplicate (greedy NMS at IoU 0.9), and pad with
/// grid anchors so the result has exactly `n` boxes. Score ties break by
/// ascending candidate index.
pub fn select_topk_proposals(
    scores: &[f64],
    boxes: &[Box2d],
    deltas: &[Option<[f64; 4]>],
    n: usize,
    image_size: usize,
    pad_anchors: &[Box2d],
) -> Result<ProposalSet> {
    if scores.len() != boxes.len() || deltas.len() != boxes.len() {
        return Err(Error::shape(format!(
            "select_topk_proposals: {} scores, {} boxes, {} deltas",
            scores.len(),
            boxes.len(),
            deltas.len()
        )));
    }
    let img = image_size as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut kept: Vec<(Box2d, f64)> = Vec::with_capacity(n);
    for idx in order {
        if kept.len() == n {
            break;
        }
        let decoded = match deltas[idx] {
            Some(d) => decode_delta(&boxes[idx], d),
            None => boxes[idx],
        }
        .clip(img, img);
        let dup = kept
            .iter()
            .any(|(k, _)| box_iou(k, &decoded).map(|iou| iou > 0.9).unwrap_or(false));
        if !dup {
            kept.push((decoded, scores[idx]));
        }
    }
    // Deterministic padding: walk the anchor grid in order, skipping boxes
    // already present.
    let mut pad_iter = pad_anchors.iter();
    while kept.len() < n {
        match pad_iter.next() {
            Some(a) => {
                if kept.iter().all(|(k, _)| k != a) {
                    kept.push((*a, f64::NEG_INFINITY));
                }
            }
            None => return Err(Error::config(format!(
                "select_topk_proposals: cannot pad to {n} proposals from {} candidates + {} anchors",
                boxes.len(),
                pad_anchors.len()
            ))),
        }
    }
    Ok(ProposalSet {
        boxes: kept.iter().map(|(b, _)| *b).collect(),
        objectness: kept.iter().map(|(_, s)| *s).collect(),
        source: ProposalSource::Learned,
    })
}

/// Box jitter levels for oracle proposals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JitterSpec {
    /// Center shift, uniform in `±shift_frac` of width/height.
    pub shift_frac: f64,
    /// Log-size jitter, uniform in `±size_frac`.
    pub size_frac: f64,
    /// Jittered copies per ground-truth box before negatives fill the rest.
    pub positives_per_gt: usize,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec { shift_frac: 0.2, size_frac: 0.2, positives_per_gt: 4 }
    }
}

fn jitter_box(gt: &Box2d, spec: &JitterSpec, img: f64, rng: &mut impl rand::Rng) -> Box2d {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let dx: f64 = rng.gen_range(-1.0..1.0);
    let dy: f64 = rng.gen_range(-1.0..1.0);
    let dw: f64 = rng.gen_range(-1.0..1.0);
    let dh: f64 = rng.gen_range(-1.0..1.0);
    let cx = cx + dx * spec.shift_frac * w;
    let cy = cy + dy * spec.shift_frac * h;
    let w = w * (dw * spec.size_frac).exp();
    let h = h * (dh * spec.size_frac).exp();
    Box2d { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }.clip(img, img)
}

/// Ground-truth boxes with jitter plus random negatives, exactly `n`
/// proposals scored by their true best IoU. Every ground-truth box is
/// guaranteed one proposal with IoU ≥ 0.5 (the exact box when jitter keeps
/// missing); with zero jitter the exact boxes are always present.
pub fn oracle_jitter_proposals(
    gts: &[Box2d],
    n: usize,
    spec: &JitterSpec,
    image_size: usize,
    seed: u64,
) -> Result<ProposalSet> {
    if gts.is_empty() {
        return Err(Error::config("oracle_jitter_proposals: no ground-truth boxes".to_string()));
    }
    let img = image_size as f64;
    let mut rng = crate::rng::stream_rng(seed, 0x0b0c, 0);
    let mut boxes: Vec<Box2d> = Vec::with_capacity(n);
    for gt in gts {
        for k in 0..spec.positives_per_gt {
            if boxes.len() == n {
                break;
            }
            if k == 0 {
                // The anchor positive: exact at zero jitter, otherwise
                // re-drawn until it stays a comfortable match.
                if spec.shift_frac == 0.0 && spec.size_frac == 0.0 {
                    boxes.push(*gt);
                } else {
                    let mut chosen = *gt;
                    for _ in 0..16 {
                        let cand = jitter_box(gt, spec, img, &mut rng);
                        if box_iou(&cand, gt)? >= 0.5 {
                            chosen = cand;
                            break;
                        }
                    }
                    boxes.push(chosen);
                }
            } else {
                boxes.push(jitter_box(gt, spec, img, &mut rng));
            }
        }
    }
    while boxes.len() < n {
        // Random negatives anywhere in the image.
        let w = rng.gen_range(6.0..img * 0.6);
        let h = rng.gen_range(6.0..img * 0.6);
        let x1 = rng.gen_range(0.0..img - w);
        let y1 = rng.gen_range(0.0..img - h);
        boxes.push(Box2d { x1, y1, x2: x1 + w, y2: y1 + h });
    }
    boxes.truncate(n);

    let mut scored: Vec<(Box2d, f64)> = Vec::with_capacity(n);
    for b in boxes {
        let mut best = 0.0f64;
        for gt in gts {
            best = best.max(box_iou(&b, gt)?);
        }
        scored.push((b, best));
    }
    // Descending score, ties by insertion index (stable sort).
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(ProposalSet {
        boxes: scored.iter().map(|(b, _)| *b).collect(),
        objectness: scored.iter().map(|(_, s)| *s).collect(),
        source: ProposalSource::OracleJitter,
    })
}

/// Bilinear crop-and-resize: samples `out_size²` cell centers inside each
/// box (image coordinates, divided by `stride` to reach feature space) from
/// a `[1, c, h, w]` feature map. Linear and differentiable in `feat`;
/// out-of-range taps read zero.
pub fn roi_crop<T: Scalar>(
    feat: &Tensor<T>,
    boxes: &[Box2d],
    out_size: usize,
    stride: f64,
) -> Result<Tensor<T>> {
    let shape = feat.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("roi_crop: expected [1, c, h, w], got {shape:?}")));
    }
    let (c, fh, fw) = (shape[1], shape[2], shape[3]);
    for b in boxes {
        b.validate()?;
    }
    let nb = boxes.len();
    let out_spatial = out_size * out_size;

    // Four taps per output cell, shared across channels: per box, per cell.
    let mut taps: Vec<[(u32, T); 4]> = Vec::with_capacity(nb * out_spatial);
    for b in boxes {
        let (bw, bh) = (b.width(), b.height());
        for oy in 0..out_size {
            let y_img = b.y1 + (oy as f64 + 0.5) * bh / out_size as f64;
            let yf = y_img / stride - 0.5;
            let y0 = yf.floor();
            let wy1 = yf - y0;
            for ox in 0..out_size {
                let x_img = b.x1 + (ox as f64 + 0.5) * bw / out_size as f64;
                let xf = x_img / stride - 0.5;
                let x0 = xf.floor();
                let wx1 = xf - x0;
                let mut cell = [(0u32, T::zero()); 4];
                let mut k = 0;
                for (dy, wy) in [(0i64, 1.0 - wy1), (1, wy1)] {
                    for (dx, wx) in [(0i64, 1.0 - wx1), (1, wx1)] {
                        let yi = y0 as i64 + dy;
                        let xi = x0 as i64 + dx;
                        let weight = wx * wy;
                        if yi >= 0 && (yi as usize) < fh && xi >= 0 && (xi as usize) < fw && weight != 0.0 {
                            cell[k] = ((yi as usize * fw + xi as usize) as u32, T::from_f64(weight));
                        }
                        k += 1;
                    }
                }
                taps.push(cell);
            }
        }
    }

    let data = feat.data();
    let in_spatial = fh * fw;
    let mut out = vec![T::zero(); nb * c * out_spatial];
    for bi in 0..nb {
        let box_taps = &taps[bi * out_spatial..(bi + 1) * out_spatial];
        for ci in 0..c {
            let src = &data[ci * in_spatial..(ci + 1) * in_spatial];
            let dst = &mut out[(bi * c + ci) * out_spatial..(bi * c + ci + 1) * out_spatial];
            for (cell, o) in box_taps.iter().zip(dst.iter_mut()) {
                let mut acc = T::zero();
                for &(idx, w) in cell {
                    if w != T::zero() {
                        acc += src[idx as usize] * w;
                    }
                }
                *o = acc;
            }
        }
    }
    drop(data);

    let feat_c = feat.clone();
    let numel = c * in_spatial;
    Ok(Tensor::from_op(
        vec![nb, c, out_size, out_size],
        out,
        vec![feat.clone()],
        move |grad: &[T]| {
            let mut gx = vec![T::zero(); numel];
            for bi in 0..nb {
                let box_taps = &taps[bi * out_spatial..(bi + 1) * out_spatial];
                for ci in 0..c {
                    let go = &grad[(bi * c + ci) * out_spatial..(bi * c + ci + 1) * out_spatial];
                    let gslab = &mut gx[ci * in_spatial..(ci + 1) * in_spatial];
                    for (cell, &g) in box_taps.iter().zip(go.iter()) {
                        if g == T::zero() {
                            continue;
                        }
                        for &(idx, w) in cell {
                            if w != T::zero() {
                                gslab[idx as usize] += w * g;
                            }
                        }
                    }
                }
            }
            feat_c.accumulate_grad_if_tracked(&gx);
        },
    ))
}

/// One detection record per (scene, instance) query.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: u64,
    pub instance_id: u64,
    /// `[x1, y1, x2, y2, score]`, sorted by descending score.
    pub boxes: Vec<[f64; 5]>,
}

/// One JSON record per line.
pub fn write_detections(path: &std::path::Path, records: &[DetectionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_detections(path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2d {
        Box2d { x1, y1, x2, y2 }
    }

    #[test]
    fn iou_hand_cases() {
        assert_eq!(box_iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)).unwrap(), 1.0);
        let iou = box_iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!((iou - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(box_iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut rng = crate::rng::stream_rng(31, 0, 0);
        for _ in 0..200 {
            let mut coords = || {
                let x1: f64 = rand::Rng::gen_range(&mut rng, 0.0..50.0);
                let w: f64 = rand::Rng::gen_range(&mut rng, 1.0..30.0);
                (x1, x1 + w)
            };
            let (x1, x2) = coords();
            let (y1, y2) = coords();
            let (p1, p2) = coords();
            let (q1, q2) = coords();
            let a = b(x1, y1, x2, y2);
            let c = b(p1, q1, p2, q2);
            let ab = box_iou(&a, &c).unwrap();
            let ba = box_iou(&c, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                assert_eq!(a, c);
            }
        }
    }

    #[test]
    fn degenerate_box_errors() {
        assert!(box_iou(&b(5.0, 0.0, 5.0, 10.0), &b(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(Box2d::new(3.0, 2.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn anchor_grid_is_dense_and_row_major() {
        let anchors = generate_anchors(64, 8, &[24.0], &[1.0]);
        assert_eq!(anchors.len(), 64);
        for a in &anchors {
            a.validate().unwrap();
            assert!(a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= 64.0 && a.y2 <= 64.0);
        }
        // Row-major: second anchor is one stride to the right.
        let (c0x, c0y) = anchors[0].center();
        let (c1x, c1y) = anchors[1].center();
        assert_eq!(c1y, c0y);
        assert!(c1x > c0x);
    }

    #[test]
    fn objectness_targets_match_hand_iou() {
        let anchors = vec![b(0.0, 0.0, 10.0, 10.0), b(30.0, 30.0, 40.0, 40.0)];
        let gts = vec![b(5.0, 0.0, 15.0, 10.0)];
        let (targets, deltas) = assign_objectness_targets(&anchors, &gts).unwrap();
        assert!((targets[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(targets[1], 0.0);
        assert!(deltas[0].is_some() && deltas[1].is_none());
        // Decoding the assigned delta recovers the ground-truth box.
        let dec = decode_delta(&anchors[0], deltas[0].unwrap());
        assert!((dec.x1 - 5.0).abs() < 1e-9 && (dec.x2 - 15.0).abs() < 1e-9);
    }

    #[test]
    fn no_gt_means_zero_targets() {
        let anchors = generate_anchors(64, 8, &[24.0], &[1.0]);
        let (targets, deltas) = assign_objectness_targets(&anchors, &[]).unwrap();
        assert!(targets.iter().all(|&t| t == 0.0));
        assert!(deltas.iter().all(|d| d.is_none()));
    }

    #[test]
    fn anchor_equal_to_gt_scores_one() {
        let anchors = vec![b(8.0, 8.0, 24.0, 24.0)];
        let (targets, _) = assign_objectness_targets(&anchors, &[b(8.0, 8.0, 24.0, 24.0)]).unwrap();
        assert_eq!(targets[0], 1.0);
    }

    #[test]
    fn topk_pads_and_collapses_duplicates() {
        let anchors = generate_anchors(64, 8, &[24.0], &[1.0]);
        let cands = vec![b(0.0, 0.0, 10.0, 10.0), b(0.1, 0.0, 10.1, 10.0), b(40.0, 40.0, 60.0, 60.0)];
        let scores = vec![0.9, 0.8, 0.7];
        let deltas = vec![None, None, None];
        let set = select_topk_proposals(&scores, &cands, &deltas, 8, 64, &anchors).unwrap();
        assert_eq!(set.len(), 8);
        // The near-duplicate (IoU ~0.98) collapsed; padding came from the grid.
        assert_eq!(set.boxes[0], cands[0].clip(64.0, 64.0));
        assert_eq!(set.boxes[1], cands[2].clip(64.0, 64.0));
        assert_eq!(set.boxes[2], anchors[0]);
    }

    #[test]
    fn topk_breaks_ties_by_index() {
        let cands = vec![b(0.0, 0.0, 10.0, 10.0), b(30.0, 30.0, 40.0, 40.0)];
        let set =
            select_topk_proposals(&[0.5, 0.5], &cands, &[None, None], 2, 64, &[]).unwrap();
        assert_eq!(set.boxes[0], cands[0]);
        assert_eq!(set.boxes[1], cands[1]);
    }

    #[test]
    fn oracle_zero_jitter_contains_exact_gt() {
        let gts = vec![b(10.0, 10.0, 30.0, 30.0), b(40.0, 12.0, 58.0, 36.0)];
        let spec = JitterSpec { shift_frac: 0.0, size_frac: 0.0, positives_per_gt: 2 };
        let set = oracle_jitter_proposals(&gts, 16, &spec, 64, 7).unwrap();
        assert_eq!(set.len(), 16);
        for gt in &gts {
            assert!(set.boxes.iter().any(|p| p == gt));
        }
        // Sorted by descending objectness, and top entries are the exact hits.
        assert!(set.objectness.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(set.objectness[0], 1.0);
    }

    #[test]
    fn oracle_guarantees_a_strong_positive_per_gt() {
        let gts = vec![b(10.0, 10.0, 30.0, 30.0), b(40.0, 12.0, 58.0, 36.0)];
        let spec = JitterSpec { shift_frac: 0.3, size_frac: 0.3, positives_per_gt: 3 };
        for seed in 0..20 {
            let set = oracle_jitter_proposals(&gts, 24, &spec, 64, seed).unwrap();
            for gt in &gts {
                let best = set
                    .boxes
                    .iter()
                    .map(|p| box_iou(p, gt).unwrap())
                    .fold(0.0f64, f64::max);
                assert!(best >= 0.5, "seed {seed}: best IoU {best}");
            }
        }
    }

    #[test]
    fn oracle_is_seed_reproducible() {
        let gts = vec![b(10.0, 10.0, 30.0, 30.0)];
        let spec = JitterSpec::default();
        let a = oracle_jitter_proposals(&gts, 12, &spec, 64, 99).unwrap();
        let c = oracle_jitter_proposals(&gts, 12, &spec, 64, 99).unwrap();
        assert_eq!(a.boxes, c.boxes);
        assert_eq!(a.objectness, c.objectness);
    }

    #[test]
    fn roi_full_image_identity() {
        let vals: Vec<f64> = (0..2 * 8 * 8).map(|i| (i as f64 * 0.31).sin()).collect();
        let feat = Tensor::from_vec(&[1, 2, 8, 8], vals.clone(), false);
        let crop = roi_crop(&feat, &[b(0.0, 0.0, 64.0, 64.0)], 8, 8.0).unwrap();
        let out = crop.to_vec();
        for (i, (&got, &want)) in out.iter().zip(&vals).enumerate() {
            assert!((got - want).abs() < 1e-6, "at {i}: {got} vs {want}");
        }
    }

    #[test]
    fn roi_constant_map_gives_constant_crops() {
        let feat = Tensor::<f64>::full(&[1, 1, 8, 8], 3.5);
        let crop = roi_crop(&feat, &[b(12.0, 9.0, 37.0, 30.0)], 4, 8.0).unwrap();
        for v in crop.to_vec() {
            assert!((v - 3.5).abs() < 1e-9);
        }
    }

    #[test]
    fn roi_is_linear_in_features() {
        let mut rng = crate::rng::stream_rng(41, 0, 0);
        let feat = Tensor::<f64>::rand_uniform(&[1, 2, 8, 8], 0.0, 1.0, &mut rng, false);
        let boxes = [b(4.0, 6.0, 40.0, 50.0)];
        let one = roi_crop(&feat, &boxes, 4, 8.0).unwrap().to_vec();
        let scaled = roi_crop(&feat.scale(2.5), &boxes, 4, 8.0).unwrap().to_vec();
        for (a, s) in one.iter().zip(&scaled) {
            assert!((2.5 * a - s).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_gradient_matches_finite_differences() {
        use crate::tensor::{grad_check, Probe};
        let boxes = vec![b(5.0, 3.0, 45.0, 51.0), b(0.0, 0.0, 64.0, 64.0)];
        let x0: Vec<f64> = (0..64).map(|i| ((i * 11 + 3) % 19) as f64 / 19.0).collect();
        let weights: Vec<f64> = (0..2 * 1 * 16).map(|i| ((i * 5 + 1) % 13) as f64 / 13.0 - 0.3).collect();
        let report = grad_check(
            &move |x| {
                let crop = roi_crop(x, &boxes, 4, 8.0)?;
                let w = Tensor::from_vec(&crop.shape().to_vec(), weights.clone(), false);
                Ok(crop.mul(&w)?.sum())
            },
            &[1, 1, 8, 8],
            &x0,
            Probe::All,
        )
        .unwrap();
        assert!(report.passes(1e-8), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detections_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        let records = vec![DetectionRecord {
            scene_id: 3,
            instance_id: 7,
            boxes: vec![[1.0, 2.0, 3.0, 4.0, 0.9], [0.0, 0.0, 5.0, 5.0, 0.1]],
        }];
        write_detections(&path, &records).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].scene_id, 3);
        assert_eq!(back[0].instance_id, 7);
        assert_eq!(back[0].boxes, records[0].boxes);
    }
}
