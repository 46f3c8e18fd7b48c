//! Procedural instance dataset: random 3D shapes, an orthographic
//! renderer, multi-view template sets with exact relative rotations, and
//! cluttered query scenes with exact occlusion accounting.
//!
//! Orientation bookkeeping uses one rule everywhere: an image or voxel
//! grid produced "at rotation r" holds content rotated by `r` from the
//! instance's base frame, and template view 0 *is* the base frame
//! (`rotations[0] = I`). Scene placements store their pose relative to
//! that same base frame, so pose targets compose with template rotations
//! by plain matrix products.

pub mod dataset;
pub mod image;

pub use dataset::{build_dataset, load_dataset, Dataset, DatasetConfig, Manifest};
pub use image::{load_image, load_vxim, save_image, save_vxim, ImageBuf};

use crate::geometry::RotationMatrix;
use crate::proposals::Box2d;
use crate::rng::stream_rng;
use crate::{Error, Result};
use rand::Rng;

// ── instances ──

/// Procedural rigid instance: occupancy + per-cell color on a cubic grid.
#[derive(Clone, Debug)]
pub struct InstanceModel {
    pub id: u64,
    /// Cells per axis (grid is `res³`, index order `[d, h, w]`).
    pub res: usize,
    pub occupancy: Vec<bool>,
    /// RGB per cell.
    pub albedo: Vec<[f32; 3]>,
    /// Nominal rendered diameter in scene pixels.
    pub canonical_scale: f64,
}

impl InstanceModel {
    pub fn fill_fraction(&self) -> f64 {
        self.occupancy.iter().filter(|&&o| o).count() as f64 / self.occupancy.len() as f64
    }
}

/// Fraction-of-cube bounds for one primitive.
struct Part {
    kind: u8, // 0 box, 1 ellipsoid, 2 L-shape
    center: [f64; 3],
    half: [f64; 3],
    color: [f32; 3],
}

fn part_contains(p: &Part, q: [f64; 3]) -> bool {
    let rel = [
        (q[0] - p.center[0]) / p.half[0],
        (q[1] - p.center[1]) / p.half[1],
        (q[2] - p.center[2]) / p.half[2],
    ];
    match p.kind {
        0 => rel.iter().all(|v| v.abs() <= 1.0),
        1 => rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2] <= 1.0,
        _ => {
            // L-shape: box minus its (+x, +y) quadrant column.
            rel.iter().all(|v| v.abs() <= 1.0) && !(rel[0] > 0.0 && rel[1] > 0.0)
        }
    }
}

/// Six-connected component check from the first occupied cell.
fn is_connected(occ: &[bool], res: usize) -> bool {
    let total = occ.iter().filter(|&&o| o).count();
    if total == 0 {
        return false;
    }
    let start = occ.iter().position(|&o| o).unwrap();
    let mut seen = vec![false; occ.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0usize;
    while let Some(idx) = stack.pop() {
        reached += 1;
        let z = idx / (res * res);
        let y = (idx / res) % res;
        let x = idx % res;
        let neighbors = [
            (z > 0).then(|| idx - res * res),
            (z + 1 < res).then(|| idx + res * res),
            (y > 0).then(|| idx - res),
            (y + 1 < res).then(|| idx + res),
            (x > 0).then(|| idx - 1),
            (x + 1 < res).then(|| idx + 1),
        ];
        for n in neighbors.into_iter().flatten() {
            if occ[n] && !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    reached == total
}

/// Union of 2–5 random primitives with distinct part colors; rejected and
/// resampled until the occupancy is connected and fills 5–60% of the grid.
pub fn sample_instance(id: u64, res: usize, master_seed: u64) -> Result<InstanceModel> {
    let mut rng = stream_rng(master_seed, 0x01, id);
    let canonical_scale = rng.gen_range(16.0..28.0);
    for _attempt in 0..64 {
        let n_parts = rng.gen_range(2..=5usize);
        let mut parts: Vec<Part> = Vec::with_capacity(n_parts);
        for k in 0..n_parts {
            let center = if k == 0 {
                [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)]
            } else {
                // Anchor later parts near an earlier one so the union stays
                // connected most of the time.
                let base = &parts[rng.gen_range(0..parts.len())];
                let mut c = [0.0; 3];
                for a in 0..3 {
                    c[a] = (base.center[a] + rng.gen_range(-1.0..1.0) * base.half[a]).clamp(0.15, 0.85);
                }
                c
            };
            let half = [
                rng.gen_range(0.08..0.28),
                rng.gen_range(0.08..0.28),
                rng.gen_range(0.08..0.28),
            ];
            let color = [
                rng.gen_range(0.15..0.95) as f32,
                rng.gen_range(0.15..0.95) as f32,
                rng.gen_range(0.15..0.95) as f32,
            ];
            parts.push(Part { kind: rng.gen_range(0..3u8), center, half, color });
        }

        let mut occ = vec![false; res * res * res];
        let mut alb = vec![[0.0f32; 3]; res * res * res];
        for z in 0..res {
            for y in 0..res {
                for x in 0..res {
                    let q = [
                        (x as f64 + 0.5) / res as f64,
                        (y as f64 + 0.5) / res as f64,
                        (z as f64 + 0.5) / res as f64,
                    ];
                    let idx = (z * res + y) * res + x;
                    // Later parts paint over earlier ones.
                    for p in &parts {
                        if part_contains(p, q) {
                            occ[idx] = true;
                            alb[idx] = p.color;
                        }
                    }
                }
            }
        }
        let fill = occ.iter().filter(|&&o| o).count() as f64 / occ.len() as f64;
        if (0.05..=0.60).contains(&fill) && is_connected(&occ, res) {
            return Ok(InstanceModel { id, res, occupancy: occ, albedo: alb, canonical_scale });
        }
    }
    Err(Error::generation(format!("sample_instance: rejection budget exhausted for id {id}")))
}

// ── rendering ──

/// Nearest-cell occupancy probe at a point in `[-1, 1]³` (x, y, z order).
fn occ_at(model: &InstanceModel, q: [f64; 3]) -> Option<usize> {
    let res = model.res;
    let mut idx3 = [0usize; 3];
    for a in 0..3 {
        if q[a] < -1.0 || q[a] >= 1.0 {
            return None;
        }
        let i = ((q[a] + 1.0) * 0.5 * res as f64).floor();
        if i < 0.0 || i >= res as f64 {
            return None;
        }
        idx3[a] = i as usize;
    }
    let idx = (idx3[2] * res + idx3[1]) * res + idx3[0];
    model.occupancy[idx].then_some(idx)
}

/// Orthographic render of the model rotated by `r`, plus the hit mask.
/// Rays march along +z (into the screen); the first occupied cell wins,
/// shaded by its albedo and a fixed directional light against the local
/// occupancy gradient. Background is white.
pub fn render_view_with_mask(
    model: &InstanceModel,
    r: &RotationMatrix<f64>,
    out_size: usize,
) -> (ImageBuf, Vec<bool>) {
    let mut img = ImageBuf::new(out_size, out_size);
    let mut mask = vec![false; out_size * out_size];
    let step = 1.0 / model.res as f64;
    let n_steps = (2.0 / step) as usize + 1;
    // Light from the upper-left, toward the scene.
    let light = {
        let v = [-0.45f64, -0.6, -0.66];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for py in 0..out_size {
        let y = (2 * py + 1) as f64 / out_size as f64 - 1.0;
        for px in 0..out_size {
            let x = (2 * px + 1) as f64 / out_size as f64 - 1.0;
            let mut hit = None;
            for s in 0..n_steps {
                let z = -1.0 + s as f64 * step;
                let q = r.apply_transpose([x, y, z]);
                if let Some(idx) = occ_at(model, q) {
                    hit = Some((idx, [x, y, z]));
                    break;
                }
            }
            let (red, green, blue) = match hit {
                None => (1.0, 1.0, 1.0),
                Some((idx, p)) => {
                    // Occupancy gradient in screen space approximates the
                    // surface normal for shading.
                    let mut g = [0.0f64; 3];
                    for a in 0..3 {
                        for (sign, delta) in [(1.0, step), (-1.0, -step)] {
                            let mut probe = p;
                            probe[a] += delta;
                            let q = r.apply_transpose(probe);
                            if occ_at(model, q).is_some() {
                                g[a] += sign;
                            }
                        }
                    }
                    let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                    let lambert = if gn > 0.0 {
                        // Outward normal is against the gradient.
                        let d = -(g[0] * light[0] + g[1] * light[1] + g[2] * light[2]) / gn;
                        d.max(0.0)
                    } else {
                        0.5
                    };
                    let shade = (0.45 + 0.55 * lambert) as f32;
                    let c = model.albedo[idx];
                    (c[0] * shade, c[1] * shade, c[2] * shade)
                }
            };
            if hit.is_some() {
                mask[py * out_size + px] = true;
            }
            img.set(0, py, px, red);
            img.set(1, py, px, green);
            img.set(2, py, px, blue);
        }
    }
    (img, mask)
}

/// See [`render_view_with_mask`]; this drops the mask.
pub fn render_view(model: &InstanceModel, r: &RotationMatrix<f64>, out_size: usize) -> ImageBuf {
    render_view_with_mask(model, r, out_size).0
}

// ── template sets ──

/// Object-centered views with exact relative rotations; view 0 is the
/// instance base frame.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub instance_id: u64,
    pub images: Vec<ImageBuf>,
    pub rotations: Vec<RotationMatrix<f64>>,
}

/// Minimum pairwise geodesic angle between template orientations.
pub const TEMPLATE_MIN_ANGLE_DEG: f64 = 15.0;

/// `m` views whose orientations keep at least 15° pairwise geodesic
/// distance, view 0 at the identity. Rejection-samples uniform rotations;
/// errors if coverage cannot be met (only possible for very large `m`).
pub fn make_template_set(model: &InstanceModel, m: usize, out_size: usize, master_seed: u64) -> Result<TemplateSet> {
    if m < 2 {
        return Err(Error::config(format!("make_template_set: m = {m} < 2")));
    }
    let mut rng = stream_rng(master_seed, 0x02, model.id);
    let min_angle = TEMPLATE_MIN_ANGLE_DEG.to_radians();
    let mut rotations = vec![RotationMatrix::<f64>::identity()];
    while rotations.len() < m {
        let mut placed = false;
        for _ in 0..256 {
            let cand = RotationMatrix::random_uniform(&mut rng);
            if rotations.iter().all(|r| crate::geometry::geodesic_angle(r, &cand) >= min_angle) {
                rotations.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::generation(format!(
                "make_template_set: cannot place view {} of {m} with {TEMPLATE_MIN_ANGLE_DEG}° separation",
                rotations.len()
            )));
        }
    }
    let images = rotations.iter().map(|r| render_view(model, r, out_size)).collect();
    Ok(TemplateSet { instance_id: model.id, images, rotations })
}

/// Template degradation for robustness sweeps: re-crop each view with a
/// random center shift (up to `shift_ratio` of the frame) and perturb each
/// stored rotation (view 0 excluded, it defines the frame) by a rotation
/// of exactly `angle_noise_deg` about a random axis. Zero noise returns a
/// bit-identical copy.
pub fn add_template_noise(
    ts: &TemplateSet,
    shift_ratio: f64,
    angle_noise_deg: f64,
    master_seed: u64,
) -> Result<TemplateSet> {
    if !(0.0..=0.5).contains(&shift_ratio) {
        return Err(Error::config(format!("add_template_noise: shift_ratio {shift_ratio} outside [0, 0.5]")));
    }
    let mut rng = stream_rng(master_seed, 0x03, ts.instance_id);
    let mut images = Vec::with_capacity(ts.images.len());
    let mut rotations = Vec::with_capacity(ts.rotations.len());
    for (i, (img, rot)) in ts.images.iter().zip(&ts.rotations).enumerate() {
        let (dx, dy) = if shift_ratio == 0.0 {
            (0i64, 0i64)
        } else {
            (
                (rng.gen_range(-1.0..1.0) * shift_ratio * img.w as f64).round() as i64,
                (rng.gen_range(-1.0..1.0) * shift_ratio * img.h as f64).round() as i64,
            )
        };
        let mut shifted = ImageBuf::new(img.h, img.w);
        for c in 0..3 {
            for y in 0..img.h {
                for x in 0..img.w {
                    let sx = x as i64 + dx;
                    let sy = y as i64 + dy;
                    let v = if sx >= 0 && (sx as usize) < img.w && sy >= 0 && (sy as usize) < img.h {
                        img.at(c, sy as usize, sx as usize)
                    } else {
                        1.0 // vacated pixels show background white
                    };
                    shifted.set(c, y, x, v);
                }
            }
        }
        images.push(shifted);

        if i == 0 || angle_noise_deg == 0.0 {
            rotations.push(*rot);
        } else {
            let axis = loop {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                if n2 > 1e-6 && n2 <= 1.0 {
                    break v;
                }
            };
            let noise = RotationMatrix::from_axis_angle(axis, angle_noise_deg.to_radians())?;
            rotations.push(noise.compose(rot));
        }
    }
    Ok(TemplateSet { instance_id: ts.instance_id, images, rotations })
}

// ── query scenes ──

/// One placed instance in a query scene.
#[derive(Clone, Debug)]
pub struct Placement {
    pub instance_id: u64,
    /// Full-extent (amodal) box of the pasted render, image pixels.
    pub gt_box: Box2d,
    /// Pose relative to the instance's template base frame.
    pub pose: RotationMatrix<f64>,
    /// Exactly `1 - visible_pixels / own_pixels` from the pasting masks.
    pub occlusion_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct QueryScene {
    pub scene_id: u64,
    pub image: ImageBuf,
    /// Instances passing the 10% visibility threshold, in paste order.
    pub placements: Vec<Placement>,
}

/// Instances below this visible fraction are dropped from ground truth.
pub const VISIBILITY_THRESHOLD: f64 = 0.10;

/// Smooth random background: a 4x4 per-channel grid, bilinearly upsampled.
fn paint_background(img: &mut ImageBuf, rng: &mut impl Rng) {
    let g = 4usize;
    let mut grid = vec![0.0f64; 3 * g * g];
    for v in grid.iter_mut() {
        *v = rng.gen_range(0.45..0.9);
    }
    for c in 0..3 {
        for y in 0..img.h {
            let fy = (y as f64 + 0.5) / img.h as f64 * (g - 1) as f64;
            let y0 = (fy.floor() as usize).min(g - 2);
            let wy = fy - y0 as f64;
            for x in 0..img.w {
                let fx = (x as f64 + 0.5) / img.w as f64 * (g - 1) as f64;
                let x0 = (fx.floor() as usize).min(g - 2);
                let wx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| grid[(c * g + yy) * g + xx];
                let v = at(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + at(y0, x0 + 1) * (1.0 - wy) * wx
                    + at(y0 + 1, x0) * wy * (1.0 - wx)
                    + at(y0 + 1, x0 + 1) * wy * wx;
                img.set(c, y, x, v as f32);
            }
        }
    }
}

/// Compose a cluttered scene from the given instances at uniform random
/// poses. Later list entries paste in front of earlier ones. Occlusion
/// fractions are exact pixel counts from the pasting masks;
/// `occlusion_target > 0` biases placement toward existing objects (it is
/// a pressure, not a guarantee). Instances with under 10% of their pixels
/// visible are excluded from ground truth.
pub fn compose_scene(
    instances: &[&InstanceModel],
    scene_id: u64,
    image_size: usize,
    occlusion_target: f64,
    master_seed: u64,
) -> Result<QueryScene> {
    if instances.is_empty() {
        return Err(Error::config("compose_scene: no instances".to_string()));
    }
    let mut rng = stream_rng(master_seed, 0x04, scene_id);
    let mut image = ImageBuf::new(image_size, image_size);
    paint_background(&mut image, &mut rng);

    struct Pasted {
        instance_id: u64,
        pose: RotationMatrix<f64>,
        /// Flat pixel indices covered by this instance's own render.
        own: Vec<usize>,
        gt_box: Box2d,
    }

    // Owner of each pixel: index into `pasted`, painted back-to-front.
    let mut owner: Vec<i32> = vec![-1; image_size * image_size];
    let mut pasted: Vec<Pasted> = Vec::new();

    for model in instances {
        let pose = RotationMatrix::random_uniform(&mut rng);
        let size = ((model.canonical_scale * rng.gen_range(0.8..1.25)).round() as usize)
            .clamp(8, image_size.saturating_sub(2));
        let (render, mask) = render_view_with_mask(model, &pose, size);

        // Tight bounds of the render's own silhouette.
        let (mut mx1, mut my1, mut mx2, mut my2) = (size, size, 0usize, 0usize);
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] {
                    mx1 = mx1.min(x);
                    my1 = my1.min(y);
                    mx2 = mx2.max(x + 1);
                    my2 = my2.max(y + 1);
                }
            }
        }
        if mx2 == 0 {
            continue; // empty silhouette cannot happen for valid models
        }

        let max_off = image_size - size;
        let (ox, oy) = if occlusion_target > 0.0 && !pasted.is_empty() && rng.gen_range(0.0..1.0) < occlusion_target
        {
            // Aim near an already-placed box to create overlap.
            let target = &pasted[rng.gen_range(0..pasted.len())];
            let (tcx, tcy) = target.gt_box.center();
            let jitter = size as f64 * 0.5;
            (
                (tcx - size as f64 / 2.0 + rng.gen_range(-jitter..jitter))
                    .clamp(0.0, max_off as f64)
                    .round() as usize,
                (tcy - size as f64 / 2.0 + rng.gen_range(-jitter..jitter))
                    .clamp(0.0, max_off as f64)
                    .round() as usize,
            )
        } else {
            (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off))
        };

        let idx = pasted.len() as i32;
        let mut own = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] {
                    let px = ox + x;
                    let py = oy + y;
                    let flat = py * image_size + px;
                    own.push(flat);
                    owner[flat] = idx;
                    for c in 0..3 {
                        image.set(c, py, px, render.at(c, y, x));
                    }
                }
            }
        }
        pasted.push(Pasted {
            instance_id: model.id,
            pose,
            own,
            gt_box: Box2d {
                x1: (ox + mx1) as f64,
                y1: (oy + my1) as f64,
                x2: (ox + mx2) as f64,
                y2: (oy + my2) as f64,
            },
        });
    }

    let mut placements = Vec::new();
    for (i, p) in pasted.iter().enumerate() {
        let visible = p.own.iter().filter(|&&flat| owner[flat] == i as i32).count();
        let visible_frac = visible as f64 / p.own.len() as f64;
        if visible_frac < VISIBILITY_THRESHOLD {
            continue;
        }
        placements.push(Placement {
            instance_id: p.instance_id,
            gt_box: p.gt_box,
            pose: p.pose,
            occlusion_fraction: 1.0 - visible_frac,
        });
    }
    Ok(QueryScene { scene_id, image, placements })
}
