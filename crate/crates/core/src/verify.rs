//! Self-verification suite: numerical oracles that a correct build passes.
//!
//! Four families, each independent of the implementation it checks:
//! central-difference gradient probes for every nontrivial differentiable
//! op; rotation and warp fixtures with hand-computable answers; template
//! aggregation algebra (permutation invariance, single-view reduction);
//! and the recall harness against a brute-force oracle. The CLI `verify`
//! subcommand prints one line per check; the acceptance tests reuse the
//! same functions.

use crate::geometry::warp::cell_center;
use crate::geometry::{
    geodesic_angle, rot6d_to_matrix_batch, rotation_loss_batch, rotate_voxel, Rot6d,
    RotationMatrix,
};
use crate::net::{Model, NetConfig, RelationKind};
use crate::pipeline::{ar_at_thresholds, recall_thresholds, template_forward};
use crate::proposals::{roi_crop, Box2d};
use crate::rng::stream_rng;
use crate::synth::ImageBuf;
use crate::tensor::{
    bce_with_logits, conv2d, conv3d, conv_transpose3d, grad_check, l1_loss, Probe, Tensor,
};
use crate::{Error, Result};
use rand::Rng;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured figure and its bound, human-readable.
    pub detail: String,
}

impl Check {
    fn bound(name: &str, value: f64, bound: f64) -> Check {
        Check {
            name: name.to_string(),
            passed: value < bound,
            detail: format!("{value:.3e} (bound {bound:.0e})"),
        }
    }
}

const GRAD_TOL: f64 = 1e-5;

fn rand_vec(n: usize, seed: u64, ctx: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, ctx, 0);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A fixed random linear functional: distinct per-element cotangents catch
/// index bugs that a plain `.sum()` (all-ones adjoint) would mask.
fn mask_sum(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let m = Tensor::from_vec(y.shape(), rand_vec(y.numel(), seed, 0x77), false);
    Ok(y.mul(&m)?.sum())
}

// ── gradient suite ──

/// Central-difference checks for every differentiable op family, probing
/// `points` random coordinates of each argument in double precision.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<Check>> {
    let probe = || Probe::Sample(points, seed);
    let mut checks = Vec::new();
    let mut run = |name: &str,
                   f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
                   shape: &[usize],
                   x0: &[f64]|
     -> Result<()> {
        let rep = grad_check(f, shape, x0, probe())?;
        checks.push(Check::bound(&format!("grad/{name}"), rep.max_rel_err, GRAD_TOL));
        Ok(())
    };

    // conv2d: plain, strided, grouped; input / weight / bias sides.
    let w2 = Tensor::from_vec(&[3, 2, 3, 3], rand_vec(54, seed, 1), false);
    let b2 = Tensor::from_vec(&[3], rand_vec(3, seed, 2), false);
    let x2 = rand_vec(2 * 6 * 6, seed, 3);
    run(
        "conv2d/input",
        &|x| mask_sum(&conv2d(x, &w2, Some(&b2), 1, 1, 1)?, 11),
        &[1, 2, 6, 6],
        &x2,
    )?;
    let x2t = Tensor::from_vec(&[1, 2, 6, 6], x2.clone(), false);
    run(
        "conv2d/weight",
        &|w| mask_sum(&conv2d(&x2t, w, Some(&b2), 1, 1, 1)?, 12),
        &[3, 2, 3, 3],
        &rand_vec(54, seed, 4),
    )?;
    run(
        "conv2d/bias",
        &|b| mask_sum(&conv2d(&x2t, &w2, Some(b), 1, 1, 1)?, 13),
        &[3],
        &rand_vec(3, seed, 5),
    )?;
    let wg = Tensor::from_vec(&[4, 1, 3, 3], rand_vec(36, seed, 6), false);
    run(
        "conv2d/stride2-grouped/input",
        &|x| mask_sum(&conv2d(x, &wg, None, 2, 1, 4)?, 14),
        &[1, 4, 6, 6],
        &rand_vec(4 * 36, seed, 7),
    )?;

    // conv3d, including the channel-grouped relation flavor.
    let w3 = Tensor::from_vec(&[2, 3, 3, 3, 3], rand_vec(162, seed, 8), false);
    let b3 = Tensor::from_vec(&[2], rand_vec(2, seed, 9), false);
    let x3 = rand_vec(3 * 3 * 4 * 4, seed, 10);
    run(
        "conv3d/input",
        &|x| mask_sum(&conv3d(x, &w3, Some(&b3), 1, 1)?, 15),
        &[1, 3, 3, 4, 4],
        &x3,
    )?;
    let x3t = Tensor::from_vec(&[1, 3, 3, 4, 4], x3, false);
    run(
        "conv3d/weight",
        &|w| mask_sum(&conv3d(&x3t, w, Some(&b3), 1, 1)?, 16),
        &[2, 3, 3, 3, 3],
        &rand_vec(162, seed, 11),
    )?;
    let wgr = Tensor::from_vec(&[4, 1, 3, 3, 3], rand_vec(108, seed, 12), false);
    run(
        "conv3d/grouped/input",
        &|x| mask_sum(&conv3d(x, &wgr, None, 1, 4)?, 17),
        &[1, 4, 3, 4, 4],
        &rand_vec(4 * 48, seed, 13),
    )?;

    // Transposed 3D convolution (the 2D→3D lift uses stride 2).
    let wt = Tensor::from_vec(&[3, 2, 2, 2, 2], rand_vec(48, seed, 14), false);
    let xt = rand_vec(3 * 2 * 3 * 3, seed, 15);
    run(
        "conv_transpose3d/input",
        &|x| mask_sum(&conv_transpose3d(x, &wt, None, 2, 0, 0)?, 18),
        &[1, 3, 2, 3, 3],
        &xt,
    )?;
    let xtt = Tensor::from_vec(&[1, 3, 2, 3, 3], xt, false);
    run(
        "conv_transpose3d/weight",
        &|w| mask_sum(&conv_transpose3d(&xtt, w, None, 2, 0, 0)?, 19),
        &[3, 2, 2, 2, 2],
        &rand_vec(48, seed, 16),
    )?;

    // Trilinear grid sampling through a rotation warp, via rotate_voxel.
    let rot = RotationMatrix::<f64>::random_uniform(&mut stream_rng(seed, 0x88, 0));
    run(
        "grid_sample/rotate_voxel/input",
        &|v| mask_sum(&rotate_voxel(v, &rot)?, 20),
        &[1, 2, 4, 4, 4],
        &rand_vec(2 * 64, seed, 17),
    )?;

    // Bilinear ROI crop at fractional box coordinates.
    let boxes =
        vec![Box2d::new(3.3, 2.1, 27.9, 25.4)?, Box2d::new(0.5, 4.0, 14.0, 30.0)?];
    run(
        "roi_crop/input",
        &|x| mask_sum(&roi_crop(x, &boxes, 5, 4.0)?, 21),
        &[1, 3, 8, 8],
        &rand_vec(3 * 64, seed, 18),
    )?;

    // Losses. L1 probes points away from its kink (|pred - target| >> step).
    let targets: Vec<f64> = (0..6).map(|i| 0.1 + 0.13 * i as f64).collect();
    run(
        "bce_with_logits/logits",
        &|x| bce_with_logits(x, &targets),
        &[6, 1],
        &rand_vec(6, seed, 19),
    )?;
    let l1_target = Tensor::from_vec(&[2, 3], vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0], false);
    run("l1_loss/pred", &|x| l1_loss(x, &l1_target), &[2, 3], &rand_vec(6, seed, 20))?;

    // 6D→SO(3) decode chained into the geodesic-style rotation loss.
    let mut rng = stream_rng(seed, 0x89, 0);
    let gts: Vec<RotationMatrix<f64>> = (0..2).map(|_| RotationMatrix::random_uniform(&mut rng)).collect();
    let x6: Vec<f64> = vec![0.9, 0.2, -0.1, 0.15, 1.1, 0.3, -0.2, 0.8, 0.4, 0.9, -0.3, 0.2];
    run(
        "rot6d+rotation_loss/input",
        &|x| {
            let (preds, valid) = rot6d_to_matrix_batch(x)?;
            if !valid.iter().all(|&v| v) {
                return Err(Error::numeric("degenerate 6D probe".to_string()));
            }
            rotation_loss_batch(&preds, &gts, &valid)
        },
        &[2, 6],
        &x6,
    )?;

    // Channel interleaving feeding a grouped conv (the relation op).
    let other = Tensor::from_vec(&[1, 3, 3, 4, 4], rand_vec(3 * 48, seed, 21), false);
    let wrel = Tensor::from_vec(&[3, 2, 3, 3, 3], rand_vec(162, seed, 22), false);
    run(
        "interleave+grouped-conv3d/input",
        &|x| mask_sum(&conv3d(&other.interleave_channels(x)?, &wrel, None, 1, 3)?, 22),
        &[1, 3, 3, 4, 4],
        &rand_vec(3 * 48, seed, 23),
    )?;

    // Pooling used by the support vector / global branch.
    run(
        "global_avg_pool/input",
        &|x| mask_sum(&x.global_avg_pool()?, 23),
        &[2, 3, 4, 4],
        &rand_vec(2 * 48, seed, 24),
    )?;

    Ok(checks)
}

/// A deliberately wrong adjoint (scales the true gradient by 1.01): the
/// checker must flag it. Appended by `verify --negative-control`; the
/// returned check *fails* on a healthy build of the checker.
pub fn wrong_adjoint_probe() -> Result<Check> {
    let broken = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let data: Vec<f64> = x.data().iter().map(|&v| 2.0 * v).collect();
        let p = x.clone();
        let out = Tensor::from_op(
            x.shape().to_vec(),
            data,
            vec![x.clone()],
            Box::new(move |g: &[f64]| {
                let wrong: Vec<f64> = g.iter().map(|&v| 2.02 * v).collect();
                p.accumulate_grad(&wrong);
            }),
        );
        out.sum().mul(&out.sum())
    };
    let rep = grad_check(&broken, &[4], &[0.3, -0.7, 1.1, 0.4], Probe::All)?;
    Ok(Check::bound("grad/negative-control(wrong adjoint)", rep.max_rel_err, GRAD_TOL))
}

// ── rotation and warp oracles ──

/// All 24 axis-aligned rotations: signed permutation matrices with
/// determinant +1, built by brute force over the 48 signed permutations.
pub fn axis_aligned_rotations() -> Vec<RotationMatrix<f64>> {
    let mut out = Vec::new();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for perm in perms {
        for signs in 0..8u8 {
            let mut m = [0.0f64; 9];
            for (row, &col) in perm.iter().enumerate() {
                let s = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
                m[row * 3 + col] = s;
            }
            let r = RotationMatrix::from_array(m);
            if (r.det() - 1.0).abs() < 1e-12 {
                out.push(r);
            }
        }
    }
    assert_eq!(out.len(), 24);
    out
}

pub fn rotation_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut rng = stream_rng(seed, 0x8a, 0);

    // 6D round-trip: decode(encode(R)) stays within 1e-6 geodesically.
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let r = RotationMatrix::<f64>::random_uniform(&mut rng);
        let back = Rot6d::from_matrix(&r).to_matrix()?;
        worst = worst.max(geodesic_angle(&r, &back));
    }
    checks.push(Check::bound("rotation/rot6d-roundtrip", worst, 1e-6));

    // Fixed point: the loss of a rotation against itself is zero.
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let r = RotationMatrix::<f64>::random_uniform(&mut rng);
        let pred = Tensor::from_vec(&[1, 9], r.as_array().to_vec(), false);
        worst = worst.max(rotation_loss_batch(&pred, &[r], &[true])?.item());
    }
    checks.push(Check::bound("rotation/loss-fixed-point", worst, 1e-6));

    // A half-turn about z scores exactly sqrt(8) against the identity.
    let half_turn = RotationMatrix::from_array([-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
    let pred = Tensor::from_vec(&[1, 9], RotationMatrix::<f64>::identity().as_array().to_vec(), false);
    let loss = rotation_loss_batch(&pred, &[half_turn], &[true])?.item();
    checks.push(Check::bound("rotation/loss-sqrt8-fixture", (loss - 8.0f64.sqrt()).abs(), 1e-6));

    // Identity warp returns the volume bit-for-bit.
    let v = Tensor::from_vec(&[1, 2, 3, 3, 3], rand_vec(54, seed, 30), false);
    let w = rotate_voxel(&v, &RotationMatrix::identity())?;
    let exact = v
        .to_vec()
        .iter()
        .zip(w.to_vec().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(Check {
        name: "warp/identity-exact".to_string(),
        passed: exact,
        detail: if exact { "bit-identical".to_string() } else { "differs".to_string() },
    });

    // For axis-aligned rotations every cell center maps onto a cell
    // center, so trilinear sampling must equal an index permutation
    // computed straight from the geometry.
    let n = 3usize;
    let vol: Vec<f64> = (0..n * n * n).map(|i| i as f64 + 1.0).collect();
    let v = Tensor::from_vec(&[1, 1, n, n, n], vol.clone(), false);
    let mut worst = 0.0f64;
    for r in axis_aligned_rotations() {
        let rotated = rotate_voxel(&v, &r)?;
        let got = rotated.to_vec();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    // The sample point for output cell c is rᵀ·center(c).
                    let c = [cell_center::<f64>(x, n), cell_center::<f64>(y, n), cell_center::<f64>(z, n)];
                    let s = r.apply_transpose(c);
                    let idx = |p: f64| -> usize {
                        let f = (p + 1.0) * n as f64 / 2.0 - 0.5;
                        let i = f.round();
                        assert!((f - i).abs() < 1e-9, "not cell-aligned");
                        i as usize
                    };
                    let (sx, sy, sz) = (idx(s[0]), idx(s[1]), idx(s[2]));
                    let want = vol[(sz * n + sy) * n + sx];
                    let have = got[(z * n + y) * n + x];
                    worst = worst.max((want - have).abs());
                }
            }
        }
    }
    checks.push(Check::bound("warp/axis-aligned-index-oracle", worst, 1e-9));

    // Rotating forward then back loses little on a smooth volume.
    let m = 8usize;
    let smooth: Vec<f64> = (0..m * m * m)
        .map(|i| {
            let z = cell_center::<f64>(i / (m * m), m);
            let y = cell_center::<f64>(i / m % m, m);
            let x = cell_center::<f64>(i % m, m);
            (1.3 * x).sin() * (0.9 * y).cos() + 0.5 * (1.1 * z).sin()
        })
        .collect();
    let v = Tensor::from_vec(&[1, 1, m, m, m], smooth.clone(), false);
    let r = RotationMatrix::<f64>::random_uniform(&mut rng);
    let back = rotate_voxel(&rotate_voxel(&v, &r)?, &r.transpose())?;
    // Corners leave the unit ball under rotation and return zeroed; judge
    // the interior (cells whose center stays inside either warp).
    let bv = back.to_vec();
    let mut se = 0.0;
    let mut cnt = 0usize;
    for i in 0..m * m * m {
        let z = cell_center::<f64>(i / (m * m), m);
        let y = cell_center::<f64>(i / m % m, m);
        let x = cell_center::<f64>(i % m, m);
        if (x * x + y * y + z * z).sqrt() <= 1.0 - 1.0 / m as f64 {
            se += (bv[i] - smooth[i]).powi(2);
            cnt += 1;
        }
    }
    checks.push(Check::bound("warp/inverse-rms-interior", (se / cnt as f64).sqrt(), 0.05));

    Ok(checks)
}

// ── template aggregation properties ──

fn net_for_templates() -> NetConfig {
    NetConfig {
        image_size: 64,
        enc_channels: 16,
        roi_size: 7,
        lift_depth: 8,
        voxel_channels: 8,
        voxel_depth: 8,
        voxel_size: 7,
        num_templates: 4,
        heldout_views: 1,
        num_proposals: 8,
        mlp_hidden: 16,
        dec_channels: 16,
    }
}

fn noise_image(size: usize, seed: u64, ctx: u64) -> ImageBuf {
    let mut rng = stream_rng(seed, ctx, 0);
    let data: Vec<f32> = (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageBuf { h: size, w: size, data }
}

pub fn template_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let cfg = net_for_templates();
    let model = Model::<f64>::new(&cfg, RelationKind::Interleaved, seed)?;
    let mut rng = stream_rng(seed, 0x8b, 0);

    let images: Vec<ImageBuf> = (0..4).map(|i| noise_image(64, seed, 0x90 + i as u64)).collect();
    let mut rotations = vec![RotationMatrix::<f64>::identity()];
    rotations.extend((0..3).map(|_| RotationMatrix::random_uniform(&mut rng)));

    let refs: Vec<&ImageBuf> = images.iter().collect();
    let (base, _) = template_forward(&model, &refs, &rotations)?;

    // Aggregation is a mean over views: any view order gives the same
    // template volume and support vector.
    let perm = [2usize, 0, 3, 1];
    let p_imgs: Vec<&ImageBuf> = perm.iter().map(|&i| &images[i]).collect();
    let p_rots: Vec<RotationMatrix<f64>> = perm.iter().map(|&i| rotations[i]).collect();
    let (permuted, _) = template_forward(&model, &p_imgs, &p_rots)?;
    let dv = base
        .v
        .to_vec()
        .iter()
        .zip(permuted.v.to_vec().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let ds = base
        .support_vector
        .to_vec()
        .iter()
        .zip(permuted.support_vector.to_vec().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    checks.push(Check::bound("template/permutation-invariance", dv.max(ds), 1e-6));

    // With one view the mean reduces to that view's aligned volume exactly.
    let (single, roi) = template_forward(&model, &refs[1..2], &rotations[1..2])?;
    let lifted = model.mapping.forward(&roi)?;
    let aligned = rotate_voxel(&lifted, &rotations[1].transpose())?;
    let manual = model.aggregator.conv.forward(&aligned)?;
    let exact = single
        .v
        .to_vec()
        .iter()
        .zip(manual.to_vec().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(Check {
        name: "template/single-view-reduction-exact".to_string(),
        passed: exact,
        detail: if exact { "bit-identical".to_string() } else { "differs".to_string() },
    });

    Ok(checks)
}

// ── recall harness oracle ──

pub fn ar_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut rng = stream_rng(seed, 0x8c, 0);
    let thresholds = recall_thresholds();

    // 20 random pairs vs a brute-force double loop, exact.
    let ranked: Vec<Vec<f64>> = (0..20)
        .map(|_| {
            let len = rng.gen_range(1..=12);
            (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
        })
        .collect();
    let mut agree = true;
    for k in [1usize, 3, 5] {
        let fast = ar_at_thresholds(&ranked, k, &thresholds);
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut hits = 0usize;
            for pair in &ranked {
                let mut hit = false;
                for &iou in pair.iter().take(k) {
                    if iou >= t {
                        hit = true;
                    }
                }
                if hit {
                    hits += 1;
                }
            }
            if fast[ti] != hits as f64 / ranked.len() as f64 {
                agree = false;
            }
        }
    }
    checks.push(Check {
        name: "ar/brute-force-20-pairs-exact".to_string(),
        passed: agree,
        detail: if agree { "exact match".to_string() } else { "mismatch".to_string() },
    });

    // Hand fixture: one pair, one prediction at IoU 0.6 → recall 1 at
    // thresholds 0.50/0.55/0.60, 0 above, mAR exactly 0.3.
    let ar = ar_at_thresholds(&[vec![0.6]], 1, &thresholds);
    let mar = ar.iter().sum::<f64>() / ar.len() as f64;
    let ok = ar[..3] == [1.0, 1.0, 1.0] && ar[3..].iter().all(|&v| v == 0.0) && mar == 0.3;
    checks.push(Check {
        name: "ar/hand-fixture-iou06-mar03".to_string(),
        passed: ok,
        detail: format!("mAR {mar}"),
    });

    Ok(checks)
}

/// Every suite, in report order.
pub fn full_suite(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = gradient_suite(points, seed)?;
    checks.extend(rotation_suite(seed)?);
    checks.extend(template_suite(seed)?);
    checks.extend(ar_suite(seed)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_and_negative_control_trips() {
        for c in full_suite(5, 17).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        let neg = wrong_adjoint_probe().unwrap();
        assert!(!neg.passed, "wrong adjoint slipped through: {}", neg.detail);
    }

    #[test]
    fn axis_aligned_set_has_24_proper_rotations() {
        let rots = axis_aligned_rotations();
        assert_eq!(rots.len(), 24);
        for r in &rots {
            assert!(r.is_rotation(1e-12));
        }
    }
}
