//! Two-stage training and the shared forward plumbing it is built from.
//!
//! Stage one trains the encoder, 2D→3D mapping, aggregator, and decoder on
//! multi-view reconstruction: a few views of an instance are lifted and
//! fused into a template volume, the remaining views are re-rendered from
//! it, and pixel + feature-space L1 drive the weights. Stage two trains
//! detection: region proposals on a cluttered scene, lifted query volumes,
//! and template/query matching, then a final phase that trains only the
//! rotation head while everything else stays frozen.
//!
//! Determinism contract: every random choice is drawn from a stream keyed
//! by `(seed, context, index)`, so a run is a pure function of its config.
//! Checkpoints carry optimizer state and an epoch counter; resuming an
//! interrupted run reproduces the uninterrupted run bit-for-bit.

pub mod eval;
pub mod report;
pub mod sweeps;

pub use eval::{ar_at_thresholds, evaluate, recall_thresholds, EvalOptions, EvalReport, HeadKind};
pub use report::{emit_report, read_numeric_csv, write_series_csv, LossCurve};
pub use sweeps::{
    run_ablation_grid, sweep_noise, sweep_templates, sweep_topk, AblationRow, NoiseSweep,
    TemplateSweep, TopkSweep,
};

use crate::geometry::{rotation_loss_batch, RotationMatrix};
use crate::net::{
    detection_loss, recon_loss, rotate_each, rotations_from_batch, Encoder, Model, RelationKind,
    TemplateVoxel,
};
use crate::proposals::{
    assign_objectness_targets, box_iou, oracle_jitter_proposals, roi_crop, Box2d, JitterSpec,
};
use crate::rng::{derive_seed, stream_rng};
use crate::synth::dataset::{Dataset, PlacementEntry, SceneEntry, Split};
use crate::synth::ImageBuf;
use crate::tensor::{bce_with_logits, checkpoint, l1_loss, no_grad};
use crate::tensor::{Adam, Optimizer, ParamGroup, Sgd, Tensor};
use crate::{Error, Result, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

// ── stream contexts ──
// Every consumer of randomness inside training owns a context tag, so
// adding a new consumer never shifts another's draws.
const CTX_EPOCH_ORDER: u64 = 0x20;
const CTX_DETECT_ITER: u64 = 0x21;
const CTX_PROPOSALS: u64 = 0x23;
const CTX_RECON_SPLIT: u64 = 0x31;
const CTX_PERCEP_NET: u64 = 0x32;
/// Keys per-iteration streams: `epoch * STREAM_STRIDE + index` never
/// collides as long as an epoch stays under this many iterations.
const STREAM_STRIDE: u64 = 1_000_003;

/// Which training stage a config drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Recon,
    Detect,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Recon => "recon",
            Stage::Detect => "detect",
        }
    }
}

/// Feature switches for the ablation grid. All `true` is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSwitches {
    /// Initialize detection from the reconstruction checkpoint.
    pub recon_init: bool,
    /// Warp query volumes by the predicted rotation before matching.
    pub rotation_align: bool,
    /// Train the rotation head (the final detection phase).
    pub rotation_supervision: bool,
    /// Full interleaved voxel relation vs. the depthwise reduction.
    pub voxel_relation: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            recon_init: true,
            rotation_align: true,
            rotation_supervision: true,
            voxel_relation: true,
        }
    }
}

impl AblationSwitches {
    /// Relation implied by the `voxel_relation` switch.
    pub fn relation_kind(&self) -> RelationKind {
        if self.voxel_relation {
            RelationKind::Interleaved
        } else {
            RelationKind::Depthwise
        }
    }
}

/// Hyperparameters of one training run. Field names double as config-file
/// keys (prefixed with the stage).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Iterations whose losses are averaged per optimizer step.
    pub batch_size: usize,
    /// Base learning rate: Adam for reconstruction, SGD with momentum 0.9
    /// for detection (where the 2D→3D mapping trains at one tenth of it).
    pub lr: f64,
    pub seed: u64,
    /// Pixel-L1 weight of the reconstruction loss.
    pub w_recon: f64,
    /// Feature-space-L1 weight of the reconstruction loss.
    pub w_percep: f64,
    /// Detection term weights: proposal objectness, proposal regression,
    /// box score, box refinement, instance match, rotation.
    pub w: [f64; 6],
    /// Detection epochs in phase one (everything but the rotation head);
    /// the rest train only the rotation head.
    pub phase1_epochs: usize,
    pub ablation: AblationSwitches,
}

impl TrainConfig {
    pub fn recon_default() -> Self {
        TrainConfig {
            stage: Stage::Recon,
            epochs: 20,
            batch_size: 1,
            lr: 1e-3,
            seed: 7,
            w_recon: crate::net::DEFAULT_W_RECON,
            w_percep: crate::net::DEFAULT_W_PERCEP,
            w: [1.0; 6],
            phase1_epochs: 0,
            ablation: AblationSwitches::default(),
        }
    }

    pub fn detect_default() -> Self {
        TrainConfig {
            stage: Stage::Detect,
            epochs: 15,
            batch_size: 1,
            lr: 1e-2,
            seed: 7,
            w_recon: crate::net::DEFAULT_W_RECON,
            w_percep: crate::net::DEFAULT_W_PERCEP,
            w: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            phase1_epochs: 12,
            ablation: AblationSwitches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train: epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train: batch_size must be at least 1".to_string()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("train: bad learning rate {}", self.lr)));
        }
        if self.w_recon < 0.0 || self.w_percep < 0.0 || self.w.iter().any(|&w| w < 0.0) {
            return Err(Error::config("train: loss weights must be non-negative".to_string()));
        }
        if self.stage == Stage::Detect && self.phase1_epochs >= self.epochs {
            return Err(Error::config(format!(
                "train: phase1_epochs ({}) must be below epochs ({})",
                self.phase1_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// What a finished (or resumed-and-finished) training run reports.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs_done: usize,
    /// Mean loss over the first epoch this process ran.
    pub initial_loss: f64,
    /// Mean loss over the final epoch.
    pub final_loss: f64,
}

// ── checkpoint plumbing ──

pub const CHECKPOINT_FILE: &str = "checkpoint.vxg";
const META_STAGE: &str = "meta.stage";
const META_EPOCHS_DONE: &str = "meta.epochs_done";

fn stage_code(stage: Stage) -> f32 {
    match stage {
        Stage::Recon => 1.0,
        Stage::Detect => 2.0,
    }
}

/// Snapshot model parameters, optimizer buffers, and progress counters.
fn save_training_checkpoint<T: Scalar>(
    path: &Path,
    params: &[(String, Tensor<T>)],
    opt_state: &[(String, Vec<T>)],
    stage: Stage,
    epochs_done: usize,
) -> Result<()> {
    let mut entries = checkpoint::entries_from_params(params);
    for (name, buf) in opt_state {
        entries.push(checkpoint::Entry {
            name: name.clone(),
            shape: vec![buf.len()],
            data: buf.iter().map(|&v| v.to_f32()).collect(),
        });
    }
    entries.push(checkpoint::Entry {
        name: META_STAGE.to_string(),
        shape: vec![1],
        data: vec![stage_code(stage)],
    });
    entries.push(checkpoint::Entry {
        name: META_EPOCHS_DONE.to_string(),
        shape: vec![1],
        data: vec![epochs_done as f32],
    });
    checkpoint::save(path, &entries)
}

fn meta_value(entries: &[checkpoint::Entry], name: &str) -> Option<f32> {
    entries.iter().find(|e| e.name == name).map(|e| e.data[0])
}

/// Extract optimizer buffers (entries prefixed `opt.`) as scalar vectors.
fn opt_state_from_entries<T: Scalar>(entries: &[checkpoint::Entry]) -> Vec<(String, Vec<T>)> {
    entries
        .iter()
        .filter(|e| e.name.starts_with("opt."))
        .map(|e| (e.name.clone(), e.data.iter().map(|&v| T::from_f32(v)).collect()))
        .collect()
}

/// Load a training checkpoint into a model, returning how many epochs it
/// already holds. Errors if the file belongs to the other stage.
fn resume_from_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    stage: Stage,
) -> Result<(Vec<checkpoint::Entry>, usize)> {
    let entries = checkpoint::load(path)?;
    let found = meta_value(&entries, META_STAGE)
        .ok_or_else(|| Error::format(format!("{}: no stage marker", path.display())))?;
    if found != stage_code(stage) {
        return Err(Error::config(format!(
            "{}: checkpoint belongs to the other training stage",
            path.display()
        )));
    }
    let done = meta_value(&entries, META_EPOCHS_DONE).unwrap_or(0.0) as usize;
    checkpoint::apply_to_params(&entries, &model.params())?;
    Ok((entries, done))
}

// ── shared forward plumbing ──

/// The whole image as one box, for ROI-cropping template views.
fn full_box(w: usize, h: usize) -> Box2d {
    Box2d { x1: 0.0, y1: 0.0, x2: w as f64, y2: h as f64 }
}

pub fn entry_box(p: &PlacementEntry) -> Box2d {
    Box2d {
        x1: p.box_xyxy[0],
        y1: p.box_xyxy[1],
        x2: p.box_xyxy[2],
        y2: p.box_xyxy[3],
    }
}

/// Encode template views and fuse them into a template volume. Returns the
/// volume plus the stacked `[M, C, w, w]` 2D ROI features (the correlation
/// baseline and the support vector both read them).
pub fn template_forward<T: Scalar>(
    model: &Model<T>,
    images: &[&ImageBuf],
    rotations: &[RotationMatrix<f64>],
) -> Result<(TemplateVoxel<T>, Tensor<T>)> {
    if images.is_empty() || images.len() != rotations.len() {
        return Err(Error::shape(format!(
            "template_forward: {} images vs {} rotations",
            images.len(),
            rotations.len()
        )));
    }
    let mut rois = Vec::with_capacity(images.len());
    for img in images {
        let x = img.to_tensor::<T>();
        let f = model.encoder.forward(&x)?;
        let fb = full_box(img.w, img.h);
        rois.push(roi_crop(&f, &[fb], model.cfg.roi_size, crate::net::NetConfig::STRIDE as f64)?);
    }
    let roi = Tensor::concat_batch(&rois)?; // [M, C, w, w]
    let vox = model.mapping.forward(&roi)?; // [M, C_v, D, L, L]
    let views = (0..images.len())
        .map(|i| vox.gather_rows(&[i]))
        .collect::<Result<Vec<_>>>()?;
    let template = model.aggregator.aggregate(&views, rotations, &roi)?;
    Ok((template, roi))
}

/// [`template_forward`] over the first `count` views of a template set
/// (all views when `None`). View 0 is always included — it anchors the
/// base frame.
pub fn template_forward_set<T: Scalar>(
    model: &Model<T>,
    ts: &crate::synth::TemplateSet,
    count: Option<usize>,
) -> Result<(TemplateVoxel<T>, Tensor<T>)> {
    let m = count.unwrap_or(ts.images.len());
    if m < 1 || m > ts.images.len() {
        return Err(Error::config(format!(
            "template_forward_set: {} views requested of {}",
            m,
            ts.images.len()
        )));
    }
    let images: Vec<&ImageBuf> = ts.images[..m].iter().collect();
    template_forward(model, &images, &ts.rotations[..m])
}

/// Per-query features for one scene: the encoder map, `[N, C, w, w]` ROI
/// crops, their pooled `[N, C]` vectors, and the lifted `[N, C_v, D, L, L]`
/// query volumes.
pub struct QueryFeatures<T: Scalar> {
    pub feat: Tensor<T>,
    pub roi: Tensor<T>,
    pub gap: Tensor<T>,
    pub voxels: Tensor<T>,
}

pub fn query_forward<T: Scalar>(
    model: &Model<T>,
    image: &ImageBuf,
    boxes: &[Box2d],
) -> Result<QueryFeatures<T>> {
    let x = image.to_tensor::<T>();
    let feat = model.encoder.forward(&x)?;
    let roi = roi_crop(&feat, boxes, model.cfg.roi_size, crate::net::NetConfig::STRIDE as f64)?;
    let gap = roi.global_avg_pool()?;
    let voxels = model.mapping.forward(&roi)?;
    Ok(QueryFeatures { feat, roi, gap, voxels })
}

/// A scalar whose gradient into `t`'s subgraph is identically zero. Used
/// when a loss term has no samples this iteration: the parameters behind
/// it still receive (zero) gradients, so the optimizer's accounting stays
/// satisfied without inventing a fake target.
fn zero_anchor<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.sum().scale(T::zero())
}

// ── reconstruction stage ──

struct IterLoss<T: Scalar> {
    total: Tensor<T>,
    /// (term name, value) pairs for the loss curve.
    named: Vec<(&'static str, f64)>,
}

/// One instance's reconstruction loss: a seeded split of its views into
/// inputs and held-out targets, the inputs fused into a template volume,
/// each target re-rendered from it and scored against the real view.
fn recon_iteration<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    phi: &Encoder<T>,
    instance_id: u64,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<IterLoss<T>> {
    let ts = ds.load_template_set(instance_id)?;
    let m = ts.images.len();
    if m < 2 {
        return Err(Error::training(format!("instance {instance_id}: need at least 2 views")));
    }
    let k = model.cfg.heldout_views.min(m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = stream_rng(cfg.seed, CTX_RECON_SPLIT, epoch as u64 * STREAM_STRIDE + instance_id);
    order.shuffle(&mut rng);
    let (targets, inputs) = order.split_at(k);

    let images: Vec<&ImageBuf> = inputs.iter().map(|&i| &ts.images[i]).collect();
    let rotations: Vec<RotationMatrix<f64>> = inputs.iter().map(|&i| ts.rotations[i]).collect();
    let (template, _) = template_forward(model, &images, &rotations)?;

    let mut total: Option<Tensor<T>> = None;
    let mut pixel_sum = 0.0;
    for &j in targets {
        let fake = model.decoder.forward(&template.v, &ts.rotations[j])?;
        let real = ts.images[j].to_tensor::<T>();
        let term = recon_loss(&fake, &real, phi, T::from_f64(cfg.w_recon), T::from_f64(cfg.w_percep))?;
        pixel_sum += no_grad(|| l1_loss(&fake, &real)).map(|t| t.item().to_f64())?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let total = total.unwrap().scale(T::one() / T::from_usize(k));
    let total_v = total.item().to_f64();
    let pixel = pixel_sum / k as f64;
    Ok(IterLoss {
        total,
        named: vec![
            ("pixel_l1", pixel),
            ("percep", total_v - cfg.w_recon * pixel),
        ],
    })
}

/// Train the reconstruction stage. Writes a loss-curve CSV and a combined
/// model+optimizer checkpoint (refreshed every epoch) under `out_dir`;
/// resumes from that checkpoint when present.
pub fn train_reconstruction<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Recon {
        return Err(Error::config("train_reconstruction: config is for another stage".to_string()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);

    let mut opt = Adam::new(vec![ParamGroup::new(model.recon_params())], T::from_f64(cfg.lr));
    let mut start_epoch = 1usize;
    if ckpt_path.exists() {
        let (entries, done) = resume_from_checkpoint(&ckpt_path, model, Stage::Recon)?;
        opt.load_state(&opt_state_from_entries(&entries))?;
        start_epoch = done + 1;
        println!("recon: resuming after epoch {done}");
    }

    // The feature-space loss compares activations of a frozen encoder that
    // is seeded independently of the trained one, so it is identical no
    // matter when (or whether) a run was interrupted.
    let phi =
        Encoder::<T>::new(model.cfg.enc_channels, &mut stream_rng(cfg.seed, CTX_PERCEP_NET, 0))
            .frozen_clone();

    let instances: Vec<u64> = ds.instances(Split::Train).to_vec();
    if instances.is_empty() {
        return Err(Error::training("recon: no training instances".to_string()));
    }
    let mut curve = report::LossCurve::new(&["pixel_l1", "percep"]);
    let csv_path = out_dir.join("recon_losses.csv");
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for epoch in start_epoch..=cfg.epochs {
        let mut order: Vec<u64> = instances.clone();
        order.shuffle(&mut stream_rng(cfg.seed, CTX_EPOCH_ORDER, epoch as u64));
        let mut epoch_sum = 0.0;
        let mut batch: Vec<Tensor<T>> = Vec::new();
        for (it, &instance_id) in order.iter().enumerate() {
            let loss = recon_iteration(model, ds, &phi, instance_id, epoch, cfg)?;
            let v = loss.total.item().to_f64();
            if !v.is_finite() {
                return Err(Error::training(format!(
                    "recon: non-finite loss at epoch {epoch}, instance {instance_id}"
                )));
            }
            epoch_sum += v;
            curve.push(epoch, it, &loss.named, v);
            batch.push(loss.total);
            let flush = batch.len() == cfg.batch_size || it + 1 == order.len();
            if flush {
                let mut acc = batch[0].clone();
                for b in &batch[1..] {
                    acc = acc.add(b)?;
                }
                let acc = acc.scale(T::one() / T::from_usize(batch.len()));
                opt.zero_grad();
                acc.backward()?;
                opt.step()?;
                batch.clear();
            }
        }
        let mean = epoch_sum / order.len() as f64;
        if initial_loss.is_nan() {
            initial_loss = mean;
        }
        final_loss = mean;
        println!("recon: epoch {epoch}/{} mean loss {mean:.5}", cfg.epochs);
        save_training_checkpoint(&ckpt_path, &model.params(), &opt.state(), Stage::Recon, epoch)?;
        curve.append_to(&csv_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        epochs_done: cfg.epochs,
        initial_loss,
        final_loss,
    })
}

// ── detection stage ──

/// One detection iteration: sample a target placement in the scene, build
/// proposals, and assemble the weighted loss for the given phase. Returns
/// `None` when the iteration has nothing to train (no positives in phase
/// two, or phase two with rotation supervision ablated).
fn detect_iteration<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    scene: &SceneEntry,
    phase: u8,
    cfg: &TrainConfig,
    epoch: usize,
    iter_in_epoch: usize,
) -> Result<Option<IterLoss<T>>> {
    if scene.placements.is_empty() {
        return Ok(None);
    }
    if phase == 2 && !cfg.ablation.rotation_supervision {
        return Ok(None);
    }
    let key = epoch as u64 * STREAM_STRIDE + iter_in_epoch as u64;
    let mut rng = stream_rng(cfg.seed, CTX_DETECT_ITER, key);
    let slot = rng.gen_range(0..scene.placements.len());
    let target = &scene.placements[slot];
    let gt_boxes: Vec<Box2d> = scene.placements.iter().map(entry_box).collect();

    let image = ds.load_scene_image(scene.scene_id)?;
    let image_size = image.w;
    let props = oracle_jitter_proposals(
        &gt_boxes,
        model.cfg.num_proposals,
        &JitterSpec::default(),
        image_size,
        derive_seed(cfg.seed, CTX_PROPOSALS, key),
    )?;

    // Per-proposal targets against the scene's boxes.
    let n = props.len();
    let mut best_iou = vec![0.0f64; n]; // vs any instance
    let mut best_target_iou = vec![0.0f64; n]; // vs the target instance
    let mut best_target_slot = vec![usize::MAX; n];
    for (i, b) in props.boxes.iter().enumerate() {
        for (j, p) in scene.placements.iter().enumerate() {
            let iou = box_iou(b, &entry_box(p))?;
            if iou > best_iou[i] {
                best_iou[i] = iou;
            }
            if p.instance_id == target.instance_id && iou > best_target_iou[i] {
                best_target_iou[i] = iou;
                best_target_slot[i] = j;
            }
        }
    }
    let positives: Vec<usize> = (0..n).filter(|&i| best_target_iou[i] >= 0.5).collect();

    let ts = ds.load_template_set(target.instance_id)?;

    if phase == 2 {
        if positives.is_empty() {
            return Ok(None);
        }
        // Feature extraction is frozen in this phase; only the rotation
        // head sits on the tape.
        let (template, queries) = no_grad(|| -> Result<(TemplateVoxel<T>, Tensor<T>)> {
            let q = query_forward(model, &image, &props.boxes)?;
            let (template, _) = template_forward_set(model, &ts, None)?;
            Ok((template, q.voxels.gather_rows(&positives)?))
        })?;
        let (preds, valid) = model.rotation_head.forward(&template.v, &queries)?;
        if valid.iter().all(|v| !v) {
            return Ok(None);
        }
        let gts: Vec<RotationMatrix<T>> = positives
            .iter()
            .map(|&i| {
                let pose = RotationMatrix::from_array(scene.placements[best_target_slot[i]].pose);
                pose.transpose().cast::<T>()
            })
            .collect();
        let rot = rotation_loss_batch(&preds, &gts, &valid)?;
        let rot_v = rot.item().to_f64();
        let zero = Tensor::scalar(T::zero());
        let terms = [&zero, &zero, &zero, &zero, &zero, &rot];
        let weights: Vec<T> = [0.0, 0.0, 0.0, 0.0, 0.0, cfg.w[5]].map(T::from_f64).to_vec();
        let total = detection_loss(&terms, &weights)?;
        return Ok(Some(IterLoss {
            total,
            named: vec![("rot", rot_v)],
        }));
    }

    // Phase one: everything except the rotation head.
    let q = query_forward(model, &image, &props.boxes)?;

    // Proposal-network supervision on a balanced anchor sample.
    let anchors = model.rpn.anchors(image_size, crate::net::NetConfig::STRIDE);
    let (anchor_targets, anchor_deltas) = assign_objectness_targets(&anchors, &gt_boxes)?;
    let (obj, reg) = model.rpn.forward(&q.feat)?;
    let hw = obj.shape()[2] * obj.shape()[3];
    let num_anchors = anchors.len();
    let mut high: Vec<usize> = (0..num_anchors).filter(|&i| anchor_targets[i] >= 0.3).collect();
    let mut low: Vec<usize> = (0..num_anchors).filter(|&i| anchor_targets[i] < 0.3).collect();
    high.shuffle(&mut rng);
    low.shuffle(&mut rng);
    high.truncate(32);
    low.truncate(32);
    let sample: Vec<usize> = high.iter().chain(low.iter()).copied().collect();
    let obj_flat = obj.reshape(&[num_anchors, 1])?;
    let obj_logits = obj_flat.gather_rows(&sample)?;
    let obj_targets: Vec<T> =
        sample.iter().map(|&i| T::from_f64(anchor_targets[i])).collect();
    let rpn_obj = bce_with_logits(&obj_logits, &obj_targets)?;

    let mut reg_pos: Vec<usize> = (0..num_anchors).filter(|&i| anchor_deltas[i].is_some()).collect();
    reg_pos.shuffle(&mut rng);
    reg_pos.truncate(32);
    let reg_flat = reg.reshape(&[4 * num_anchors, 1])?;
    let rpn_reg = if reg_pos.is_empty() {
        zero_anchor(&reg_flat)
    } else {
        let mut rows = Vec::with_capacity(4 * reg_pos.len());
        let mut target_vals: Vec<T> = Vec::with_capacity(4 * reg_pos.len());
        for &k in &reg_pos {
            let (a, pos) = (k / hw, k % hw);
            let delta = anchor_deltas[k].unwrap();
            for (j, &d) in delta.iter().enumerate() {
                rows.push((a * 4 + j) * hw + pos);
                target_vals.push(T::from_f64(d));
            }
        }
        let pred = reg_flat.gather_rows(&rows)?;
        let target = Tensor::from_vec(&[rows.len(), 1], target_vals, false);
        l1_loss(&pred, &target)?
    };

    // Box head: score every proposal by its best overlap, refine the ones
    // overlapping at least 0.5 toward their best box.
    let (score, delta) = model.roi_head.forward(&q.roi)?;
    let score_targets: Vec<T> = best_iou.iter().map(|&v| T::from_f64(v)).collect();
    let roi_cls = bce_with_logits(&score, &score_targets)?;
    let refine: Vec<usize> = (0..n).filter(|&i| best_iou[i] >= 0.5).collect();
    let roi_reg = if refine.is_empty() {
        zero_anchor(&delta)
    } else {
        let mut target_vals: Vec<T> = Vec::with_capacity(4 * refine.len());
        for &i in &refine {
            let mut best = (0.0, 0usize);
            for (j, p) in scene.placements.iter().enumerate() {
                let iou = box_iou(&props.boxes[i], &entry_box(p))?;
                if iou > best.0 {
                    best = (iou, j);
                }
            }
            let d = crate::proposals::encode_delta(&props.boxes[i], &entry_box(&scene.placements[best.1]));
            target_vals.extend(d.map(T::from_f64));
        }
        let pred = delta.gather_rows(&refine)?;
        let target = Tensor::from_vec(&[refine.len(), 4], target_vals, false);
        l1_loss(&pred, &target)?
    };

    // Template/query matching with rotation alignment (the rotation head
    // runs outside the tape here: its output is a fixed warp, trained
    // separately in phase two).
    let (template, template_roi) = template_forward_set(model, &ts, None)?;
    let aligned = if cfg.ablation.rotation_align {
        let rots = no_grad(|| -> Result<Vec<RotationMatrix<f64>>> {
            let (preds, valid) = model.rotation_head.forward(&template.v, &q.voxels)?;
            Ok(rotations_from_batch(&preds, &valid))
        })?;
        rotate_each(&q.voxels, &rots)?
    } else {
        q.voxels.clone()
    };
    let match_labels: Vec<T> = (0..n)
        .map(|i| if best_target_iou[i] >= 0.5 { T::one() } else { T::zero() })
        .collect();
    let match_logits = model.match_head.forward(&template, &aligned, Some(&q.gap))?;
    let match_bce = bce_with_logits(&match_logits, &match_labels)?;

    // The 2D-correlation baseline head trains on detached features: it
    // must not steer the shared backbone it is later compared against.
    let corr_logits = model.corr_head.forward(&template_roi.detach(), &q.roi.detach())?;
    let corr_bce = bce_with_logits(&corr_logits, &match_labels)?;

    let zero = Tensor::scalar(T::zero());
    let terms = [&rpn_obj, &rpn_reg, &roi_cls, &roi_reg, &match_bce, &zero];
    let weights: Vec<T> = [cfg.w[0], cfg.w[1], cfg.w[2], cfg.w[3], cfg.w[4], 0.0]
        .map(T::from_f64)
        .to_vec();
    let named = vec![
        ("rpn_obj", rpn_obj.item().to_f64()),
        ("rpn_reg", rpn_reg.item().to_f64()),
        ("roi_cls", roi_cls.item().to_f64()),
        ("roi_reg", roi_reg.item().to_f64()),
        ("match", match_bce.item().to_f64()),
        ("corr", corr_bce.item().to_f64()),
    ];
    let total = detection_loss(&terms, &weights)?.add(&corr_bce)?;
    Ok(Some(IterLoss { total, named }))
}

/// Train the detection stage, optionally starting from a reconstruction
/// checkpoint. Phase one (epochs `1..=phase1_epochs`) trains the backbone,
/// proposal/box heads, matching head, and the correlation baseline; phase
/// two trains only the rotation head on frozen features. Resumes from
/// `out_dir`'s checkpoint when present (which then overrides `init`).
pub fn train_detection<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    init: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Detect {
        return Err(Error::config("train_detection: config is for another stage".to_string()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);

    let mut main_opt = Sgd::new(
        vec![
            ParamGroup::new(model.detect_main_params()),
            ParamGroup::with_lr_scale(model.mapping_params(), T::from_f64(0.1)),
            ParamGroup::new(model.corr_params()),
        ],
        T::from_f64(cfg.lr),
        T::from_f64(0.9),
    );
    let mut rot_opt = Sgd::new(
        vec![ParamGroup::new(model.rotation_params())],
        T::from_f64(cfg.lr),
        T::from_f64(0.9),
    );

    let mut start_epoch = 1usize;
    if ckpt_path.exists() {
        let (entries, done) = resume_from_checkpoint(&ckpt_path, model, Stage::Detect)?;
        let state = opt_state_from_entries::<T>(&entries);
        main_opt.load_state(&state)?;
        rot_opt.load_state(&state)?;
        start_epoch = done + 1;
        println!("detect: resuming after epoch {done}");
    } else if let Some(init_path) = init {
        if cfg.ablation.recon_init {
            // Only the parts reconstruction actually trained carry over;
            // the heads keep their seeded init (and may differ in shape
            // across relation ablations anyway).
            let entries = checkpoint::load(init_path)?;
            checkpoint::apply_to_params(&entries, &model.recon_params())?;
            println!("detect: initialized from {}", init_path.display());
        }
    }

    let scenes: Vec<SceneEntry> = ds.scenes(Split::Train).cloned().collect();
    if scenes.is_empty() {
        return Err(Error::training("detect: no training scenes".to_string()));
    }
    let mut curve = report::LossCurve::new(&[
        "rpn_obj", "rpn_reg", "roi_cls", "roi_reg", "match", "corr", "rot",
    ]);
    let csv_path = out_dir.join("detect_losses.csv");
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for epoch in start_epoch..=cfg.epochs {
        let phase: u8 = if epoch <= cfg.phase1_epochs { 1 } else { 2 };
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, CTX_EPOCH_ORDER, epoch as u64));
        let mut epoch_sum = 0.0;
        let mut steps = 0usize;
        let mut batch: Vec<Tensor<T>> = Vec::new();
        for (it, &si) in order.iter().enumerate() {
            let out = detect_iteration(model, ds, &scenes[si], phase, cfg, epoch, it)?;
            let last = it + 1 == order.len();
            if let Some(loss) = out {
                let v = loss.total.item().to_f64();
                if !v.is_finite() {
                    return Err(Error::training(format!(
                        "detect: non-finite loss at epoch {epoch}, scene {}",
                        scenes[si].scene_id
                    )));
                }
                epoch_sum += v;
                steps += 1;
                curve.push(epoch, it, &loss.named, v);
                batch.push(loss.total);
            }
            if !batch.is_empty() && (batch.len() == cfg.batch_size || last) {
                let mut acc = batch[0].clone();
                for b in &batch[1..] {
                    acc = acc.add(b)?;
                }
                let acc = acc.scale(T::one() / T::from_usize(batch.len()));
                let opt: &mut dyn Optimizer<T> =
                    if phase == 1 { &mut main_opt } else { &mut rot_opt };
                opt.zero_grad();
                acc.backward()?;
                opt.step()?;
                batch.clear();
            }
        }
        let mean = if steps > 0 { epoch_sum / steps as f64 } else { 0.0 };
        if initial_loss.is_nan() && steps > 0 {
            initial_loss = mean;
        }
        if steps > 0 {
            final_loss = mean;
        }
        println!(
            "detect: epoch {epoch}/{} (phase {phase}) mean loss {mean:.5} over {steps} steps",
            cfg.epochs
        );
        let mut state = main_opt.state();
        state.extend(rot_opt.state());
        save_training_checkpoint(&ckpt_path, &model.params(), &state, Stage::Detect, epoch)?;
        curve.append_to(&csv_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        epochs_done: cfg.epochs,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::recon_default().validate().is_ok());
        assert!(TrainConfig::detect_default().validate().is_ok());
        let mut bad = TrainConfig::detect_default();
        bad.phase1_epochs = bad.epochs;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::recon_default();
        bad.w[3] = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::recon_default();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_switches_pick_relation() {
        assert_eq!(AblationSwitches::default().relation_kind(), RelationKind::Interleaved);
        let reduced = AblationSwitches { voxel_relation: false, ..Default::default() };
        assert_eq!(reduced.relation_kind(), RelationKind::Depthwise);
    }

    #[test]
    fn zero_anchor_reaches_params_with_zero_grad() {
        let w = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0], true);
        let y = w.scale(2.0);
        zero_anchor(&y).backward().unwrap();
        assert!(w.has_grad());
        assert!(w.grad().iter().all(|&g| g == 0.0));
    }
}
