//! Average-recall evaluation over (scene, placed-instance) query pairs.
//!
//! Each pair scores the scene's full proposal set against the placed
//! instance's template volume and keeps the proposals ranked by match
//! logit. Recall at IoU threshold `t` asks whether any of the first
//! `top_k` ranked boxes overlaps the pair's ground-truth box by at least
//! `t`; AR averages that over pairs, and mAR averages the ten thresholds
//! 0.50..0.95. The full ranked IoU lists are kept on the report so top-K
//! sweeps re-slice them instead of re-running the model.
//!
//! Evaluation is a pure function of (checkpoint entries, dataset, options):
//! proposals are seeded per pair, scoring runs without gradients, and
//! results do not depend on the worker count — workers only partition the
//! pair list, and every pair's computation is self-contained.

use super::{entry_box, template_forward_set};
use crate::net::{rotate_each, rotations_from_batch, Model, NetConfig, RelationKind, TemplateVoxel};
use crate::proposals::{box_iou, oracle_jitter_proposals, roi_crop, Box2d, JitterSpec};
use crate::rng::{derive_seed, stream_rng};
use crate::synth::dataset::{Dataset, Split};
use crate::synth::{add_template_noise, TemplateSet};
use crate::tensor::checkpoint::{self, Entry};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result, Scalar};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

// Stream tags for evaluation-owned randomness.
const CTX_EVAL_PROPOSALS: u64 = 0x50;
const CTX_EVAL_BASELINE: u64 = 0x51;

/// Which head ranks the proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Volume matching: rotation-aligned voxel relation.
    Qvm,
    /// The 2D correlation baseline over pooled ROI features.
    Corr2d,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Qvm => "qvm",
            HeadKind::Corr2d => "corr2d",
        }
    }
}

/// Evaluation knobs. The defaults are the headline protocol: top-1
/// volume matching with rotation alignment and the global branch, clean
/// templates, all views.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Ranked proposals counted as the prediction set.
    pub top_k: usize,
    pub head: HeadKind,
    /// Warp query volumes by the predicted rotation before matching.
    pub align: bool,
    /// Add the pooled support-vector correlation to each logit.
    pub global_branch: bool,
    /// Evaluate with only the first `m` template views (all when `None`).
    pub template_count: Option<usize>,
    /// Template corruption: center shift as a fraction of image size.
    pub shift_noise: f64,
    /// Template corruption: angular error in degrees.
    pub angle_noise_deg: f64,
    pub noise_seed: u64,
    /// Seeds the proposal jitter and the random-ranking baseline.
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            top_k: 1,
            head: HeadKind::Qvm,
            align: true,
            global_branch: true,
            template_count: None,
            shift_noise: 0.0,
            angle_noise_deg: 0.0,
            noise_seed: 11,
            seed: 17,
            workers: 0,
        }
    }
}

/// The ten IoU thresholds 0.50, 0.55, …, 0.95.
pub fn recall_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// AR per threshold: the fraction of pairs where any of the first `k`
/// ranked IoUs reaches the threshold.
pub fn ar_at_thresholds(ranked_ious: &[Vec<f64>], k: usize, thresholds: &[f64]) -> Vec<f64> {
    let n = ranked_ious.len();
    thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                return 0.0;
            }
            let hits = ranked_ious
                .iter()
                .filter(|ious| ious.iter().take(k).any(|&iou| iou >= t))
                .count();
            hits as f64 / n as f64
        })
        .collect()
}

/// Mean AR for one instance, for the per-instance table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceAr {
    pub instance_id: u64,
    pub pairs: usize,
    pub mar: f64,
    pub ar50: f64,
}

/// Everything one evaluation produces. The serialized form carries the
/// aggregates; the ranked IoU lists and timing ride along in memory only
/// (timing is machine-dependent and deliberately kept out of artifacts
/// that are compared bit-for-bit).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub head: String,
    pub top_k: usize,
    pub pairs: usize,
    pub thresholds: Vec<f64>,
    pub ar: Vec<f64>,
    pub mar: f64,
    pub ar50: f64,
    pub ar75: f64,
    pub ar95: f64,
    /// Random-ranking control over the same proposal sets.
    pub baseline_ar: Vec<f64>,
    pub baseline_mar: f64,
    pub per_instance: Vec<InstanceAr>,
    #[serde(skip)]
    pub ranked_ious: Vec<Vec<f64>>,
    #[serde(skip)]
    pub baseline_ranked_ious: Vec<Vec<f64>>,
    #[serde(skip)]
    pub mean_ms_per_query: f64,
}

impl EvalReport {
    /// Re-aggregate this report's ranked IoUs at a different cutoff.
    pub fn ar_at_k(&self, k: usize) -> Vec<f64> {
        ar_at_thresholds(&self.ranked_ious, k, &self.thresholds)
    }
}

/// One (scene, placement) query pair.
#[derive(Clone, Debug)]
struct PairTask {
    scene_id: u64,
    slot: usize,
    instance_id: u64,
    gt_box: Box2d,
    scene_boxes: Vec<Box2d>,
}

struct PairResult {
    instance_id: u64,
    ranked: Vec<f64>,
    baseline: Vec<f64>,
    ms: f64,
}

/// Template set as the evaluator sees it: optionally truncated to the
/// first `m` views, then optionally corrupted.
fn prepared_template_set(
    ds: &Dataset,
    instance_id: u64,
    opts: &EvalOptions,
) -> Result<TemplateSet> {
    let mut ts = ds.load_template_set(instance_id)?;
    if let Some(m) = opts.template_count {
        if m < 1 || m > ts.images.len() {
            return Err(Error::config(format!(
                "evaluate: template_count {m} outside 1..={}",
                ts.images.len()
            )));
        }
        ts.images.truncate(m);
        ts.rotations.truncate(m);
    }
    if opts.shift_noise > 0.0 || opts.angle_noise_deg > 0.0 {
        ts = add_template_noise(&ts, opts.shift_noise, opts.angle_noise_deg, opts.noise_seed)?;
    }
    Ok(ts)
}

/// Worker state: one rebuilt model plus per-scene and per-instance caches.
/// Tensors are not shareable across threads, so every worker owns a model
/// deserialized from the same checkpoint entries — identical by
/// construction.
struct Worker<'a> {
    model: Model<f32>,
    ds: &'a Dataset,
    opts: &'a EvalOptions,
    scene_feat: HashMap<u64, Tensor<f32>>,
    templates: HashMap<u64, (TemplateVoxel<f32>, Tensor<f32>)>,
}

impl<'a> Worker<'a> {
    fn new(
        entries: &[Entry],
        net_cfg: &NetConfig,
        relation: RelationKind,
        ds: &'a Dataset,
        opts: &'a EvalOptions,
    ) -> Result<Self> {
        let model = Model::<f32>::new(net_cfg, relation, 0)?;
        checkpoint::apply_to_params(entries, &model.params())?;
        Ok(Worker { model, ds, opts, scene_feat: HashMap::new(), templates: HashMap::new() })
    }

    fn scene_feature(&mut self, scene_id: u64) -> Result<Tensor<f32>> {
        if let Some(f) = self.scene_feat.get(&scene_id) {
            return Ok(f.clone());
        }
        let img = self.ds.load_scene_image(scene_id)?;
        let feat = self.model.encoder.forward(&img.to_tensor::<f32>())?;
        self.scene_feat.insert(scene_id, feat.clone());
        Ok(feat)
    }

    fn template(&mut self, instance_id: u64) -> Result<(TemplateVoxel<f32>, Tensor<f32>)> {
        if let Some(t) = self.templates.get(&instance_id) {
            return Ok(t.clone());
        }
        let ts = prepared_template_set(self.ds, instance_id, self.opts)?;
        let built = template_forward_set(&self.model, &ts, None)?;
        self.templates.insert(instance_id, built.clone());
        Ok(built)
    }

    fn score_pair(&mut self, pair: &PairTask) -> Result<PairResult> {
        let start = std::time::Instant::now();
        let image_size = self.ds.manifest.image_size;
        let proposals = oracle_jitter_proposals(
            &pair.scene_boxes,
            self.model.cfg.num_proposals,
            &JitterSpec::default(),
            image_size,
            derive_seed(self.opts.seed, CTX_EVAL_PROPOSALS + pair.scene_id, pair.slot as u64),
        )?;
        let n = proposals.len();

        let logits: Vec<f64> = no_grad(|| -> Result<Vec<f64>> {
            let feat = self.scene_feature(pair.scene_id)?;
            let roi = roi_crop(&feat, &proposals.boxes, self.model.cfg.roi_size, NetConfig::STRIDE as f64)?;
            let (template, template_roi) = self.template(pair.instance_id)?;
            let logits = match self.opts.head {
                HeadKind::Corr2d => self.model.corr_head.forward(&template_roi, &roi)?,
                HeadKind::Qvm => {
                    let voxels = self.model.mapping.forward(&roi)?;
                    let aligned = if self.opts.align {
                        let (preds, valid) =
                            self.model.rotation_head.forward(&template.v, &voxels)?;
                        rotate_each(&voxels, &rotations_from_batch(&preds, &valid))?
                    } else {
                        voxels
                    };
                    let gap = roi.global_avg_pool()?;
                    let gap_ref = if self.opts.global_branch { Some(&gap) } else { None };
                    self.model.match_head.forward(&template, &aligned, gap_ref)?
                }
            };
            let out: Vec<f64> = logits.data().iter().map(|&v| v.to_f64()).collect();
            Ok(out)
        })?;

        // Rank by logit, ties by ascending proposal index; a non-finite
        // logit sinks to the bottom.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (la, lb) = (logits[a], logits[b]);
            let ka = if la.is_nan() { f64::NEG_INFINITY } else { la };
            let kb = if lb.is_nan() { f64::NEG_INFINITY } else { lb };
            kb.partial_cmp(&ka).unwrap().then(a.cmp(&b))
        });
        let ranked = order
            .iter()
            .map(|&i| box_iou(&proposals.boxes[i], &pair.gt_box))
            .collect::<Result<Vec<f64>>>()?;

        let mut base_order: Vec<usize> = (0..n).collect();
        base_order.shuffle(&mut stream_rng(
            derive_seed(self.opts.seed, CTX_EVAL_BASELINE, 0),
            pair.scene_id,
            pair.slot as u64,
        ));
        let baseline = base_order
            .iter()
            .map(|&i| box_iou(&proposals.boxes[i], &pair.gt_box))
            .collect::<Result<Vec<f64>>>()?;

        Ok(PairResult {
            instance_id: pair.instance_id,
            ranked,
            baseline,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Score every (scene, placed-instance) pair of a split with a model
/// rebuilt from checkpoint entries, and aggregate recall.
pub fn evaluate(
    entries: &[Entry],
    net_cfg: &NetConfig,
    relation: RelationKind,
    ds: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.top_k < 1 {
        return Err(Error::config("evaluate: top_k must be at least 1".to_string()));
    }
    let pairs: Vec<PairTask> = ds
        .scenes(split)
        .flat_map(|s| {
            let scene_boxes: Vec<Box2d> = s.placements.iter().map(entry_box).collect();
            s.placements.iter().enumerate().map(move |(slot, p)| PairTask {
                scene_id: s.scene_id,
                slot,
                instance_id: p.instance_id,
                gt_box: entry_box(p),
                scene_boxes: scene_boxes.clone(),
            }).collect::<Vec<_>>()
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::config("evaluate: split has no query pairs".to_string()));
    }

    let workers = if opts.workers == 0 { rayon::current_num_threads() } else { opts.workers };
    let chunk = pairs.len().div_ceil(workers.max(1));
    let chunks: Vec<&[PairTask]> = pairs.chunks(chunk).collect();
    let results: Vec<Vec<PairResult>> = chunks
        .into_par_iter()
        .map(|chunk| -> Result<Vec<PairResult>> {
            let mut worker = Worker::new(entries, net_cfg, relation, ds, opts)?;
            chunk.iter().map(|pair| worker.score_pair(pair)).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<PairResult> = results.into_iter().flatten().collect();

    let thresholds = recall_thresholds();
    let ranked: Vec<Vec<f64>> = results.iter().map(|r| r.ranked.clone()).collect();
    let baseline: Vec<Vec<f64>> = results.iter().map(|r| r.baseline.clone()).collect();
    let ar = ar_at_thresholds(&ranked, opts.top_k, &thresholds);
    let baseline_ar = ar_at_thresholds(&baseline, opts.top_k, &thresholds);
    let mar = ar.iter().sum::<f64>() / ar.len() as f64;
    let baseline_mar = baseline_ar.iter().sum::<f64>() / baseline_ar.len() as f64;

    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        groups.entry(r.instance_id).or_default().push(i);
    }
    let per_instance = groups
        .into_iter()
        .map(|(instance_id, idx)| {
            let subset: Vec<Vec<f64>> = idx.iter().map(|&i| ranked[i].clone()).collect();
            let inst_ar = ar_at_thresholds(&subset, opts.top_k, &thresholds);
            InstanceAr {
                instance_id,
                pairs: idx.len(),
                mar: inst_ar.iter().sum::<f64>() / inst_ar.len() as f64,
                ar50: inst_ar[0],
            }
        })
        .collect();

    let mean_ms = results.iter().map(|r| r.ms).sum::<f64>() / results.len() as f64;
    Ok(EvalReport {
        split: format!("{split:?}").to_lowercase(),
        head: opts.head.as_str().to_string(),
        top_k: opts.top_k,
        pairs: results.len(),
        thresholds,
        ar50: ar[0],
        ar75: ar[5],
        ar95: ar[9],
        ar,
        mar,
        baseline_ar,
        baseline_mar,
        per_instance,
        ranked_ious: ranked,
        baseline_ranked_ious: baseline,
        mean_ms_per_query: mean_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force AR: explicit double loop over thresholds and pairs.
    fn ar_oracle(ranked: &[Vec<f64>], k: usize, thresholds: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for &t in thresholds {
            let mut hits = 0usize;
            for pair in ranked {
                let mut hit = false;
                for (i, &iou) in pair.iter().enumerate() {
                    if i < k && iou >= t {
                        hit = true;
                    }
                }
                if hit {
                    hits += 1;
                }
            }
            out.push(hits as f64 / ranked.len() as f64);
        }
        out
    }

    #[test]
    fn harness_matches_brute_force_on_20_pairs() {
        let mut rng = stream_rng(424242, 1, 1);
        let ranked: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..12).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ts = recall_thresholds();
        for k in [1, 3, 12] {
            assert_eq!(ar_at_thresholds(&ranked, k, &ts), ar_oracle(&ranked, k, &ts));
        }
    }

    #[test]
    fn single_iou_06_prediction_scores_mar_03() {
        let ranked = vec![vec![0.6]];
        let ts = recall_thresholds();
        let ar = ar_at_thresholds(&ranked, 1, &ts);
        // Recalled at 0.50, 0.55, 0.60 and nowhere above.
        assert_eq!(&ar[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&ar[3..], &[0.0; 7]);
        let mar = ar.iter().sum::<f64>() / 10.0;
        assert_eq!(mar, 0.3);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let ranked = vec![vec![1.0], vec![1.0], vec![1.0]];
        let ar = ar_at_thresholds(&ranked, 1, &recall_thresholds());
        assert!(ar.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ar_is_nondecreasing_in_k() {
        let mut rng = stream_rng(7, 2, 2);
        let ranked: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..16).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ts = recall_thresholds();
        let mut prev = vec![0.0; ts.len()];
        for k in 1..=16 {
            let ar = ar_at_thresholds(&ranked, k, &ts);
            for (a, p) in ar.iter().zip(&prev) {
                assert!(a >= p, "AR dropped when K grew");
            }
            prev = ar;
        }
    }
}
