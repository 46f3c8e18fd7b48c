//! Analysis sweeps over a trained checkpoint: template count, top-K
//! cutoff, template corruption, and the five-row ablation grid (which
//! retrains the detection stage per row from one shared reconstruction
//! checkpoint and shared seeds).

use super::eval::{evaluate, EvalOptions, EvalReport, HeadKind};
use super::{train_detection, train_reconstruction, Stage, TrainConfig};
use crate::net::{Model, NetConfig, RelationKind};
use crate::synth::dataset::{Dataset, Split};
use crate::tensor::checkpoint::{self, Entry};
use crate::{Error, Result};
use std::fs;
use std::path::Path;

/// AR50 versus how many template views the evaluator may use, for both
/// the volume-matching head and the 2D-correlation baseline on the same
/// backbone.
#[derive(Clone, Debug)]
pub struct TemplateSweep {
    pub counts: Vec<usize>,
    pub qvm_ar50: Vec<f64>,
    pub corr_ar50: Vec<f64>,
}

impl TemplateSweep {
    /// AR50 at the smallest count over AR50 at the largest, per head —
    /// the degradation summary (closer to 1 is flatter).
    pub fn endpoint_ratio(ar50: &[f64]) -> f64 {
        match (ar50.first(), ar50.last()) {
            (Some(&lo), Some(&hi)) if hi > 0.0 => lo / hi,
            _ => 0.0,
        }
    }
}

/// Evaluate with the first `m` templates for each count in `counts`
/// (ascending makes the series read low-to-high), once per head.
pub fn sweep_templates(
    entries: &[Entry],
    net_cfg: &NetConfig,
    relation: RelationKind,
    ds: &Dataset,
    split: Split,
    counts: &[usize],
    base: &EvalOptions,
) -> Result<TemplateSweep> {
    if counts.is_empty() {
        return Err(Error::config("sweep_templates: no counts".to_string()));
    }
    let mut qvm = Vec::with_capacity(counts.len());
    let mut corr = Vec::with_capacity(counts.len());
    for &m in counts {
        for (head, out) in [(HeadKind::Qvm, &mut qvm), (HeadKind::Corr2d, &mut corr)] {
            let opts = EvalOptions { template_count: Some(m), head, ..base.clone() };
            let report = evaluate(entries, net_cfg, relation, ds, split, &opts)?;
            out.push(report.ar50);
        }
    }
    Ok(TemplateSweep { counts: counts.to_vec(), qvm_ar50: qvm, corr_ar50: corr })
}

/// AR re-aggregated at several top-K cutoffs from one evaluation's stored
/// ranked IoU lists — no model re-runs.
#[derive(Clone, Debug)]
pub struct TopkSweep {
    pub ks: Vec<usize>,
    pub mar: Vec<f64>,
    pub ar50: Vec<f64>,
    /// mAR at K=10 over mAR at the largest swept K, rounded to 3 decimals.
    pub ratio_10_over_max: f64,
}

pub fn sweep_topk(report: &EvalReport, ks: &[usize]) -> Result<TopkSweep> {
    if ks.is_empty() {
        return Err(Error::config("sweep_topk: no cutoffs".to_string()));
    }
    let n = report.ranked_ious.first().map(|r| r.len()).unwrap_or(0);
    if ks.iter().any(|&k| k == 0 || k > n) {
        return Err(Error::config(format!("sweep_topk: cutoffs must be in 1..={n}")));
    }
    let mut mar = Vec::with_capacity(ks.len());
    let mut ar50 = Vec::with_capacity(ks.len());
    for &k in ks {
        let ar = report.ar_at_k(k);
        mar.push(ar.iter().sum::<f64>() / ar.len() as f64);
        ar50.push(ar[0]);
    }
    let k_max = *ks.iter().max().unwrap();
    let ar_10 = report.ar_at_k(10.min(n));
    let ar_max = report.ar_at_k(k_max);
    let mar_10 = ar_10.iter().sum::<f64>() / ar_10.len() as f64;
    let mar_max = ar_max.iter().sum::<f64>() / ar_max.len() as f64;
    let ratio = if mar_max > 0.0 { mar_10 / mar_max } else { 0.0 };
    Ok(TopkSweep {
        ks: ks.to_vec(),
        mar,
        ar50,
        ratio_10_over_max: (ratio * 1000.0).round() / 1000.0,
    })
}

/// AR50 under template corruption: one entry per center-shift ratio (at
/// zero angular noise) plus one angle-only entry.
#[derive(Clone, Debug)]
pub struct NoiseSweep {
    pub shifts: Vec<f64>,
    pub shift_ar50: Vec<f64>,
    pub angle_deg: f64,
    pub angle_ar50: f64,
}

pub fn sweep_noise(
    entries: &[Entry],
    net_cfg: &NetConfig,
    relation: RelationKind,
    ds: &Dataset,
    split: Split,
    shifts: &[f64],
    angle_deg: f64,
    base: &EvalOptions,
) -> Result<NoiseSweep> {
    let mut shift_ar50 = Vec::with_capacity(shifts.len());
    for &s in shifts {
        let opts = EvalOptions { shift_noise: s, angle_noise_deg: 0.0, ..base.clone() };
        shift_ar50.push(evaluate(entries, net_cfg, relation, ds, split, &opts)?.ar50);
    }
    let opts = EvalOptions { shift_noise: 0.0, angle_noise_deg: angle_deg, ..base.clone() };
    let angle_ar50 = evaluate(entries, net_cfg, relation, ds, split, &opts)?.ar50;
    Ok(NoiseSweep { shifts: shifts.to_vec(), shift_ar50, angle_deg, angle_ar50 })
}

/// One trained-and-evaluated ablation configuration.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub mar: f64,
    pub ar50: f64,
    pub ar75: f64,
}

/// Train and evaluate the five ablation configurations with shared seeds:
/// the full method, then rotation supervision, rotation alignment, the
/// voxel relation, and reconstruction init each disabled in turn. One
/// reconstruction checkpoint (trained once) initializes every row that
/// wants it. Writes `ablation.csv` and a verbatim per-row config log
/// under `out_dir`.
pub fn run_ablation_grid(
    ds: &Dataset,
    net_cfg: &NetConfig,
    recon_cfg: &TrainConfig,
    detect_cfg: &TrainConfig,
    eval_opts: &EvalOptions,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if recon_cfg.stage != Stage::Recon || detect_cfg.stage != Stage::Detect {
        return Err(Error::config("run_ablation_grid: configs must be (recon, detect)".to_string()));
    }
    fs::create_dir_all(out_dir)?;

    let recon_model = Model::<f32>::new(net_cfg, RelationKind::Interleaved, recon_cfg.seed)?;
    let recon_out = train_reconstruction(&recon_model, ds, recon_cfg, &out_dir.join("recon"))?;

    let mut variants = Vec::new();
    for name in ["full", "no_rotation_supervision", "no_rotation_align", "no_voxel_relation", "no_recon_init"] {
        let mut switches = super::AblationSwitches::default();
        match name {
            "full" => {}
            "no_rotation_supervision" => switches.rotation_supervision = false,
            "no_rotation_align" => switches.rotation_align = false,
            "no_voxel_relation" => switches.voxel_relation = false,
            "no_recon_init" => switches.recon_init = false,
            _ => unreachable!(),
        }
        variants.push((name, switches));
    }

    let mut rows = Vec::with_capacity(variants.len());
    let mut config_log = String::new();
    for (name, switches) in variants {
        let cfg = TrainConfig { ablation: switches, ..detect_cfg.clone() };
        config_log.push_str(&format!("[{name}]\n{cfg:#?}\n\n"));
        let model = Model::<f32>::new(net_cfg, switches.relation_kind(), cfg.seed)?;
        let run_dir = out_dir.join(format!("ablation_{name}"));
        train_detection(&model, ds, &cfg, Some(&recon_out.checkpoint), &run_dir)?;
        let entries = checkpoint::entries_from_params(&model.params());
        let opts = EvalOptions { align: switches.rotation_align, ..eval_opts.clone() };
        let report = evaluate(&entries, net_cfg, switches.relation_kind(), ds, Split::Test, &opts)?;
        println!(
            "ablation {name}: mAR {:.4}, AR50 {:.4}, AR75 {:.4}",
            report.mar, report.ar50, report.ar75
        );
        rows.push(AblationRow { name: name.to_string(), mar: report.mar, ar50: report.ar50, ar75: report.ar75 });
    }

    let mut csv = String::from("config,mar,ar50,ar75\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.name, r.mar, r.ar50, r.ar75));
    }
    fs::write(out_dir.join("ablation.csv"), csv)?;
    fs::write(out_dir.join("ablation_configs.txt"), config_log)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::eval::recall_thresholds;

    fn report_with_ranked(ranked: Vec<Vec<f64>>) -> EvalReport {
        let thresholds = recall_thresholds();
        let ar = crate::pipeline::ar_at_thresholds(&ranked, 1, &thresholds);
        let mar = ar.iter().sum::<f64>() / ar.len() as f64;
        EvalReport {
            split: "test".into(),
            head: "qvm".into(),
            top_k: 1,
            pairs: ranked.len(),
            thresholds,
            ar50: ar[0],
            ar75: ar[5],
            ar95: ar[9],
            ar,
            mar,
            baseline_ar: vec![],
            baseline_mar: 0.0,
            per_instance: vec![],
            ranked_ious: ranked,
            baseline_ranked_ious: vec![],
            mean_ms_per_query: 0.0,
        }
    }

    #[test]
    fn topk_sweep_is_monotone_and_bounded_by_k_max() {
        let mut rng = crate::rng::stream_rng(5, 5, 5);
        use rand::Rng;
        let ranked: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..16).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let report = report_with_ranked(ranked);
        let sweep = sweep_topk(&report, &[1, 2, 4, 8, 16]).unwrap();
        for w in sweep.mar.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let last = *sweep.mar.last().unwrap();
        assert!(sweep.mar.iter().all(|&m| m <= last));
        assert!(sweep.ratio_10_over_max <= 1.0 + 1e-12);
        // Three-decimal rounding.
        assert_eq!(sweep.ratio_10_over_max, (sweep.ratio_10_over_max * 1000.0).round() / 1000.0);
    }

    #[test]
    fn topk_sweep_rejects_out_of_range_cutoffs() {
        let report = report_with_ranked(vec![vec![0.6, 0.4]]);
        assert!(sweep_topk(&report, &[0]).is_err());
        assert!(sweep_topk(&report, &[3]).is_err());
        assert!(sweep_topk(&report, &[]).is_err());
    }

    #[test]
    fn endpoint_ratio_reads_first_over_last() {
        assert_eq!(TemplateSweep::endpoint_ratio(&[0.2, 0.3, 0.4]), 0.5);
        assert_eq!(TemplateSweep::endpoint_ratio(&[]), 0.0);
    }
}
