//! Flat key=value run configuration.
//!
//! One file drives every stage: dataset generation (`data.*`), the network
//! (`net.*`), both training stages (`recon.*`, `detect.*`), and evaluation
//! (`eval.*`). Values are plain `key = value` lines — language-agnostic and
//! diff-friendly — with `#` comments and blank lines ignored. Unknown keys
//! are rejected, naming the full set of valid keys. Every run writes its
//! resolved configuration next to its outputs, and `render` → `apply_str`
//! round-trips bit-exactly (floats print in shortest-roundtrip form).

use crate::error::{Error, Result};
use crate::net::{NetConfig, RelationKind};
use crate::pipeline::{EvalOptions, HeadKind, Stage, TrainConfig};
use crate::synth::DatasetConfig;
use std::path::Path;

/// Everything a run needs, addressable through flat dotted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub net: NetConfig,
    pub recon: TrainConfig,
    pub detect: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetConfig::default(),
            net: NetConfig::default(),
            recon: TrainConfig::recon_default(),
            detect: TrainConfig::detect_default(),
            eval: EvalOptions::default(),
        }
    }
}

// ── parsing helpers ──

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected an integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in canonical render order.
    pub fn valid_keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// The model's relation-convolution flavor follows the detection
    /// ablation switch; evaluation must rebuild the same shapes.
    pub fn relation(&self) -> RelationKind {
        self.detect.ablation.relation_kind()
    }

    /// All key/value pairs in canonical order (the render order).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let n = &self.net;
        let r = &self.recon;
        let t = &self.detect;
        let e = &self.eval;
        vec![
            ("data.n_train_instances", d.n_train_instances.to_string()),
            ("data.n_test_instances", d.n_test_instances.to_string()),
            ("data.n_train_scenes", d.n_train_scenes.to_string()),
            ("data.n_test_scenes", d.n_test_scenes.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.template_size", d.template_size.to_string()),
            ("data.voxel_res", d.voxel_res.to_string()),
            ("data.m_templates", d.m_templates.to_string()),
            ("data.min_per_scene", d.min_per_scene.to_string()),
            ("data.max_per_scene", d.max_per_scene.to_string()),
            ("data.occlusion_target", d.occlusion_target.to_string()),
            ("data.seed", d.seed.to_string()),
            ("net.image_size", n.image_size.to_string()),
            ("net.enc_channels", n.enc_channels.to_string()),
            ("net.roi_size", n.roi_size.to_string()),
            ("net.lift_depth", n.lift_depth.to_string()),
            ("net.voxel_channels", n.voxel_channels.to_string()),
            ("net.voxel_depth", n.voxel_depth.to_string()),
            ("net.voxel_size", n.voxel_size.to_string()),
            ("net.num_templates", n.num_templates.to_string()),
            ("net.heldout_views", n.heldout_views.to_string()),
            ("net.num_proposals", n.num_proposals.to_string()),
            ("net.mlp_hidden", n.mlp_hidden.to_string()),
            ("net.dec_channels", n.dec_channels.to_string()),
            ("recon.epochs", r.epochs.to_string()),
            ("recon.batch_size", r.batch_size.to_string()),
            ("recon.lr", r.lr.to_string()),
            ("recon.seed", r.seed.to_string()),
            ("recon.w_recon", r.w_recon.to_string()),
            ("recon.w_percep", r.w_percep.to_string()),
            ("detect.epochs", t.epochs.to_string()),
            ("detect.phase1_epochs", t.phase1_epochs.to_string()),
            ("detect.batch_size", t.batch_size.to_string()),
            ("detect.lr", t.lr.to_string()),
            ("detect.seed", t.seed.to_string()),
            ("detect.w1", t.w[0].to_string()),
            ("detect.w2", t.w[1].to_string()),
            ("detect.w3", t.w[2].to_string()),
            ("detect.w4", t.w[3].to_string()),
            ("detect.w5", t.w[4].to_string()),
            ("detect.w6", t.w[5].to_string()),
            ("detect.recon_init", t.ablation.recon_init.to_string()),
            ("detect.rotation_align", t.ablation.rotation_align.to_string()),
            ("detect.rotation_supervision", t.ablation.rotation_supervision.to_string()),
            ("detect.voxel_relation", t.ablation.voxel_relation.to_string()),
            ("eval.top_k", e.top_k.to_string()),
            ("eval.head", e.head.as_str().to_string()),
            ("eval.align", e.align.to_string()),
            ("eval.global_branch", e.global_branch.to_string()),
            (
                "eval.template_count",
                e.template_count.map_or_else(|| "all".to_string(), |m| m.to_string()),
            ),
            ("eval.shift_noise", e.shift_noise.to_string()),
            ("eval.angle_noise_deg", e.angle_noise_deg.to_string()),
            ("eval.noise_seed", e.noise_seed.to_string()),
            ("eval.seed", e.seed.to_string()),
            ("eval.workers", e.workers.to_string()),
        ]
    }

    /// Set a single key. Unknown keys report the full valid-key list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.n_train_instances" => self.data.n_train_instances = parse_usize(key, v)?,
            "data.n_test_instances" => self.data.n_test_instances = parse_usize(key, v)?,
            "data.n_train_scenes" => self.data.n_train_scenes = parse_usize(key, v)?,
            "data.n_test_scenes" => self.data.n_test_scenes = parse_usize(key, v)?,
            "data.image_size" => self.data.image_size = parse_usize(key, v)?,
            "data.template_size" => self.data.template_size = parse_usize(key, v)?,
            "data.voxel_res" => self.data.voxel_res = parse_usize(key, v)?,
            "data.m_templates" => self.data.m_templates = parse_usize(key, v)?,
            "data.min_per_scene" => self.data.min_per_scene = parse_usize(key, v)?,
            "data.max_per_scene" => self.data.max_per_scene = parse_usize(key, v)?,
            "data.occlusion_target" => self.data.occlusion_target = parse_f64(key, v)?,
            "data.seed" => self.data.seed = parse_u64(key, v)?,
            "net.image_size" => self.net.image_size = parse_usize(key, v)?,
            "net.enc_channels" => self.net.enc_channels = parse_usize(key, v)?,
            "net.roi_size" => self.net.roi_size = parse_usize(key, v)?,
            "net.lift_depth" => self.net.lift_depth = parse_usize(key, v)?,
            "net.voxel_channels" => self.net.voxel_channels = parse_usize(key, v)?,
            "net.voxel_depth" => self.net.voxel_depth = parse_usize(key, v)?,
            "net.voxel_size" => self.net.voxel_size = parse_usize(key, v)?,
            "net.num_templates" => self.net.num_templates = parse_usize(key, v)?,
            "net.heldout_views" => self.net.heldout_views = parse_usize(key, v)?,
            "net.num_proposals" => self.net.num_proposals = parse_usize(key, v)?,
            "net.mlp_hidden" => self.net.mlp_hidden = parse_usize(key, v)?,
            "net.dec_channels" => self.net.dec_channels = parse_usize(key, v)?,
            "recon.epochs" => self.recon.epochs = parse_usize(key, v)?,
            "recon.batch_size" => self.recon.batch_size = parse_usize(key, v)?,
            "recon.lr" => self.recon.lr = parse_f64(key, v)?,
            "recon.seed" => self.recon.seed = parse_u64(key, v)?,
            "recon.w_recon" => self.recon.w_recon = parse_f64(key, v)?,
            "recon.w_percep" => self.recon.w_percep = parse_f64(key, v)?,
            "detect.epochs" => self.detect.epochs = parse_usize(key, v)?,
            "detect.phase1_epochs" => self.detect.phase1_epochs = parse_usize(key, v)?,
            "detect.batch_size" => self.detect.batch_size = parse_usize(key, v)?,
            "detect.lr" => self.detect.lr = parse_f64(key, v)?,
            "detect.seed" => self.detect.seed = parse_u64(key, v)?,
            "detect.w1" => self.detect.w[0] = parse_f64(key, v)?,
            "detect.w2" => self.detect.w[1] = parse_f64(key, v)?,
            "detect.w3" => self.detect.w[2] = parse_f64(key, v)?,
            "detect.w4" => self.detect.w[3] = parse_f64(key, v)?,
            "detect.w5" => self.detect.w[4] = parse_f64(key, v)?,
            "detect.w6" => self.detect.w[5] = parse_f64(key, v)?,
            "detect.recon_init" => self.detect.ablation.recon_init = parse_bool(key, v)?,
            "detect.rotation_align" => self.detect.ablation.rotation_align = parse_bool(key, v)?,
            "detect.rotation_supervision" => {
                self.detect.ablation.rotation_supervision = parse_bool(key, v)?
            }
            "detect.voxel_relation" => self.detect.ablation.voxel_relation = parse_bool(key, v)?,
            "eval.top_k" => self.eval.top_k = parse_usize(key, v)?,
            "eval.head" => {
                self.eval.head = match v {
                    "qvm" => HeadKind::Qvm,
                    "corr2d" => HeadKind::Corr2d,
                    _ => {
                        return Err(Error::config(format!(
                            "eval.head: expected qvm or corr2d, got '{v}'"
                        )))
                    }
                }
            }
            "eval.align" => self.eval.align = parse_bool(key, v)?,
            "eval.global_branch" => self.eval.global_branch = parse_bool(key, v)?,
            "eval.template_count" => {
                self.eval.template_count =
                    if v == "all" { None } else { Some(parse_usize(key, v)?) }
            }
            "eval.shift_noise" => self.eval.shift_noise = parse_f64(key, v)?,
            "eval.angle_noise_deg" => self.eval.angle_noise_deg = parse_f64(key, v)?,
            "eval.noise_seed" => self.eval.noise_seed = parse_u64(key, v)?,
            "eval.seed" => self.eval.seed = parse_u64(key, v)?,
            "eval.workers" => self.eval.workers = parse_usize(key, v)?,
            _ => {
                return Err(Error::config(format!(
                    "unknown config key '{key}'; valid keys: {}",
                    RunConfig::valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines (blank lines and `#` comments skipped).
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the file (if given), then overrides, in that order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_str(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One seed for everything: data generation, both stages, evaluation.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.recon.seed = seed;
        self.detect.seed = seed;
        self.eval.seed = seed;
    }

    /// Cross-section consistency; per-section invariants are re-checked by
    /// the stages themselves.
    pub fn validate(&self) -> Result<()> {
        if self.net.image_size != self.data.image_size {
            return Err(Error::config(format!(
                "net.image_size {} != data.image_size {}",
                self.net.image_size, self.data.image_size
            )));
        }
        if self.net.num_templates != self.data.m_templates {
            return Err(Error::config(format!(
                "net.num_templates {} != data.m_templates {}",
                self.net.num_templates, self.data.m_templates
            )));
        }
        if self.net.heldout_views >= self.net.num_templates {
            return Err(Error::config(format!(
                "net.heldout_views {} must be below net.num_templates {}",
                self.net.heldout_views, self.net.num_templates
            )));
        }
        self.recon.validate()?;
        self.detect.validate()?;
        if self.recon.stage != Stage::Recon || self.detect.stage != Stage::Detect {
            return Err(Error::config("recon/detect sections have swapped stages".to_string()));
        }
        Ok(())
    }

    /// Canonical text form; `apply_str` on this reproduces `self` exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let head = k.split('.').next().unwrap();
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = match k {
                    _ if head == "data" => "data",
                    _ if head == "net" => "net",
                    _ if head == "recon" => "recon",
                    _ if head == "detect" => "detect",
                    _ => "eval",
                };
                out.push_str(&format!("# {section}\n"));
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Write the resolved configuration beside a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved.cfg"), self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips_bit_exactly() {
        let mut cfg = RunConfig::default();
        cfg.data.occlusion_target = 1.0 / 3.0;
        cfg.recon.lr = 1e-3 * (1.0 + f64::EPSILON);
        cfg.detect.w[3] = f64::MIN_POSITIVE;
        cfg.eval.template_count = Some(4);
        let mut back = RunConfig::default();
        back.apply_str(&cfg.render()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.render(), back.render());
    }

    #[test]
    fn every_rendered_key_is_settable_and_unknown_keys_list_them() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            cfg.set(k, &v).unwrap();
        }
        let err = cfg.set("data.bogus", "1").unwrap_err().to_string();
        assert!(err.contains("unknown config key 'data.bogus'"));
        assert!(err.contains("data.n_train_instances"));
        assert!(err.contains("eval.workers"));
    }

    #[test]
    fn comments_blanks_and_overrides_compose() {
        let mut cfg = RunConfig::default();
        cfg.apply_str("# comment\n\n  data.seed = 9\n eval.head = corr2d\n").unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.eval.head, HeadKind::Corr2d);
        assert!(cfg.apply_str("data.seed 9").is_err());
        assert!(cfg.set("eval.head", "both").is_err());
        assert!(cfg.set("eval.top_k", "one").is_err());
    }

    #[test]
    fn template_count_accepts_all_and_numbers() {
        let mut cfg = RunConfig::default();
        cfg.set("eval.template_count", "4").unwrap();
        assert_eq!(cfg.eval.template_count, Some(4));
        cfg.set("eval.template_count", "all").unwrap();
        assert_eq!(cfg.eval.template_count, None);
    }

    #[test]
    fn validate_rejects_cross_section_mismatch() {
        let mut cfg = RunConfig::default();
        cfg.net.num_templates = 3;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("num_templates"));
        let mut cfg2 = RunConfig::default();
        cfg2.set_master_seed(42);
        assert_eq!(cfg2.data.seed, 42);
        assert_eq!(cfg2.eval.seed, 42);
        cfg2.validate().unwrap();
    }

    #[test]
    fn write_resolved_lands_beside_outputs() {
        let td = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_resolved(td.path()).unwrap();
        let text = std::fs::read_to_string(td.path().join("resolved.cfg")).unwrap();
        let mut back = RunConfig::default();
        back.apply_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
