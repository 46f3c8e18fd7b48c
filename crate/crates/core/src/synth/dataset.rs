//! On-disk dataset: a JSON manifest plus `.vxim` images.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! templates/<instance_id>/view_<k>.vxim   one per template view
//! scenes/scene_<scene_id>.vxim            one per query scene
//! ```
//!
//! The manifest carries everything that is not pixels: split membership,
//! template rotations, and per-scene ground truth (boxes, poses, occlusion
//! fractions). Builds are deterministic in the master seed — instance,
//! template, and scene generation each draw from their own seed stream, so
//! scenes can be generated in parallel without changing the output.

use super::image::{load_image, save_image, ImageBuf};
use super::{compose_scene, make_template_set, sample_instance, InstanceModel};
use crate::geometry::RotationMatrix;
use crate::rng::stream_rng;
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

// ── manifest schema ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub instance_id: u64,
    /// Row-major 3x3 matrices, one per view; view 0 is the identity.
    pub rotations: Vec<[f64; 9]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlacementEntry {
    pub instance_id: u64,
    /// `[x1, y1, x2, y2]` in image pixels.
    pub box_xyxy: [f64; 4],
    /// Row-major pose relative to the instance's template base frame.
    pub pose: [f64; 9],
    pub occlusion_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: u64,
    pub split: Split,
    pub placements: Vec<PlacementEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub template_size: usize,
    pub voxel_res: usize,
    pub m_templates: usize,
    pub seed: u64,
    pub train_instances: Vec<u64>,
    pub test_instances: Vec<u64>,
    pub templates: Vec<TemplateEntry>,
    pub scenes: Vec<SceneEntry>,
    /// Sum of placement counts over all scenes; recounted on load.
    pub total_boxes: usize,
}

// ── building ──

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train_instances: usize,
    pub n_test_instances: usize,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
    pub image_size: usize,
    pub template_size: usize,
    pub voxel_res: usize,
    pub m_templates: usize,
    pub min_per_scene: usize,
    pub max_per_scene: usize,
    pub occlusion_target: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_instances: 128,
            n_test_instances: 16,
            n_train_scenes: 2000,
            n_test_scenes: 200,
            image_size: 64,
            template_size: 64,
            voxel_res: 16,
            m_templates: 10,
            min_per_scene: 3,
            max_per_scene: 6,
            occlusion_target: 0.3,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_train_instances == 0 || self.n_test_instances == 0 {
            return Err(Error::config("dataset: both splits need at least one instance".to_string()));
        }
        if self.min_per_scene == 0 || self.min_per_scene > self.max_per_scene {
            return Err(Error::config(format!(
                "dataset: bad instances-per-scene range {}..={}",
                self.min_per_scene, self.max_per_scene
            )));
        }
        if self.m_templates < 2 {
            return Err(Error::config("dataset: m_templates must be at least 2".to_string()));
        }
        if self.image_size < 16 || self.template_size < 16 {
            return Err(Error::config("dataset: image sizes below 16 are not renderable".to_string()));
        }
        Ok(())
    }
}

fn template_dir(root: &Path, instance_id: u64) -> PathBuf {
    root.join("templates").join(format!("{instance_id:04}"))
}

fn view_path(root: &Path, instance_id: u64, view: usize) -> PathBuf {
    template_dir(root, instance_id).join(format!("view_{view:02}.vxim"))
}

fn scene_path(root: &Path, scene_id: u64) -> PathBuf {
    root.join("scenes").join(format!("scene_{scene_id:05}.vxim"))
}

/// Generate instances, template sets, and scenes under `root` and write
/// the manifest. Train instances take ids `0..n_train`, test instances
/// continue from there, so the splits are disjoint by construction.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(root.join("templates"))?;
    fs::create_dir_all(root.join("scenes"))?;

    let n_total = cfg.n_train_instances + cfg.n_test_instances;
    let train_instances: Vec<u64> = (0..cfg.n_train_instances as u64).collect();
    let test_instances: Vec<u64> = (cfg.n_train_instances as u64..n_total as u64).collect();

    let models: Vec<InstanceModel> = (0..n_total as u64)
        .into_par_iter()
        .map(|id| sample_instance(id, cfg.voxel_res, cfg.seed))
        .collect::<Result<_>>()?;

    let templates: Vec<TemplateEntry> = models
        .par_iter()
        .map(|model| {
            let ts = make_template_set(model, cfg.m_templates, cfg.template_size, cfg.seed)?;
            let dir = template_dir(root, model.id);
            fs::create_dir_all(&dir)?;
            for (k, img) in ts.images.iter().enumerate() {
                save_image(&view_path(root, model.id, k), img)?;
            }
            Ok(TemplateEntry {
                instance_id: model.id,
                rotations: ts.rotations.iter().map(|r| *r.as_array()).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let n_scenes = cfg.n_train_scenes + cfg.n_test_scenes;
    let scenes: Vec<SceneEntry> = (0..n_scenes as u64)
        .into_par_iter()
        .map(|scene_id| {
            let split = if (scene_id as usize) < cfg.n_train_scenes { Split::Train } else { Split::Test };
            let pool = match split {
                Split::Train => &train_instances,
                Split::Test => &test_instances,
            };
            // Instance choice draws from its own stream so scene order and
            // thread count cannot perturb it.
            let mut rng = stream_rng(cfg.seed, 0x05, scene_id);
            let count = rng.gen_range(cfg.min_per_scene..=cfg.max_per_scene);
            let picked: Vec<&InstanceModel> = (0..count)
                .map(|_| &models[pool[rng.gen_range(0..pool.len())] as usize])
                .collect();
            let scene = compose_scene(&picked, scene_id, cfg.image_size, cfg.occlusion_target, cfg.seed)?;
            save_image(&scene_path(root, scene_id), &scene.image)?;
            Ok(SceneEntry {
                scene_id,
                split,
                placements: scene
                    .placements
                    .iter()
                    .map(|p| PlacementEntry {
                        instance_id: p.instance_id,
                        box_xyxy: [p.gt_box.x1, p.gt_box.y1, p.gt_box.x2, p.gt_box.y2],
                        pose: *p.pose.as_array(),
                        occlusion_fraction: p.occlusion_fraction,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;

    let total_boxes = scenes.iter().map(|s| s.placements.len()).sum();
    let manifest = Manifest {
        image_size: cfg.image_size,
        template_size: cfg.template_size,
        voxel_res: cfg.voxel_res,
        m_templates: cfg.m_templates,
        seed: cfg.seed,
        train_instances,
        test_instances,
        templates,
        scenes,
        total_boxes,
    };
    let file = fs::File::create(root.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)
        .map_err(|e| Error::format(format!("manifest write: {e}")))?;
    Ok(manifest)
}

// ── loading ──

/// A dataset opened from disk. Images load lazily through the accessors;
/// the manifest is validated up front.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(root.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest parse: {e}")))?;
    let ds = Dataset { root: root.to_path_buf(), manifest };
    ds.validate()?;
    Ok(ds)
}

impl Dataset {
    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let train: HashSet<u64> = m.train_instances.iter().copied().collect();
        let test: HashSet<u64> = m.test_instances.iter().copied().collect();
        if train.len() != m.train_instances.len() || test.len() != m.test_instances.len() {
            return Err(Error::format("manifest: duplicate instance ids within a split".to_string()));
        }
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::format(format!("manifest: instance {id} is in both splits")));
        }
        if m.templates.len() != train.len() + test.len() {
            return Err(Error::format(format!(
                "manifest: {} template entries for {} instances",
                m.templates.len(),
                train.len() + test.len()
            )));
        }
        let ident = *RotationMatrix::<f64>::identity().as_array();
        for t in &m.templates {
            if !train.contains(&t.instance_id) && !test.contains(&t.instance_id) {
                return Err(Error::format(format!("manifest: template for unknown instance {}", t.instance_id)));
            }
            if t.rotations.len() != m.m_templates {
                return Err(Error::format(format!(
                    "manifest: instance {} has {} views, expected {}",
                    t.instance_id,
                    t.rotations.len(),
                    m.m_templates
                )));
            }
            if t.rotations[0] != ident {
                return Err(Error::format(format!(
                    "manifest: instance {} view 0 is not the identity",
                    t.instance_id
                )));
            }
            for (k, rot) in t.rotations.iter().enumerate() {
                let r = RotationMatrix::from_array(*rot);
                if !r.is_rotation(1e-6) {
                    return Err(Error::format(format!(
                        "manifest: instance {} view {k} rotation is not orthonormal",
                        t.instance_id
                    )));
                }
            }
        }
        let mut boxes = 0usize;
        for s in &m.scenes {
            let pool = match s.split {
                Split::Train => &train,
                Split::Test => &test,
            };
            for p in &s.placements {
                if !pool.contains(&p.instance_id) {
                    return Err(Error::format(format!(
                        "manifest: scene {} places instance {} from the wrong split",
                        s.scene_id, p.instance_id
                    )));
                }
                let r = RotationMatrix::from_array(p.pose);
                if !r.is_rotation(1e-6) {
                    return Err(Error::format(format!(
                        "manifest: scene {} pose for instance {} is not orthonormal",
                        s.scene_id, p.instance_id
                    )));
                }
            }
            boxes += s.placements.len();
        }
        if boxes != m.total_boxes {
            return Err(Error::format(format!(
                "manifest: total_boxes says {} but scenes hold {boxes}",
                m.total_boxes
            )));
        }
        Ok(())
    }

    pub fn template_entry(&self, instance_id: u64) -> Result<&TemplateEntry> {
        self.manifest
            .templates
            .iter()
            .find(|t| t.instance_id == instance_id)
            .ok_or_else(|| Error::format(format!("no template entry for instance {instance_id}")))
    }

    pub fn template_rotation(&self, instance_id: u64, view: usize) -> Result<RotationMatrix<f64>> {
        let entry = self.template_entry(instance_id)?;
        entry
            .rotations
            .get(view)
            .map(|r| RotationMatrix::from_array(*r))
            .ok_or_else(|| Error::format(format!("instance {instance_id} has no view {view}")))
    }

    pub fn load_template_image(&self, instance_id: u64, view: usize) -> Result<ImageBuf> {
        load_image(&view_path(&self.root, instance_id, view))
    }

    pub fn load_scene_image(&self, scene_id: u64) -> Result<ImageBuf> {
        load_image(&scene_path(&self.root, scene_id))
    }

    /// Materialize an instance's full template set (all views + rotations).
    pub fn load_template_set(&self, instance_id: u64) -> Result<super::TemplateSet> {
        let entry = self.template_entry(instance_id)?;
        let images = (0..entry.rotations.len())
            .map(|k| self.load_template_image(instance_id, k))
            .collect::<Result<Vec<_>>>()?;
        let rotations = entry.rotations.iter().map(|r| RotationMatrix::from_array(*r)).collect();
        Ok(super::TemplateSet { instance_id, images, rotations })
    }

    pub fn scenes(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.manifest.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn instances(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.manifest.train_instances,
            Split::Test => &self.manifest.test_instances,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            n_train_instances: 3,
            n_test_instances: 2,
            n_train_scenes: 4,
            n_test_scenes: 2,
            image_size: 48,
            template_size: 32,
            voxel_res: 16,
            m_templates: 3,
            min_per_scene: 2,
            max_per_scene: 3,
            occlusion_target: 0.3,
            seed: 99,
        }
    }

    #[test]
    fn build_load_roundtrip_preserves_rotations_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(dir.path(), &tiny_config()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest.total_boxes, built.total_boxes);
        for (a, b) in built.templates.iter().zip(&ds.manifest.templates) {
            assert_eq!(a.instance_id, b.instance_id);
            for (ra, rb) in a.rotations.iter().zip(&b.rotations) {
                assert_eq!(ra, rb); // JSON must not round the floats
            }
        }
        for (a, b) in built.scenes.iter().zip(&ds.manifest.scenes) {
            for (pa, pb) in a.placements.iter().zip(&b.placements) {
                assert_eq!(pa.pose, pb.pose);
                assert_eq!(pa.box_xyxy, pb.box_xyxy);
                assert_eq!(pa.occlusion_fraction, pb.occlusion_fraction);
            }
        }
        // Lazy image loading matches what the components produce directly.
        let img = ds.load_template_image(0, 1).unwrap();
        assert_eq!(img.h, 32);
        let scene = ds.load_scene_image(0).unwrap();
        assert_eq!(scene.h, 48);
    }

    #[test]
    fn rebuild_with_same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_dataset(d1.path(), &tiny_config()).unwrap();
        build_dataset(d2.path(), &tiny_config()).unwrap();
        let m1 = fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let s1 = fs::read(d1.path().join("scenes/scene_00000.vxim")).unwrap();
        let s2 = fs::read(d2.path().join("scenes/scene_00000.vxim")).unwrap();
        assert_eq!(s1, s2);
        let t1 = fs::read(d1.path().join("templates/0002/view_01.vxim")).unwrap();
        let t2 = fs::read(d2.path().join("templates/0002/view_01.vxim")).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn splits_are_disjoint_and_scenes_respect_them() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &tiny_config()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let train: HashSet<u64> = ds.instances(Split::Train).iter().copied().collect();
        let test: HashSet<u64> = ds.instances(Split::Test).iter().copied().collect();
        assert!(train.is_disjoint(&test));
        for s in ds.scenes(Split::Test) {
            for p in &s.placements {
                assert!(test.contains(&p.instance_id));
            }
        }
        assert_eq!(ds.scenes(Split::Train).count(), 4);
        assert_eq!(ds.scenes(Split::Test).count(), 2);
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &tiny_config()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        // Claim one fewer box than the scenes actually hold.
        let ds = load_dataset(dir.path()).unwrap();
        let wrong = format!("\"total_boxes\": {}", ds.manifest.total_boxes);
        let fixed = format!("\"total_boxes\": {}", ds.manifest.total_boxes + 1);
        fs::write(&path, text.replace(&wrong, &fixed)).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
