//! Black-box tests of the `voxgeo` binary: exit codes, determinism of
//! generated artifacts, config plumbing, and the full tiny train→eval chain.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn voxgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxgeo"))
        .args(args)
        .env_remove("VOXGEO_SEED")
        .output()
        .expect("binary runs")
}

fn tiny_cfg(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "# tiny fixture\n\
         data.n_train_instances = 3\n\
         data.n_test_instances = 2\n\
         data.n_train_scenes = 4\n\
         data.n_test_scenes = 2\n\
         data.voxel_res = 16\n\
         data.m_templates = 3\n\
         data.min_per_scene = 2\n\
         data.max_per_scene = 3\n\
         data.occlusion_target = 0.2\n\
         net.enc_channels = 16\n\
         net.voxel_channels = 8\n\
         net.num_templates = 3\n\
         net.heldout_views = 1\n\
         net.num_proposals = 12\n\
         net.mlp_hidden = 16\n\
         net.dec_channels = 16\n\
         recon.epochs = 2\n\
         detect.epochs = 2\n\
         detect.phase1_epochs = 1\n\
         detect.lr = 0.001\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

/// Relative path → file bytes, for whole-tree comparisons.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn gen_data_layout_and_seeded_reproducibility() {
    let td = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(td.path());
    let a = td.path().join("a");
    let b = td.path().join("b");

    for out in [&a, &b] {
        let r = voxgeo(&["gen-data", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for name in ["manifest.json", "resolved.cfg"] {
        assert!(a.join(name).exists(), "{name} missing");
    }
    assert!(a.join("templates").is_dir());
    assert!(a.join("scenes").is_dir());

    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (k, v) in &ta {
        assert_eq!(Some(v), tb.get(k), "{k} differs between identical runs");
    }

    let stdout = String::from_utf8_lossy(
        &voxgeo(&["gen-data", "--config", &cfg, "--seed", "5", "--out", td.path().join("c").to_str().unwrap()])
            .stdout,
    )
    .to_string();
    assert!(stdout.contains("train: 3 instances, 4 scenes"), "summary: {stdout}");
    assert!(stdout.contains("test: 2 instances, 2 scenes"), "summary: {stdout}");
}

#[test]
fn seed_env_var_matches_flag() {
    let td = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(td.path());
    let a = td.path().join("flag");
    let b = td.path().join("env");

    let r = voxgeo(&["gen-data", "--config", &cfg, "--seed", "9", "--out", a.to_str().unwrap()]);
    assert!(r.status.success());
    let r = Command::new(env!("CARGO_BIN_EXE_voxgeo"))
        .args(["gen-data", "--config", &cfg, "--out", b.to_str().unwrap()])
        .env("VOXGEO_SEED", "9")
        .output()
        .unwrap();
    assert!(r.status.success());
    assert_eq!(tree(&a), tree(&b), "env seed and flag seed disagree");

    let r = Command::new(env!("CARGO_BIN_EXE_voxgeo"))
        .args(["gen-data", "--config", &cfg, "--out", td.path().join("x").to_str().unwrap()])
        .env("VOXGEO_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1), "malformed VOXGEO_SEED should be a usage error");
}

#[test]
fn bad_config_key_is_a_usage_error_listing_valid_keys() {
    let td = tempfile::tempdir().unwrap();
    let r = voxgeo(&[
        "gen-data",
        "--set",
        "data.bogus=1",
        "--out",
        td.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("unknown config key 'data.bogus'"), "{err}");
    assert!(err.contains("data.n_train_instances"), "{err}");

    let r = voxgeo(&["train", "--stage", "recon", "--data", "x", "--out", "y", "--init", "z"]);
    assert_eq!(r.status.code(), Some(1), "--init with recon must be usage error");
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let r = voxgeo(&["verify", "--points", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("all") && out.contains("checks passed"), "{out}");

    let r = voxgeo(&["verify", "--points", "3", "--negative-control"]);
    assert_eq!(r.status.code(), Some(2), "negative control must fail verification");
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("FAIL") && out.contains("negative-control"), "{out}");
}

#[test]
fn train_eval_chain_produces_reports() {
    let td = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(td.path());
    let data = td.path().join("data");
    let recon = td.path().join("recon");
    let detect = td.path().join("detect");
    let evald = td.path().join("eval");

    let r = voxgeo(&["gen-data", "--config", &cfg, "--seed", "7", "--out", data.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let r = voxgeo(&[
        "train", "--stage", "recon",
        "--config", &cfg, "--seed", "7",
        "--data", data.to_str().unwrap(),
        "--out", recon.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(recon.join("checkpoint.vxg").exists());
    assert!(recon.join("recon_losses.csv").exists());
    assert!(recon.join("resolved.cfg").exists());

    let r = voxgeo(&[
        "train", "--stage", "detect",
        "--config", &cfg, "--seed", "7",
        "--data", data.to_str().unwrap(),
        "--init", recon.join("checkpoint.vxg").to_str().unwrap(),
        "--out", detect.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(detect.join("checkpoint.vxg").exists());
    assert!(detect.join("detect_losses.csv").exists());

    let r = voxgeo(&[
        "eval",
        "--config", &cfg, "--seed", "7",
        "--data", data.to_str().unwrap(),
        "--checkpoint", detect.join("checkpoint.vxg").to_str().unwrap(),
        "--out", evald.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["eval.json", "eval_thresholds.csv", "eval_instances.csv", "resolved.cfg"] {
        assert!(evald.join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evald.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["top_k"], 1, "top-1 must be the default protocol");
    assert_eq!(report["split"], "test");
    assert_eq!(report["ar"].as_array().unwrap().len(), 10);

    // The ablation preset that skips reconstruction init also runs.
    let r = voxgeo(&[
        "train", "--stage", "detect",
        "--config", &cfg, "--seed", "7",
        "--ablation", "no-recon-init",
        "--data", data.to_str().unwrap(),
        "--init", recon.join("checkpoint.vxg").to_str().unwrap(),
        "--out", td.path().join("detect_nori").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let resolved =
        std::fs::read_to_string(td.path().join("detect_nori").join("resolved.cfg")).unwrap();
    assert!(resolved.contains("detect.recon_init = false"), "{resolved}");
}
