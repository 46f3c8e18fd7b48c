//! End-to-end pipeline behavior on a tiny fixture: training signal,
//! bit-exact checkpoint/resume, phase discipline (which parameters may
//! move when), and the determinism contract of evaluation.

use std::path::Path;
use voxgeo::net::{Model, NetConfig, RelationKind};
use voxgeo::pipeline::{
    evaluate, sweep_templates, sweep_topk, train_detection, train_reconstruction, EvalOptions,
    HeadKind, TrainConfig,
};
use voxgeo::synth::dataset::{build_dataset, load_dataset, Dataset, DatasetConfig, Split};
use voxgeo::synth::ImageBuf;
use voxgeo::tensor::{checkpoint, l1_loss, no_grad, Tensor};

fn tiny_dataset(dir: &Path) -> Dataset {
    let cfg = DatasetConfig {
        n_train_instances: 3,
        n_test_instances: 2,
        n_train_scenes: 5,
        n_test_scenes: 3,
        image_size: 64,
        template_size: 64,
        voxel_res: 16,
        m_templates: 3,
        min_per_scene: 2,
        max_per_scene: 3,
        occlusion_target: 0.2,
        seed: 31,
    };
    build_dataset(dir, &cfg).unwrap();
    load_dataset(dir).unwrap()
}

fn tiny_net() -> NetConfig {
    NetConfig {
        image_size: 64,
        enc_channels: 16,
        roi_size: 7,
        lift_depth: 8,
        voxel_channels: 8,
        voxel_depth: 8,
        voxel_size: 7,
        num_templates: 3,
        heldout_views: 1,
        num_proposals: 12,
        mlp_hidden: 16,
        dec_channels: 16,
    }
}

fn snapshot(params: &[(String, Tensor<f32>)]) -> Vec<(String, Vec<f32>)> {
    params.iter().map(|(n, p)| (n.clone(), p.to_vec())).collect()
}

fn changed_names(before: &[(String, Vec<f32>)], after: &[(String, Tensor<f32>)]) -> Vec<String> {
    assert_eq!(before.len(), after.len());
    before
        .iter()
        .zip(after)
        .filter_map(|((bn, bv), (an, ap))| {
            assert_eq!(bn, an);
            let av = ap.to_vec();
            let moved = bv.iter().zip(&av).any(|(x, y)| x.to_bits() != y.to_bits());
            moved.then(|| bn.clone())
        })
        .collect()
}

#[test]
fn recon_smoke_checkpoint_roundtrip_and_heldout_signal() {
    let td = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&td.path().join("data"));
    let net = tiny_net();
    let model = Model::<f32>::new(&net, RelationKind::Interleaved, 3).unwrap();

    let mut cfg = TrainConfig::recon_default();
    cfg.epochs = 16;
    cfg.seed = 3;
    let out = train_reconstruction(&model, &ds, &cfg, &td.path().join("recon")).unwrap();
    assert!(
        out.final_loss < 0.5 * out.initial_loss,
        "loss {} -> {} did not halve",
        out.initial_loss,
        out.final_loss
    );
    assert!(td.path().join("recon/recon_losses.csv").exists());

    // Checkpoint round-trips bit-exactly into a fresh model.
    let entries = checkpoint::load(&out.checkpoint).unwrap();
    let fresh = Model::<f32>::new(&net, RelationKind::Interleaved, 99).unwrap();
    checkpoint::apply_to_params(&entries, &fresh.params()).unwrap();
    for ((_, a), (_, b)) in model.params().iter().zip(fresh.params().iter()) {
        let (av, bv) = (a.to_vec(), b.to_vec());
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // A held-out (novel) instance reconstructs better than a blank volume:
    // the decoder's bias-only output is the degenerate alternative.
    let test_id = ds.instances(Split::Test)[0];
    let ts = ds.load_template_set(test_id).unwrap();
    no_grad(|| {
        let images: Vec<&ImageBuf> = ts.images[..2].iter().collect();
        let (template, _) =
            voxgeo::pipeline::template_forward(&model, &images, &ts.rotations[..2]).unwrap();
        let fake = model.decoder.forward(&template.v, &ts.rotations[2]).unwrap();
        let real = ts.images[2].to_tensor::<f32>();
        let l1 = l1_loss(&fake, &real).unwrap().item();

        let zero = Tensor::<f32>::from_vec(
            template.v.shape(),
            vec![0.0; template.v.numel()],
            false,
        );
        let blank = model.decoder.forward(&zero, &ts.rotations[2]).unwrap();
        let l1_blank = l1_loss(&blank, &real).unwrap().item();
        assert!(
            l1 < l1_blank,
            "template-driven decode (L1 {l1}) should beat a blank volume (L1 {l1_blank})"
        );
    });
}

#[test]
fn recon_resume_matches_uninterrupted_run_bit_for_bit() {
    let td = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&td.path().join("data"));
    let net = tiny_net();

    let mut full = TrainConfig::recon_default();
    full.epochs = 4;
    full.seed = 11;

    let one_shot = Model::<f32>::new(&net, RelationKind::Interleaved, 11).unwrap();
    train_reconstruction(&one_shot, &ds, &full, &td.path().join("one_shot")).unwrap();

    // Same run, interrupted after epoch 2 and resumed from its checkpoint.
    let mut partial = full.clone();
    partial.epochs = 2;
    let resumed = Model::<f32>::new(&net, RelationKind::Interleaved, 11).unwrap();
    train_reconstruction(&resumed, &ds, &partial, &td.path().join("resumed")).unwrap();
    train_reconstruction(&resumed, &ds, &full, &td.path().join("resumed")).unwrap();

    let a = std::fs::read(td.path().join("one_shot/checkpoint.vxg")).unwrap();
    let b = std::fs::read(td.path().join("resumed/checkpoint.vxg")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from the uninterrupted run");
    let curves_a = std::fs::read(td.path().join("one_shot/recon_losses.csv")).unwrap();
    let curves_b = std::fs::read(td.path().join("resumed/recon_losses.csv")).unwrap();
    assert_eq!(curves_a, curves_b);
}

#[test]
fn detect_phase_discipline_over_parameters() {
    let td = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&td.path().join("data"));
    let net = tiny_net();

    // With rotation supervision ablated, phase two is a no-op: after the
    // run the rotation head and decoder are bit-identical to their init,
    // while every phase-one parameter has moved.
    let model = Model::<f32>::new(&net, RelationKind::Interleaved, 5).unwrap();
    let rot_before = snapshot(&model.rotation_params());
    let dec_before = snapshot(&model.decoder.params("dec"));
    let mut main_params = model.detect_main_params();
    main_params.extend(model.mapping_params());
    main_params.extend(model.corr_params());
    let main_before = snapshot(&main_params);

    let mut cfg = TrainConfig::detect_default();
    cfg.epochs = 2;
    cfg.phase1_epochs = 1;
    cfg.lr = 1e-3;
    cfg.seed = 5;
    cfg.ablation.rotation_supervision = false;
    train_detection(&model, &ds, &cfg, None, &td.path().join("run_a")).unwrap();

    assert!(changed_names(&rot_before, &model.rotation_params()).is_empty());
    assert!(changed_names(&dec_before, &model.decoder.params("dec")).is_empty());
    let moved = changed_names(&main_before, &main_params);
    assert_eq!(
        moved.len(),
        main_before.len(),
        "all phase-one parameters should move; stuck: {:?}",
        main_before
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !moved.contains(n))
            .collect::<Vec<_>>()
    );

    // A pure phase-two run moves only the rotation head.
    let model2 = Model::<f32>::new(&net, RelationKind::Interleaved, 5).unwrap();
    let rot_before2 = snapshot(&model2.rotation_params());
    let mut frozen = model2.detect_main_params();
    frozen.extend(model2.mapping_params());
    frozen.extend(model2.corr_params());
    frozen.extend(model2.decoder.params("dec"));
    let frozen_before = snapshot(&frozen);

    let mut cfg2 = TrainConfig::detect_default();
    cfg2.epochs = 1;
    cfg2.phase1_epochs = 0;
    cfg2.lr = 1e-3;
    cfg2.seed = 5;
    train_detection(&model2, &ds, &cfg2, None, &td.path().join("run_b")).unwrap();

    assert!(changed_names(&frozen_before, &frozen).is_empty());
    let rot_moved = changed_names(&rot_before2, &model2.rotation_params());
    assert_eq!(
        rot_moved.len(),
        rot_before2.len(),
        "all rotation-head parameters should move in phase two"
    );
}

#[test]
fn detect_resume_matches_uninterrupted_run_bit_for_bit() {
    let td = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&td.path().join("data"));
    let net = tiny_net();

    let mut full = TrainConfig::detect_default();
    full.epochs = 3;
    full.phase1_epochs = 1;
    full.lr = 1e-3;
    full.seed = 13;

    let one_shot = Model::<f32>::new(&net, RelationKind::Interleaved, 13).unwrap();
    train_detection(&one_shot, &ds, &full, None, &td.path().join("one_shot")).unwrap();

    // Interrupt after epoch 2 (one phase-one epoch, one phase-two epoch),
    // then resume across the phase boundary.
    let mut partial = full.clone();
    partial.epochs = 2;
    let resumed = Model::<f32>::new(&net, RelationKind::Interleaved, 13).unwrap();
    train_detection(&resumed, &ds, &partial, None, &td.path().join("resumed")).unwrap();
    train_detection(&resumed, &ds, &full, None, &td.path().join("resumed")).unwrap();

    let a = std::fs::read(td.path().join("one_shot/checkpoint.vxg")).unwrap();
    let b = std::fs::read(td.path().join("resumed/checkpoint.vxg")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from the uninterrupted run");
}

#[test]
fn evaluation_is_deterministic_and_self_consistent() {
    let td = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&td.path().join("data"));
    let net = tiny_net();
    let model = Model::<f32>::new(&net, RelationKind::Interleaved, 21).unwrap();
    let entries = checkpoint::entries_from_params(&model.params());

    let opts = EvalOptions::default();
    let r1 = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &opts).unwrap();
    let r2 = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &opts).unwrap();
    assert_eq!(
        serde_json::to_string(&r1).unwrap(),
        serde_json::to_string(&r2).unwrap(),
        "two identical evaluations disagree"
    );

    // Worker count partitions work but must not change results.
    let single = EvalOptions { workers: 1, ..opts.clone() };
    let triple = EvalOptions { workers: 3, ..opts.clone() };
    let rs = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &single).unwrap();
    let rt = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &triple).unwrap();
    assert_eq!(serde_json::to_string(&rs).unwrap(), serde_json::to_string(&rt).unwrap());
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&rs).unwrap());

    // mAR is exactly the mean of the ten per-threshold values.
    assert_eq!(r1.ar.len(), 10);
    assert_eq!(r1.mar, r1.ar.iter().sum::<f64>() / 10.0);
    assert_eq!(r1.ar50, r1.ar[0]);

    // Asking for all template views explicitly reproduces the default.
    let full_m = EvalOptions { template_count: Some(3), ..opts.clone() };
    let rm = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &full_m).unwrap();
    assert_eq!(r1.ar, rm.ar);

    // Zero corruption equals the clean evaluation.
    let zero_noise = EvalOptions { shift_noise: 0.0, angle_noise_deg: 0.0, ..opts.clone() };
    let rn = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &zero_noise).unwrap();
    assert_eq!(r1.ar, rn.ar);

    // Top-K recall is non-decreasing, and the stored ranked lists support
    // re-slicing without re-running the model.
    let sweep = sweep_topk(&r1, &[1, 2, 4, 8, 12]).unwrap();
    for w in sweep.mar.windows(2) {
        assert!(w[1] >= w[0]);
    }

    // The correlation head runs on the same checkpoint.
    let corr = EvalOptions { head: HeadKind::Corr2d, ..opts.clone() };
    let rc = evaluate(&entries, &net, RelationKind::Interleaved, &ds, Split::Test, &corr).unwrap();
    assert_eq!(rc.pairs, r1.pairs);

    // Template sweep at m = M reproduces the full evaluation for QVM.
    let ts = sweep_templates(
        &entries,
        &net,
        RelationKind::Interleaved,
        &ds,
        Split::Test,
        &[2, 3],
        &opts,
    )
    .unwrap();
    assert_eq!(*ts.qvm_ar50.last().unwrap(), r1.ar50);
    assert_eq!(*ts.corr_ar50.last().unwrap(), rc.ar50);

    // The random baseline rides along with the same shape.
    assert_eq!(r1.baseline_ar.len(), 10);
    assert!(r1.baseline_ar.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
