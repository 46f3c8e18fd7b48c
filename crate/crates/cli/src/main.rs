//! Command-line front end: dataset generation, two-stage training,
//! evaluation, sweeps, and self-verification.
//!
//! Every subcommand is deterministic given (config, seed); all outputs land
//! under the requested output directory, next to a `resolved.cfg` capturing
//! the exact configuration used. Exit codes: 0 success, 1 usage error
//! (bad flags, unknown config keys, invalid values), 2 runtime failure.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use voxgeo::config::RunConfig;
use voxgeo::net::Model;
use voxgeo::pipeline::{
    emit_report, evaluate, run_ablation_grid, sweep_noise, sweep_templates, sweep_topk,
    train_detection, train_reconstruction, write_series_csv, Stage,
};
use voxgeo::synth::dataset::Split;
use voxgeo::synth::load_dataset;
use voxgeo::tensor::checkpoint;
use voxgeo::verify;

#[derive(Parser)]
#[command(
    name = "voxgeo",
    version,
    about = "Geometry-aware novel-instance detection: data, training, evaluation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every data-touching subcommand.
#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines (defaults apply without it)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one key, e.g. --set detect.epochs=5 (repeatable; applied
    /// after --config and --seed)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed applied to data generation, training, and evaluation
    /// alike; falls back to the VOXGEO_SEED environment variable
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view detection benchmark on disk
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset root directory to create
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Rayon worker threads (0 = all cores)
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train one stage; stage two usually starts from stage one via --init
    Train {
        #[command(flatten)]
        common: Common,
        /// Which stage to train
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset root (from gen-data)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run directory for checkpoint, loss curves, resolved config
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Initialize from this checkpoint (detect stage only)
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Ablation preset; equivalent to the matching --set switches
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
    },
    /// Score a checkpoint on a dataset split and write recall reports
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint to evaluate (training checkpoints work as-is)
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Dataset split to score
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Proposals kept per query (default: top-1 protocol)
        #[arg(long, value_name = "K")]
        top_k: Option<usize>,
        /// Evaluation worker threads (0 = all cores); results do not
        /// depend on this
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Parameter sweeps and the ablation grid
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Checkpoint to sweep (templates/topk/noise; ablation trains its own)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Template counts for --kind templates, e.g. 2,4,6,8,10
        #[arg(long, value_name = "LIST")]
        counts: Option<String>,
        /// Proposal cutoffs for --kind topk, e.g. 1,2,5,10
        #[arg(long, value_name = "LIST")]
        ks: Option<String>,
        /// Center-shift fractions for --kind noise, e.g. 0,0.1,0.2,0.3
        #[arg(long, value_name = "LIST")]
        shifts: Option<String>,
        /// Pose-noise magnitude in degrees for --kind noise
        #[arg(long, default_value_t = 15.0)]
        angle: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Run the numerical self-checks (gradients, rotations, warps, recall)
    Verify {
        /// Seed for the randomized probes
        #[arg(long)]
        seed: Option<u64>,
        /// Probed coordinates per gradient check
        #[arg(long, default_value_t = 5)]
        points: usize,
        /// Also run a deliberately broken adjoint; verification must then
        /// fail, proving the checker has teeth
        #[arg(long)]
        negative_control: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Recon,
    Detect,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum AblationArg {
    Full,
    NoReconInit,
    NoRotationAlign,
    NoRotationSupervision,
    NoVoxelRelation,
}

impl AblationArg {
    fn as_set(self) -> Option<(&'static str, &'static str)> {
        match self {
            AblationArg::Full => None,
            AblationArg::NoReconInit => Some(("detect.recon_init", "false")),
            AblationArg::NoRotationAlign => Some(("detect.rotation_align", "false")),
            AblationArg::NoRotationSupervision => Some(("detect.rotation_supervision", "false")),
            AblationArg::NoVoxelRelation => Some(("detect.voxel_relation", "false")),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Templates,
    Topk,
    Noise,
    Ablation,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help / --version arrive here too; those are successes.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<voxgeo::Error>(),
                Some(voxgeo::Error::Config(_))
            );
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

/// Master seed: --seed flag, else VOXGEO_SEED, else none.
fn effective_seed(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("VOXGEO_SEED") {
        Ok(s) => {
            let v = s.parse::<u64>().map_err(|_| {
                anyhow::Error::new(voxgeo::Error::config(format!(
                    "VOXGEO_SEED must be an unsigned integer, got '{s}'"
                )))
            })?;
            Ok(Some(v))
        }
        Err(_) => Ok(None),
    }
}

/// Defaults → config file → master seed → presets → --set, then validate.
fn resolve_config(common: &Common, pre_sets: &[(&str, &str)]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("cannot read config {}", p.display()))?;
        cfg.apply_str(&text)?;
    }
    if let Some(seed) = effective_seed(common.seed)? {
        cfg.set_master_seed(seed);
    }
    for (k, v) in pre_sets {
        cfg.set(k, v)?;
    }
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(anyhow::Error::new(voxgeo::Error::config(format!(
                "--set expects KEY=VALUE, got '{kv}'"
            ))));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(name: &str, s: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim().parse::<T>().map_err(|_| {
                anyhow::Error::new(voxgeo::Error::config(format!(
                    "{name}: cannot parse '{p}' in '{s}'"
                )))
            })
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { common, out, workers } => cmd_gen_data(&common, &out, workers),
        Cmd::Train { common, stage, data, out, init, ablation } => {
            cmd_train(&common, stage, &data, &out, init.as_deref(), ablation)
        }
        Cmd::Eval { common, data, checkpoint, out, split, top_k, workers } => {
            cmd_eval(&common, &data, &checkpoint, &out, split.into(), top_k, workers)
        }
        Cmd::Sweep { common, kind, data, out, checkpoint, counts, ks, shifts, angle, split } => {
            cmd_sweep(
                &common,
                kind,
                &data,
                &out,
                checkpoint.as_deref(),
                counts.as_deref(),
                ks.as_deref(),
                shifts.as_deref(),
                angle,
                split.into(),
            )
        }
        Cmd::Verify { seed, points, negative_control } => {
            cmd_verify(effective_seed(seed)?.unwrap_or(17), points, negative_control)
        }
    }
}

fn cmd_gen_data(common: &Common, out: &Path, workers: usize) -> anyhow::Result<()> {
    let cfg = resolve_config(common, &[])?;
    let gen = || voxgeo::synth::build_dataset(out, &cfg.data);
    if workers == 0 {
        gen()?;
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| anyhow!("thread pool: {e}"))?
            .install(gen)?;
    }
    cfg.write_resolved(out)?;

    let ds = load_dataset(out)?;
    for split in [Split::Train, Split::Test] {
        let scenes: Vec<_> = ds.scenes(split).collect();
        let boxes: usize = scenes.iter().map(|s| s.placements.len()).sum();
        println!(
            "{}: {} instances, {} scenes, {} boxes",
            if split == Split::Train { "train" } else { "test" },
            ds.instances(split).len(),
            scenes.len(),
            boxes
        );
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    stage: StageArg,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    ablation: AblationArg,
) -> anyhow::Result<()> {
    let pre: Vec<(&str, &str)> = ablation.as_set().into_iter().collect();
    let cfg = resolve_config(common, &pre)?;
    if matches!(stage, StageArg::Recon) && init.is_some() {
        bail!(voxgeo::Error::config(
            "--init applies to --stage detect; reconstruction starts from scratch".to_string()
        ));
    }
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    let outcome = match stage {
        StageArg::Recon => {
            let model = Model::<f32>::new(&cfg.net, cfg.relation(), cfg.recon.seed)?;
            train_reconstruction(&model, &ds, &cfg.recon, out)?
        }
        StageArg::Detect => {
            let model = Model::<f32>::new(&cfg.net, cfg.relation(), cfg.detect.seed)?;
            train_detection(&model, &ds, &cfg.detect, init, out)?
        }
    };
    println!(
        "{} done: epoch-mean loss {:.5} -> {:.5}, checkpoint {}",
        match stage {
            StageArg::Recon => Stage::Recon.as_str(),
            StageArg::Detect => Stage::Detect.as_str(),
        },
        outcome.initial_loss,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    split: Split,
    top_k: Option<usize>,
    workers: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = resolve_config(common, &[])?;
    if let Some(k) = top_k {
        cfg.eval.top_k = k;
    }
    if let Some(w) = workers {
        cfg.eval.workers = w;
    }
    let ds = load_dataset(data)?;
    let entries = checkpoint::load(ckpt)?;
    let report = evaluate(&entries, &cfg.net, cfg.relation(), &ds, split, &cfg.eval)?;
    emit_report(&report, out, "eval")?;
    cfg.write_resolved(out)?;
    println!(
        "eval[{}] top-{} {}: {} pairs, mAR {:.4}, AR50 {:.4}, AR75 {:.4} (baseline mAR {:.4}), {:.1} ms/query",
        report.split,
        report.top_k,
        report.head,
        report.pairs,
        report.mar,
        report.ar50,
        report.ar75,
        report.baseline_mar,
        report.mean_ms_per_query
    );
    println!("reports written under {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    common: &Common,
    kind: SweepKind,
    data: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    counts: Option<&str>,
    ks: Option<&str>,
    shifts: Option<&str>,
    angle: f64,
    split: Split,
) -> anyhow::Result<()> {
    let cfg = resolve_config(common, &[])?;
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;

    let need_ckpt = || -> anyhow::Result<Vec<voxgeo::tensor::checkpoint::Entry>> {
        let p = ckpt.ok_or_else(|| {
            anyhow::Error::new(voxgeo::Error::config(
                "this sweep needs --checkpoint".to_string(),
            ))
        })?;
        Ok(checkpoint::load(p)?)
    };

    match kind {
        SweepKind::Templates => {
            let entries = need_ckpt()?;
            let m = cfg.net.num_templates;
            let list: Vec<usize> = match counts {
                Some(s) => parse_list("counts", s)?,
                None => [2usize, 4, 6, 8, 10].iter().copied().filter(|&c| c <= m).collect(),
            };
            let sweep =
                sweep_templates(&entries, &cfg.net, cfg.relation(), &ds, split, &list, &cfg.eval)?;
            let rows: Vec<(f64, Vec<f64>)> = sweep
                .counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (c as f64, vec![sweep.qvm_ar50[i], sweep.corr_ar50[i]]))
                .collect();
            write_series_csv(&out.join("templates.csv"), "m", &["qvm_ar50", "corr2d_ar50"], &rows)?;
            println!(
                "template sweep over {:?}: qvm AR50 {:?} (min/max ratio {:.3}), corr2d AR50 {:?} (ratio {:.3})",
                sweep.counts,
                sweep.qvm_ar50,
                voxgeo::pipeline::TemplateSweep::endpoint_ratio(&sweep.qvm_ar50),
                sweep.corr_ar50,
                voxgeo::pipeline::TemplateSweep::endpoint_ratio(&sweep.corr_ar50),
            );
        }
        SweepKind::Topk => {
            let entries = need_ckpt()?;
            let n = cfg.net.num_proposals;
            let list: Vec<usize> = match ks {
                Some(s) => parse_list("ks", s)?,
                None => [1usize, 2, 3, 5, 10, 20, 30, 50, 64, 100]
                    .iter()
                    .copied()
                    .filter(|&k| k <= n)
                    .collect(),
            };
            let report = evaluate(&entries, &cfg.net, cfg.relation(), &ds, split, &cfg.eval)?;
            let sweep = sweep_topk(&report, &list)?;
            let rows: Vec<(f64, Vec<f64>)> = sweep
                .ks
                .iter()
                .enumerate()
                .map(|(i, &k)| (k as f64, vec![sweep.mar[i], sweep.ar50[i]]))
                .collect();
            write_series_csv(&out.join("topk.csv"), "k", &["mar", "ar50"], &rows)?;
            println!(
                "top-k sweep over {:?}: mAR {:?}, mAR@10 / mAR@max = {:.3}",
                sweep.ks, sweep.mar, sweep.ratio_10_over_max
            );
        }
        SweepKind::Noise => {
            let entries = need_ckpt()?;
            let list: Vec<f64> = match shifts {
                Some(s) => parse_list("shifts", s)?,
                None => vec![0.0, 0.1, 0.2, 0.3],
            };
            let sweep = sweep_noise(
                &entries,
                &cfg.net,
                cfg.relation(),
                &ds,
                split,
                &list,
                angle,
                &cfg.eval,
            )?;
            let rows: Vec<(f64, Vec<f64>)> = sweep
                .shifts
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, vec![sweep.shift_ar50[i]]))
                .collect();
            write_series_csv(&out.join("noise_shift.csv"), "shift", &["ar50"], &rows)?;
            write_series_csv(
                &out.join("noise_angle.csv"),
                "angle_deg",
                &["ar50"],
                &[(sweep.angle_deg, vec![sweep.angle_ar50])],
            )?;
            println!(
                "noise sweep: shifts {:?} -> AR50 {:?}; {}° pose noise -> AR50 {:.4}",
                sweep.shifts, sweep.shift_ar50, sweep.angle_deg, sweep.angle_ar50
            );
        }
        SweepKind::Ablation => {
            let rows = run_ablation_grid(&ds, &cfg.net, &cfg.recon, &cfg.detect, &cfg.eval, out)?;
            for r in &rows {
                println!("{:<28} mAR {:.4} AR50 {:.4} AR75 {:.4}", r.name, r.mar, r.ar50, r.ar75);
            }
        }
    }
    println!("sweep outputs written under {}", out.display());
    Ok(())
}

fn cmd_verify(seed: u64, points: usize, negative_control: bool) -> anyhow::Result<()> {
    let mut checks = verify::full_suite(points, seed)?;
    if negative_control {
        checks.push(verify::wrong_adjoint_probe()?);
    }
    let mut failed = 0usize;
    for c in &checks {
        println!("{} {:<44} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
