//! `modeseq eval`: decode a checkpoint over a dataset and emit per-layer and
//! final metric reports (JSON + CSV). Scene work can fan out over threads;
//! the merge is a fixed-order reduction, so reports are byte-identical
//! regardless of thread count.

use crate::config::{EvalConfig, RunConfig};
use crate::error::CliError;
use crate::runs::{create_run_dir, output_root, unix_now, RunManifest};
use crate::EvalArgs;
use modeseq::metrics::{
    evaluate_joint, evaluate_marginal, JointMetricReport, JointSceneEvalInput, MetricReport,
    SceneEvalInput,
};
use modeseq::model::{Checkpoint, ModeSeqModel};
use modeseq::scene::{Scene, Trajectory};
use modeseq::synth::{dataset_hash, load_dataset};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Interactive scenes store every target's oracle branches back to back in
/// target order; slice out the block for one target.
fn oracle_for_target(scene: &Scene, target: u64) -> Option<Vec<Trajectory>> {
    let branches = scene.oracle_branches.as_ref()?;
    let n_targets = scene.targets.len();
    if n_targets == 0 || branches.len() % n_targets != 0 {
        return None;
    }
    let per_target = branches.len() / n_targets;
    let ti = scene.targets.iter().position(|&t| t == target)?;
    Some(branches[ti * per_target..(ti + 1) * per_target].to_vec())
}

#[derive(Serialize)]
struct ReportFile<'a, R: Serialize> {
    /// Path of the run manifest this report belongs to, relative to the run
    /// directory.
    manifest: &'a str,
    kind: &'a str,
    /// 0-based refinement layer this report scores; the last layer is the
    /// model's final output.
    layer: usize,
    layers: usize,
    /// Mode count actually decoded (may exceed the trained K).
    modes: usize,
    report: &'a R,
}

fn write_report<R: Serialize>(
    dir: &Path,
    name: &str,
    file: &ReportFile<R>,
) -> Result<(), CliError> {
    let body = serde_json::to_vec_pretty(file)
        .map_err(|e| CliError::Io(format!("encoding {name}: {e}")))?;
    std::fs::write(dir.join(name), body)?;
    Ok(())
}

pub fn run(args: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let (model, _) = Checkpoint::load(&args.checkpoint)?.into_model()?;

    let mut eval_cfg = EvalConfig::default();
    if let Some(t) = args.threshold {
        eval_cfg.threshold = t;
    }
    if let Some(m) = args.modes {
        eval_cfg.modes = Some(m);
    }
    if let Some(r) = args.miss_rule {
        eval_cfg.miss_rule = r.into();
    }
    if let Some(t) = args.threads {
        eval_cfg.threads = t;
    }

    let mut opts = model.decode_options();
    if let Some(v) = args.variant {
        opts.variant = v.into();
    }
    if let Some(r) = args.rearrange {
        opts.rearrange = r.into();
    }
    if let Some(c) = args.causal {
        opts.causal = c.into();
    }
    opts.modes = eval_cfg.modes.unwrap_or(model.config.modes);

    // Check the flag before the blanket config validation so the diagnostic
    // names --modes rather than a config key the user never wrote.
    if opts.modes == 0 || opts.modes > model.config.max_modes {
        return Err(CliError::Config(format!(
            "--modes {} outside this checkpoint's decodable range 1..={}",
            opts.modes, model.config.max_modes
        )));
    }
    let cfg = RunConfig {
        model: model.config.clone(),
        train: modeseq::train::TrainConfig::desk(), // not used by eval; recorded for completeness
        eval: eval_cfg.clone(),
    };
    cfg.validate()?;

    let scenes = load_dataset(&args.data)?;
    let hash = dataset_hash(&args.data)?;

    let root = output_root(args.out_root.as_deref());
    let run_dir = create_run_dir(&root, "eval", 0, args.run_name.as_deref())?;
    let mut manifest = RunManifest::new("eval", argv.to_vec(), 0, cfg);
    manifest.dataset_manifest = Some(args.data.clone());
    manifest.dataset_hash = Some(hash);
    manifest.threads = eval_cfg.threads;
    manifest.outputs.insert("report".into(), "report.json".into());
    manifest.outputs.insert("report_csv".into(), "report.csv".into());
    manifest.outputs.insert("layer_reports".into(), "eval_layer*.json".into());
    manifest.outputs.insert("layers_csv".into(), "layers.csv".into());
    manifest.write(&run_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_cfg.threads)
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;

    let n_layers = model.config.layers;
    if model.config.joint {
        let layer_inputs = joint_layer_inputs(&pool, &model, &scenes, &opts, n_layers)?;
        let reports: Vec<JointMetricReport> = layer_inputs
            .iter()
            .map(|inputs| evaluate_joint(inputs, eval_cfg.threshold, eval_cfg.miss_rule))
            .collect::<Result<_, _>>()?;
        emit(&run_dir, "joint", opts.modes, &reports, JointMetricReport::csv_header(), |r| {
            r.csv_row()
        })?;
        let last = reports.last().expect("at least one layer");
        println!(
            "scenes: {}  joint minADE: {:.3}  joint minFDE: {:.3}  joint miss rate: {:.3}  joint mAP: {:.3}",
            last.scenes, last.joint_min_ade, last.joint_min_fde, last.joint_miss_rate, last.joint_m_ap
        );
    } else {
        let layer_inputs = marginal_layer_inputs(&pool, &model, &scenes, &opts, n_layers)?;
        let reports: Vec<MetricReport> = layer_inputs
            .iter()
            .map(|inputs| evaluate_marginal(inputs, eval_cfg.threshold))
            .collect::<Result<_, _>>()?;
        emit(&run_dir, "marginal", opts.modes, &reports, MetricReport::csv_header(), |r| {
            r.csv_row()
        })?;
        let last = reports.last().expect("at least one layer");
        let a = &last.aggregate;
        println!(
            "scenes: {}  minADE: {:.3}  minFDE: {:.3}  miss rate: {:.3}  mAP: {:.3}  soft mAP: {:.3}",
            last.scenes, a.min_ade, a.min_fde, a.miss_rate, a.m_ap, a.soft_m_ap
        );
    }

    manifest.finished_unix = Some(unix_now());
    manifest.write(&run_dir)?;
    println!("run dir: {}", run_dir.display());
    Ok(())
}

/// Decode every (scene, target) pair and bucket the results per layer.
fn marginal_layer_inputs(
    pool: &rayon::ThreadPool,
    model: &ModeSeqModel,
    scenes: &[Scene],
    opts: &modeseq::decoder::DecodeOptions,
    n_layers: usize,
) -> Result<Vec<Vec<SceneEvalInput>>, CliError> {
    let jobs: Vec<(usize, u64)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.targets.iter().map(move |&t| (i, t)))
        .collect();

    let decoded: Vec<Result<Vec<SceneEvalInput>, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, target)| {
                let scene = &scenes[i];
                let layer_sets = model.predict_layers(scene, target, opts)?;
                let gt = scene.future.get(&target).ok_or_else(|| {
                    CliError::Data(format!(
                        "scene {} has no future for target {target}",
                        scene.scene_id
                    ))
                })?;
                let kind = scene.target_kind(target).ok_or_else(|| {
                    CliError::Data(format!(
                        "scene {} target {target} missing from agents",
                        scene.scene_id
                    ))
                })?;
                Ok(layer_sets
                    .into_iter()
                    .map(|preds| SceneEvalInput {
                        scene_id: format!("{}:{target}", scene.scene_id),
                        kind,
                        preds,
                        gt: gt.clone(),
                        oracle: oracle_for_target(scene, target),
                    })
                    .collect())
            })
            .collect()
    });

    let mut layers: Vec<Vec<SceneEvalInput>> = (0..n_layers).map(|_| Vec::new()).collect();
    for job in decoded {
        for (l, input) in job?.into_iter().enumerate() {
            layers[l].push(input);
        }
    }
    Ok(layers)
}

fn joint_layer_inputs(
    pool: &rayon::ThreadPool,
    model: &ModeSeqModel,
    scenes: &[Scene],
    opts: &modeseq::decoder::DecodeOptions,
    n_layers: usize,
) -> Result<Vec<Vec<JointSceneEvalInput>>, CliError> {
    let decoded: Vec<Result<Vec<JointSceneEvalInput>, CliError>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| {
                let layer_sets = model.predict_joint_layers(scene, opts)?;
                let kinds = scene
                    .targets
                    .iter()
                    .map(|&t| {
                        scene.target_kind(t).ok_or_else(|| {
                            CliError::Data(format!(
                                "scene {} target {t} missing from agents",
                                scene.scene_id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(layer_sets
                    .into_iter()
                    .map(|preds| JointSceneEvalInput {
                        scene_id: scene.scene_id.clone(),
                        kinds: kinds.clone(),
                        preds,
                        gt: scene.future.clone(),
                    })
                    .collect())
            })
            .collect()
    });

    let mut layers: Vec<Vec<JointSceneEvalInput>> = (0..n_layers).map(|_| Vec::new()).collect();
    for job in decoded {
        for (l, input) in job?.into_iter().enumerate() {
            layers[l].push(input);
        }
    }
    Ok(layers)
}

/// Write eval_layer{l}.json for each layer, report.json for the final layer,
/// layers.csv with one row per layer, and report.csv for the final row.
fn emit<R: Serialize>(
    run_dir: &Path,
    kind: &str,
    modes: usize,
    reports: &[R],
    csv_header: &str,
    csv_row: impl Fn(&R) -> String,
) -> Result<(), CliError> {
    let n = reports.len();
    for (l, report) in reports.iter().enumerate() {
        let file =
            ReportFile { manifest: "manifest.json", kind, layer: l, layers: n, modes, report };
        write_report(run_dir, &format!("eval_layer{l}.json"), &file)?;
        if l + 1 == n {
            write_report(run_dir, "report.json", &file)?;
        }
    }

    let mut layers_csv = format!("layer,{csv_header}\n");
    for (l, report) in reports.iter().enumerate() {
        layers_csv.push_str(&format!("{l},{}\n", csv_row(report)));
    }
    std::fs::write(run_dir.join("layers.csv"), layers_csv)?;

    let final_csv = format!("{csv_header}\n{}\n", csv_row(reports.last().expect("nonempty")));
    std::fs::write(run_dir.join("report.csv"), final_csv)?;
    Ok(())
}
