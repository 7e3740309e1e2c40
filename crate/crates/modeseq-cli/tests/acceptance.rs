//! Acceptance gate for the whole workspace: eleven end-to-end checks, one
//! verdict line each, covering gradient correctness, assignment and metric
//! reference equivalence, decode causality, mode extrapolation, the three
//! training ablation trends, decode latency, an overfit smoke test, and the
//! joint-coupling sanity check. Run it alone with
//!
//! ```text
//! cargo test -p modeseq-cli --test acceptance
//! ```
//!
//! `ACCEPTANCE_ONLY=1,8` limits a run to the numbered checks (the shared
//! model fleet only trains when a check that needs it is enabled).
//!
//! Checks 5-7 and 10-11 train real models, so a full pass takes roughly half
//! an hour on one core; everything else finishes in seconds. Tolerances and
//! thresholds live next to each check.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::catch_unwind;
use std::process::Command;
use std::sync::LazyLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use modeseq::assign::{
    assign_from_distances, emta_assign, ma_emta_assign, AssignConfig, Assignment, DistanceMode,
    IgnoredVariant, JointAggregate, ModeLabel, Strategy,
};
use modeseq::decoder::{DecoderVariant, LayerVars};
use modeseq::loss::{
    confidence_loss, focal_term, laplace_nll, margin_ranking_loss, single_agent_layer_loss,
    LossWeights,
};
use modeseq::metrics::{
    average_precision, evaluate_marginal, joint_min_ade, joint_min_fde, joint_miss, min_ade,
    min_fde, miss, JointMissRule, MetricReport, PooledPrediction, SceneEvalInput,
};
use modeseq::model::{Checkpoint, ModeSeqModel, ModelConfig};
use modeseq::num::check::{check_gradients, DEFAULT_FLOOR, DEFAULT_STEP, GRAD_TOLERANCE};
use modeseq::num::{Mask, NumError, Shape, Tape, Var};
use modeseq::scene::{
    JointModePrediction, JointPredictionSet, ModePrediction, Point, PredictionSet, Scene,
    Trajectory,
};
use modeseq::synth::{
    fork3_spec, generate_fork_scene, generate_interactive_scene, interactive_spec, mix_seed,
    nearest_branch_index, Coupling,
};
use modeseq::train::{train, TrainConfig};

/// Endpoint match/miss threshold used by the synthetic benchmark, meters.
const MATCH_THRESHOLD: f64 = 2.0;

fn main() {
    // Failures are reported through the verdict lines; the default hook's
    // stderr dump would just duplicate them.
    std::panic::set_hook(Box::new(|_| {}));

    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| {
        v.split(',').filter_map(|p| p.trim().parse().ok()).collect()
    });
    let enabled = |n: usize| only.as_ref().map_or(true, |s| s.contains(&n));

    type Check = (usize, &'static str, fn() -> String);
    let checks: Vec<Check> = vec![
        (1, "gradient finite differences", c01_gradient_finite_differences),
        (2, "assignment reference equivalence", c02_assignment_references),
        (3, "decode causality", c03_decode_causality),
        (4, "mode extrapolation", c04_mode_extrapolation),
        (5, "early-match vs winner-take-all", c05_emta_vs_wta),
        (6, "rearrangement benefit", c06_rearrangement_benefit),
        (7, "ranking-loss effect", c07_ranking_loss_effect),
        (8, "metric reference equivalence", c08_metric_references),
        (9, "parallel decode latency", c09_parallel_latency),
        (10, "overfit smoke test", c10_overfit_smoke),
        (11, "joint coupling sanity", c11_joint_coupling),
    ];

    // The ablation checks share one fleet of trained models; build it up
    // front so their verdict lines time only their own analysis.
    if (4..=7).any(enabled) {
        println!("acceptance -- training the shared desk fleet (4 arms x 5 seeds + evals)...");
        let t0 = Instant::now();
        if catch_unwind(|| LazyLock::force(&FLEET)).is_err() {
            println!("acceptance -- fleet training panicked; dependent checks will fail");
        } else {
            println!("acceptance -- fleet ready in {:.0}s", t0.elapsed().as_secs_f64());
        }
    }

    let mut failed: Vec<usize> = Vec::new();
    for (num, name, check) in checks {
        if !enabled(num) {
            println!("acceptance {num:02} SKIP {name}");
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(check);
        let dt = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {num:02} PASS ({dt:.1}s) {name}: {detail}"),
            Err(payload) => {
                failed.push(num);
                println!("acceptance {num:02} FAIL ({dt:.1}s) {name}: {}", payload_text(&payload));
            }
        }
    }

    if failed.is_empty() {
        println!("acceptance: all enabled checks passed");
    } else {
        eprintln!("acceptance: {} check(s) failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}

fn payload_text(payload: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else {
        "panic with non-string payload".to_string()
    }
}

// ---- shared synthetic data and the trained fleet --------------------------------

/// 500 training / 200 validation three-way fork scenes, generated in memory.
static DATA: LazyLock<(Vec<Scene>, Vec<Scene>)> = LazyLock::new(|| {
    let spec = fork3_spec();
    let gen = |base: u64, n: usize, tag: &str| -> Vec<Scene> {
        (0..n)
            .map(|i| {
                generate_fork_scene(
                    &spec.with_seed(mix_seed(base, i as u64)),
                    &format!("{tag}-{i:05}"),
                )
                .expect("fork generation is infallible for the stock spec")
            })
            .collect()
    };
    (gen(42, 500, "train"), gen(43, 200, "val"))
});

struct Fleet {
    /// Per-seed validation reports for each training arm.
    emta: Vec<MetricReport>,
    wta: Vec<MetricReport>,
    norearr: Vec<MetricReport>,
    norank: Vec<MetricReport>,
    /// Seed-0 model of the default arm, kept for the extrapolation trend.
    emta_seed0: ModeSeqModel,
    /// Wall-clock train+eval seconds for the two arms with a time budget.
    emta_secs: f64,
    wta_secs: f64,
}

const FLEET_SEEDS: u64 = 5;

/// Twenty desk-preset training runs: the default recipe plus one arm each
/// flipping the assignment strategy, the rearrangement switch, and the
/// ranking-loss weight. All arms share data and per-seed initialization.
static FLEET: LazyLock<Fleet> = LazyLock::new(|| {
    let (train_scenes, val_scenes) = &*DATA;

    let run_arm = |seed: u64, tweak: &dyn Fn(&mut ModelConfig, &mut TrainConfig)| {
        let mut mc = ModelConfig::desk();
        let mut tc = TrainConfig::desk();
        tc.seed = seed;
        tweak(&mut mc, &mut tc);
        let mut model = ModeSeqModel::init(&mc, 1000 + seed).expect("desk config validates");
        train(&mut model, train_scenes, &tc, None, None, None).expect("desk training runs");
        let report = eval_marginal_model(&model, val_scenes);
        (model, report)
    };

    let mut emta = Vec::new();
    let mut wta = Vec::new();
    let mut norearr = Vec::new();
    let mut norank = Vec::new();
    let mut emta_seed0 = None;
    let (mut emta_secs, mut wta_secs) = (0.0, 0.0);

    for seed in 0..FLEET_SEEDS {
        let t0 = Instant::now();
        let (model, report) = run_arm(seed, &|_, _| {});
        emta_secs += t0.elapsed().as_secs_f64();
        emta.push(report);
        if seed == 0 {
            emta_seed0 = Some(model);
        }

        let t0 = Instant::now();
        let (_, report) = run_arm(seed, &|_, tc| tc.assign.strategy = Strategy::Wta);
        wta_secs += t0.elapsed().as_secs_f64();
        wta.push(report);

        let (_, report) = run_arm(seed, &|mc, _| mc.rearrange = false);
        norearr.push(report);

        let (_, report) = run_arm(seed, &|_, tc| tc.weights.lambda_rank = 0.0);
        norank.push(report);
    }

    Fleet {
        emta,
        wta,
        norearr,
        norank,
        emta_seed0: emta_seed0.expect("seed 0 ran"),
        emta_secs,
        wta_secs,
    }
});

fn eval_marginal_model(model: &ModeSeqModel, scenes: &[Scene]) -> MetricReport {
    let opts = model.decode_options();
    let inputs: Vec<SceneEvalInput> = scenes
        .iter()
        .map(|scene| {
            let target = scene.targets[0];
            SceneEvalInput {
                scene_id: scene.scene_id.clone(),
                kind: scene.target_kind(target).expect("target exists"),
                preds: model.predict(scene, target, &opts).expect("decode succeeds"),
                gt: scene.future[&target].clone(),
                oracle: scene.oracle_branches.clone(),
            }
        })
        .collect();
    evaluate_marginal(&inputs, MATCH_THRESHOLD).expect("evaluation succeeds")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---- 1: every differentiable op and loss against central differences ------------

const FD_INSTANCES: usize = 20;

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> (Shape, Vec<f64>) {
    (Shape::new(rows, cols), (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Push values off a non-differentiable point so the ±h probes of the
/// central difference stay on one side of it.
fn keep_away(values: &mut [f64], kinks: &[f64], margin: f64) {
    for v in values.iter_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = k + margin * if *v >= k { 1.0 } else { -1.0 };
            }
        }
    }
}

fn fd_check(
    name: &str,
    inputs: &[(Shape, Vec<f64>)],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
) -> f64 {
    let report = check_gradients(inputs, DEFAULT_STEP, DEFAULT_FLOOR, build)
        .unwrap_or_else(|e| panic!("{name}: graph construction failed: {e}"));
    assert!(
        report.max_rel_err < GRAD_TOLERANCE,
        "{name}: max relative error {} >= {GRAD_TOLERANCE}",
        report.max_rel_err
    );
    report.max_rel_err
}

/// Square-then-sum so every op sees a non-uniform upstream gradient instead
/// of the all-ones adjoint a bare sum would give it.
fn squared_sum(t: &mut Tape, y: Var) -> Result<Var, NumError> {
    let sq = t.mul(y, y)?;
    Ok(t.sum_all(sq))
}

fn c01_gradient_finite_differences() -> String {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst: f64 = 0.0;
    let mut ops = 0usize;

    // -- primitives, 20 random instances each --
    macro_rules! op {
        ($name:literal, $inputs:expr, $build:expr) => {{
            for _ in 0..FD_INSTANCES {
                let inputs = $inputs(&mut rng);
                worst = worst.max(fd_check($name, &inputs, $build));
            }
            ops += 1;
        }};
    }

    op!("matmul", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 4, 2, -2.0, 2.0)],
        |t, v| { let y = t.matmul(v[0], v[1])?; squared_sum(t, y) });
    op!("transpose", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.transpose(v[0]); squared_sum(t, y) });
    op!("concat_rows", |r: &mut ChaCha8Rng| vec![rand_mat(r, 2, 3, -2.0, 2.0), rand_mat(r, 1, 3, -2.0, 2.0), rand_mat(r, 3, 3, -2.0, 2.0)],
        |t, v| { let y = t.concat_rows(&[v[0], v[1], v[2]])?; squared_sum(t, y) });
    op!("concat_cols", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 2, -2.0, 2.0), rand_mat(r, 3, 3, -2.0, 2.0)],
        |t, v| { let y = t.concat_cols(&[v[0], v[1]])?; squared_sum(t, y) });
    op!("slice_cols", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 5, -2.0, 2.0)],
        |t, v| { let y = t.slice_cols(v[0], 1, 3)?; squared_sum(t, y) });
    op!("gather_rows", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.gather_rows(v[0], &[2, 0, 0, 1])?; squared_sum(t, y) });
    op!("row", |r: &mut ChaCha8Rng| vec![rand_mat(r, 4, 3, -2.0, 2.0)],
        |t, v| { let y = t.row(v[0], 2)?; squared_sum(t, y) });
    op!("add", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.add(v[0], v[1])?; squared_sum(t, y) });
    op!("sub", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.sub(v[0], v[1])?; squared_sum(t, y) });
    op!("mul", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.mul(v[0], v[1])?; squared_sum(t, y) });
    op!("div", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 3, 4, 0.5, 2.5)],
        |t, v| { let y = t.div(v[0], v[1])?; squared_sum(t, y) });
    op!("add_row", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 1, 4, -2.0, 2.0)],
        |t, v| { let y = t.add_row(v[0], v[1])?; squared_sum(t, y) });
    op!("linear", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 4, 2, -2.0, 2.0), rand_mat(r, 1, 2, -2.0, 2.0)],
        |t, v| { let y = t.linear(v[0], v[1], v[2])?; squared_sum(t, y) });
    op!("scale", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.scale(v[0], -1.7); squared_sum(t, y) });
    op!("add_scalar", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.add_scalar(v[0], 0.37); squared_sum(t, y) });
    op!("tanh", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.tanh(v[0]); squared_sum(t, y) });
    op!("sigmoid", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.sigmoid(v[0]); squared_sum(t, y) });
    op!("softplus", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.softplus(v[0]); squared_sum(t, y) });
    op!("exp", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -1.5, 1.5)],
        |t, v| { let y = t.exp(v[0]); squared_sum(t, y) });
    op!("log", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, 0.2, 3.0)],
        |t, v| { let y = t.log(v[0]); squared_sum(t, y) });
    op!("abs", |r: &mut ChaCha8Rng| {
            let mut m = rand_mat(r, 3, 4, -2.0, 2.0);
            keep_away(&mut m.1, &[0.0], 1e-3);
            vec![m]
        },
        |t, v| { let y = t.abs(v[0]); squared_sum(t, y) });
    op!("relu", |r: &mut ChaCha8Rng| {
            let mut m = rand_mat(r, 3, 4, -2.0, 2.0);
            keep_away(&mut m.1, &[0.0], 1e-3);
            vec![m]
        },
        |t, v| { let y = t.relu(v[0]); squared_sum(t, y) });
    op!("powf", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, 0.3, 3.0)],
        |t, v| { let y = t.powf(v[0], 1.7); squared_sum(t, y) });
    op!("clamp", |r: &mut ChaCha8Rng| {
            let mut m = rand_mat(r, 3, 4, -2.0, 2.0);
            keep_away(&mut m.1, &[-1.0, 1.0], 1e-3);
            vec![m]
        },
        |t, v| { let y = t.clamp(v[0], -1.0, 1.0); squared_sum(t, y) });
    op!("sum_all", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.sum_all(v[0]); squared_sum(t, y) });
    op!("mean_all", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.mean_all(v[0]); squared_sum(t, y) });
    op!("max_pool_rows", |r: &mut ChaCha8Rng| {
            // A within-h tie in a column would flip the argmax between the
            // two probe points; widen any photo-finish.
            let (shape, mut vals) = rand_mat(r, 4, 3, -2.0, 2.0);
            for c in 0..3 {
                let col: Vec<f64> = (0..4).map(|r_| vals[r_ * 3 + c]).collect();
                let top = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let arg = col.iter().position(|&v| v == top).unwrap();
                let second =
                    col.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
                if top - second < 1e-3 {
                    vals[arg * 3 + c] += 0.1;
                }
            }
            vec![(shape, vals)]
        },
        |t, v| { let y = t.max_pool_rows(v[0])?; squared_sum(t, y) });
    op!("layer_norm", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0), rand_mat(r, 1, 4, 0.5, 1.5), rand_mat(r, 1, 4, -0.5, 0.5)],
        |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?; squared_sum(t, y) });
    op!("masked_softmax", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 3, -2.0, 2.0)],
        |t, v| { let m = Mask::causal(3); let y = t.masked_softmax(v[0], Some(&m))?; squared_sum(t, y) });
    op!("softmax_unmasked", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 4, -2.0, 2.0)],
        |t, v| { let y = t.masked_softmax(v[0], None)?; squared_sum(t, y) });
    op!("attention", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 8, -1.5, 1.5), rand_mat(r, 4, 8, -1.5, 1.5), rand_mat(r, 4, 8, -1.5, 1.5)],
        |t, v| { let y = t.attention(v[0], v[1], v[2], None, 2)?; squared_sum(t, y) });
    op!("attention_causal", |r: &mut ChaCha8Rng| vec![rand_mat(r, 3, 8, -1.5, 1.5), rand_mat(r, 3, 8, -1.5, 1.5), rand_mat(r, 3, 8, -1.5, 1.5)],
        |t, v| { let m = Mask::causal(3); let y = t.attention(v[0], v[1], v[2], Some(&m), 2)?; squared_sum(t, y) });

    // -- composite losses, 20 random instances each --

    // Location-scale likelihood: keep every residual away from the |.| kink.
    for _ in 0..FD_INSTANCES {
        let t_hat = rng.gen_range(3..=6usize);
        let loc = rand_mat(&mut rng, 1, 2 * t_hat, -2.0, 2.0);
        let scale = rand_mat(&mut rng, 1, 2 * t_hat, 0.4, 2.0);
        let mut gt = rand_mat(&mut rng, 1, 2 * t_hat, -2.0, 2.0);
        for (g, l) in gt.1.iter_mut().zip(&loc.1) {
            if (*g - l).abs() < 1e-3 {
                *g += 0.05;
            }
        }
        worst = worst.max(fd_check("laplace_nll", &[loc, scale, gt], |t, v| {
            Ok(laplace_nll(t, v[0], v[1], v[2]).expect("valid scales"))
        }));
    }
    ops += 1;

    for i in 0..FD_INSTANCES {
        let conf = rand_mat(&mut rng, 1, 1, 0.1, 0.9);
        let positive = i % 2 == 0;
        worst = worst.max(fd_check("focal_term", &[conf], |t, v| {
            Ok(focal_term(t, v[0], positive, 2.0).expect("in-range confidence"))
        }));
    }
    ops += 1;

    for i in 0..FD_INSTANCES {
        let k = rng.gen_range(3..=6usize);
        let conf = rand_mat(&mut rng, k, 1, 0.1, 0.9);
        let assignment = random_assignment(&mut rng, k, i);
        worst = worst.max(fd_check("confidence_loss", &[conf], |t, v| {
            Ok(confidence_loss(t, v[0], &assignment, 2.0).expect("some mode is counted"))
        }));
    }
    ops += 1;

    for i in 0..FD_INSTANCES {
        let k = rng.gen_range(3..=6usize);
        let mut conf = rand_mat(&mut rng, k, 1, 0.1, 0.9);
        let assignment = random_assignment(&mut rng, k, i);
        // The hinge is non-differentiable where a negative sits exactly
        // `margin` below the selected confidence; nudge those away.
        let margin = 0.1;
        let sel = conf.1[assignment.selected];
        for &n in &assignment.negatives() {
            if (margin - (sel - conf.1[n])).abs() < 1e-3 {
                conf.1[n] -= 0.05;
            }
        }
        worst = worst.max(fd_check("margin_ranking_loss", &[conf], |t, v| {
            Ok(margin_ranking_loss(t, v[0], &assignment, margin).expect("constructs"))
        }));
    }
    ops += 1;

    // Full single-agent layer objective: distances engineered so the ±h
    // probes can't flip the assignment mid-check.
    for i in 0..FD_INSTANCES {
        let (k, t_hat) = (4usize, 4usize);
        let gt_points: Vec<Point> =
            (0..t_hat).map(|s| Point::new(s as f64, rng.gen_range(-1.0..1.0))).collect();
        let gt = Trajectory(gt_points.clone());

        // Mode endpoints at controlled distances from the truth: two inside
        // the 2 m threshold, two outside, all gaps comfortably over 1e-2.
        let dists = [0.4 + 0.1 * (i % 3) as f64, 1.3, 3.0, 5.5];
        let mut loc_vals = Vec::with_capacity(k * 2 * t_hat);
        for d in dists {
            // Angle range keeps both sin and cos >= 0.3, so every coordinate
            // residual stays far from the |.| kink of the likelihood.
            let angle: f64 = rng.gen_range(0.3..1.2);
            for (s, p) in gt_points.iter().enumerate() {
                // Interpolate the offset along the horizon so the endpoint
                // lands exactly `d` away while every residual stays > 1e-3.
                let frac = (s as f64 + 1.0) / t_hat as f64;
                loc_vals.push(p.x + (0.3 + d * frac) * angle.cos());
                loc_vals.push(p.y + (0.3 + d * frac) * angle.sin());
            }
        }
        let loc = (Shape::new(k, 2 * t_hat), loc_vals);
        let scale = rand_mat(&mut rng, k, 2 * t_hat, 0.4, 2.0);
        let mut conf = rand_mat(&mut rng, k, 1, 0.1, 0.9);

        let cfg = AssignConfig {
            strategy: if i % 2 == 0 { Strategy::Emta } else { Strategy::Wta },
            ignored_variant: [IgnoredVariant::None, IgnoredVariant::OtherMatches, IgnoredVariant::EarlyMismatches][i % 3],
            ..AssignConfig::default()
        };
        let weights = LossWeights::default();
        // Same hinge-kink guard as above, against the assignment this layout
        // will produce.
        let expected = assign_from_distances(&dists, cfg.delta, cfg.strategy, cfg.ignored_variant)
            .expect("non-empty");
        let sel = conf.1[expected.selected];
        for &n in &expected.negatives() {
            if (weights.margin - (sel - conf.1[n])).abs() < 1e-3 {
                conf.1[n] -= 0.05;
            }
        }

        let gt_ref = gt.clone();
        worst = worst.max(fd_check("single_agent_layer_loss", &[loc, scale, conf], |t, v| {
            let embeddings = t.constant(Shape::new(k, 2), vec![0.0; k * 2])?;
            let layer = LayerVars {
                embeddings,
                locations: v[0],
                scales: v[1],
                confidences: v[2],
                permutation: (0..k).collect(),
            };
            Ok(single_agent_layer_loss(t, &layer, &gt_ref, &cfg, &weights).expect("loss builds").total)
        }));
    }
    ops += 1;

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "finite-difference battery took {secs:.1}s, budget is 60s");
    format!("{ops} ops x {FD_INSTANCES} instances, worst rel err {worst:.2e}")
}

/// Assignment with randomized labels for loss checks: distances drawn so
/// that matches, misses, and every ignored variant all occur.
fn random_assignment(rng: &mut ChaCha8Rng, k: usize, salt: usize) -> Assignment {
    let distances: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
    let strategy = if salt % 2 == 0 { Strategy::Emta } else { Strategy::Wta };
    let variant = [IgnoredVariant::None, IgnoredVariant::OtherMatches, IgnoredVariant::EarlyMismatches][salt % 3];
    assign_from_distances(&distances, 2.0, strategy, variant).expect("k >= 1")
}

// ---- 2: assignment vs literal references -----------------------------------------

/// The selection rule, written out from its definition: modes within the
/// threshold form the matched set; the earliest of them is supervised, or
/// the closest mode overall when nothing matches (ties to the lowest index,
/// never a NaN when a finite distance exists).
fn ref_assign(distances: &[f64], delta: f64, strategy: Strategy, variant: IgnoredVariant) -> Assignment {
    let matched_set: Vec<usize> = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= delta)
        .map(|(i, _)| i)
        .collect();
    let fallback_used = matched_set.is_empty();

    let closest = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_nan())
        .fold(None::<(usize, f64)>, |acc, (i, &d)| match acc {
            Some((_, best)) if best <= d => acc,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
        .unwrap_or(0);

    let selected = match (strategy, fallback_used) {
        (Strategy::Emta, false) => matched_set[0],
        _ => closest,
    };

    let mut labels = vec![ModeLabel::Negative; distances.len()];
    labels[selected] = ModeLabel::Positive;
    match variant {
        IgnoredVariant::None => {}
        IgnoredVariant::OtherMatches => {
            for &m in &matched_set {
                if m != selected {
                    labels[m] = ModeLabel::Ignored;
                }
            }
        }
        IgnoredVariant::EarlyMismatches => {
            for label in labels.iter_mut().take(selected) {
                *label = ModeLabel::Ignored;
            }
        }
    }
    Assignment { selected, labels, matched_set, fallback_used }
}

fn ref_trajectory_distance(pred: &Trajectory, gt: &Trajectory, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Endpoint => pred.endpoint().distance(&gt.endpoint()),
        DistanceMode::Average => {
            pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(g)).sum::<f64>()
                / pred.len() as f64
        }
    }
}

fn rand_traj(rng: &mut ChaCha8Rng, len: usize, spread: f64) -> Trajectory {
    Trajectory((0..len).map(|_| Point::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread))).collect())
}

fn rand_cfg(rng: &mut ChaCha8Rng, case: usize) -> AssignConfig {
    AssignConfig {
        strategy: if case % 2 == 0 { Strategy::Emta } else { Strategy::Wta },
        ignored_variant: [IgnoredVariant::None, IgnoredVariant::OtherMatches, IgnoredVariant::EarlyMismatches][case % 3],
        distance_mode: if (case / 3) % 2 == 0 { DistanceMode::Endpoint } else { DistanceMode::Average },
        delta: rng.gen_range(0.5..3.0),
        joint_delta: rng.gen_range(0.5..3.0),
        joint_aggregate: if (case / 6) % 2 == 0 { JointAggregate::MaxOverAgents } else { JointAggregate::MeanOverAgents },
    }
}

fn c02_assignment_references() -> String {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let (mut fallback_on, mut fallback_off) = (0usize, 0usize);

    // Single-agent assignment over random prediction sets. Mixing the
    // spread between "everything near the truth" and "everything far"
    // exercises both the matched path and the closest-mode fallback.
    let marginal_cases = 5000usize;
    for case in 0..marginal_cases {
        let k = rng.gen_range(1..=8usize);
        let t = rng.gen_range(2..=5usize);
        let cfg = rand_cfg(&mut rng, case);
        let gt = rand_traj(&mut rng, t, 5.0);
        let spread = if case % 4 == 0 { 8.0 } else { 2.0 };
        let modes: Vec<ModePrediction> = (0..k)
            .map(|_| {
                let mut traj = gt.clone();
                for p in &mut traj.0 {
                    p.x += rng.gen_range(-spread..spread);
                    p.y += rng.gen_range(-spread..spread);
                }
                ModePrediction {
                    trajectory: traj,
                    scales: vec![Point::new(1.0, 1.0); t],
                    confidence: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let preds = PredictionSet { modes };

        let got = emta_assign(&preds, &gt, &cfg).expect("non-empty modes");
        let distances: Vec<f64> = preds
            .modes
            .iter()
            .map(|m| ref_trajectory_distance(&m.trajectory, &gt, cfg.distance_mode))
            .collect();
        let want = ref_assign(&distances, cfg.delta, cfg.strategy, cfg.ignored_variant);
        assert_eq!(got, want, "single-agent case {case} diverged (cfg {cfg:?})");
        if got.fallback_used { fallback_on += 1 } else { fallback_off += 1 };
    }

    // Joint assignment: per-agent distances aggregated scene-wide, ignored
    // variant always inert.
    let joint_cases = 5000usize;
    for case in 0..joint_cases {
        let k = rng.gen_range(1..=8usize);
        let a = rng.gen_range(1..=4usize);
        let t = rng.gen_range(2..=4usize);
        let cfg = rand_cfg(&mut rng, case);
        let target_ids: Vec<u64> = (1..=a as u64).collect();
        let gt: BTreeMap<u64, Trajectory> =
            target_ids.iter().map(|&id| (id, rand_traj(&mut rng, t, 5.0))).collect();
        let spread = if case % 4 == 0 { 8.0 } else { 2.0 };
        let modes: Vec<JointModePrediction> = (0..k)
            .map(|_| JointModePrediction {
                trajectories: target_ids
                    .iter()
                    .map(|id| {
                        let mut traj = gt[id].clone();
                        for p in &mut traj.0 {
                            p.x += rng.gen_range(-spread..spread);
                            p.y += rng.gen_range(-spread..spread);
                        }
                        traj
                    })
                    .collect(),
                scales: vec![vec![Point::new(1.0, 1.0); t]; a],
                scene_score: rng.gen_range(0.0..1.0),
            })
            .collect();
        let preds = JointPredictionSet { target_ids: target_ids.clone(), modes };

        let got = ma_emta_assign(&preds, &gt, &cfg).expect("non-empty modes");
        let distances: Vec<f64> = preds
            .modes
            .iter()
            .map(|m| {
                let per_agent: Vec<f64> = m
                    .trajectories
                    .iter()
                    .zip(&target_ids)
                    .map(|(traj, id)| ref_trajectory_distance(traj, &gt[id], cfg.distance_mode))
                    .collect();
                match cfg.joint_aggregate {
                    JointAggregate::MaxOverAgents => per_agent.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    JointAggregate::MeanOverAgents => per_agent.iter().sum::<f64>() / per_agent.len() as f64,
                }
            })
            .collect();
        // Joint labels never use the ignored variants, whatever the config says.
        let want = ref_assign(&distances, cfg.joint_delta, cfg.strategy, IgnoredVariant::None);
        assert_eq!(got, want, "joint case {case} diverged (cfg {cfg:?})");
        if got.fallback_used { fallback_on += 1 } else { fallback_off += 1 };
    }

    // Raw distance vectors push the edges trajectories can't reach: exact
    // ties (duplicated entries) and NaN distances.
    let raw_cases = 2000usize;
    for case in 0..raw_cases {
        let k = rng.gen_range(1..=8usize);
        let mut distances: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..6.0)).collect();
        if k > 1 && case % 3 == 0 {
            let (src, dst) = (rng.gen_range(0..k), rng.gen_range(0..k));
            distances[dst] = distances[src];
        }
        if case % 5 == 0 {
            distances[rng.gen_range(0..k)] = f64::NAN;
        }
        let cfg = rand_cfg(&mut rng, case);
        let got = assign_from_distances(&distances, cfg.delta, cfg.strategy, cfg.ignored_variant)
            .expect("k >= 1");
        let want = ref_assign(&distances, cfg.delta, cfg.strategy, cfg.ignored_variant);
        assert_eq!(got, want, "raw case {case} diverged on {distances:?} (cfg {cfg:?})");
        if got.fallback_used { fallback_on += 1 } else { fallback_off += 1 };
    }

    assert!(fallback_on > 500 && fallback_off > 500, "case mix is lopsided: {fallback_on} fallback vs {fallback_off} matched");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "assignment battery took {secs:.1}s, budget is 60s");
    format!(
        "{} cases ({} fallback / {} matched), exact agreement",
        marginal_cases + joint_cases + raw_cases,
        fallback_on,
        fallback_off
    )
}

// ---- 3: decode causality ----------------------------------------------------------

const CAUSALITY_SEEDS: u64 = 50;

fn c03_decode_causality() -> String {
    let started = Instant::now();
    let spec = fork3_spec();

    // (a) One-pass decoder: decoding only k modes must reproduce the first k
    // modes of the full decode bit for bit. Rearrangement is off — it
    // deliberately trades this property away between layers.
    for seed in 0..CAUSALITY_SEEDS {
        let cfg = ModelConfig { variant: DecoderVariant::Parallel, ..ModelConfig::desk() };
        let model = ModeSeqModel::init(&cfg, seed).expect("valid config");
        let scene = generate_fork_scene(&spec.with_seed(mix_seed(0x3A, seed)), "prefix")
            .expect("scene generates");
        let mut opts = model.decode_options();
        opts.rearrange = false;

        opts.modes = 6;
        let full = model.predict(&scene, 1, &opts).expect("decode");
        for k in 1..=6usize {
            opts.modes = k;
            let part = model.predict(&scene, 1, &opts).expect("decode");
            assert_eq!(
                part.modes[..],
                full.modes[..k],
                "parallel prefix K={k} differs from the K=6 decode (seed {seed})"
            );
        }
    }

    // (b) Step-by-step decoder: mode j must be exactly insensitive to query
    // k for j < k, and the perturbation must visibly reach mode k itself
    // (otherwise the check proves nothing).
    let dim = ModelConfig::desk().dim;
    for seed in 0..CAUSALITY_SEEDS {
        let cfg = ModelConfig::desk();
        let mut model = ModeSeqModel::init(&cfg, 10_000 + seed).expect("valid config");
        let scene = generate_fork_scene(&spec.with_seed(mix_seed(0x3B, seed)), "sensitivity")
            .expect("scene generates");
        let mut opts = model.decode_options();
        opts.rearrange = false;
        let baseline = model.predict(&scene, 1, &opts).expect("decode");

        for k in 1..6usize {
            let col = (seed as usize + k) % dim;
            let idx = k * dim + col;
            let original = model.store.get("dec.queries").expect("bank exists").values[idx];
            model.store.get_mut("dec.queries").expect("bank exists").values[idx] = original + 0.25;
            let perturbed = model.predict(&scene, 1, &opts).expect("decode");
            model.store.get_mut("dec.queries").expect("bank exists").values[idx] = original;

            assert_eq!(
                perturbed.modes[..k],
                baseline.modes[..k],
                "perturbing query {k} leaked into an earlier mode (seed {seed})"
            );
            assert_ne!(
                perturbed.modes[k], baseline.modes[k],
                "perturbing query {k} did not reach mode {k} — the test is vacuous (seed {seed})"
            );
        }
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "causality battery took {secs:.1}s, budget is 60s");
    format!("{CAUSALITY_SEEDS} seeds: one-pass prefixes bitwise stable, step-wise decode leak-free")
}

// ---- 4: decoding more modes than were trained ------------------------------------

fn c04_mode_extrapolation() -> String {
    let (train_scenes, val_scenes) = &*DATA;

    // Single refinement layer first: nothing reorders modes, so a wider
    // decode appends hypotheses after the trained six and the best final
    // displacement can only improve. Checked exactly, scene by scene.
    let cfg = ModelConfig { layers: 1, ..ModelConfig::desk() };
    let mut model = ModeSeqModel::init(&cfg, 7).expect("valid config");
    let tc = TrainConfig { seed: 7, ..TrainConfig::desk() };
    train(&mut model, train_scenes, &tc, None, None, None).expect("training runs");

    let mut opts = model.decode_options();
    let mut improved = 0usize;
    for scene in val_scenes {
        let gt = &scene.future[&1];
        opts.modes = 6;
        let base = min_fde(&model.predict(scene, 1, &opts).expect("decode"), gt).expect("metric");
        for k_prime in 7..=24usize {
            opts.modes = k_prime;
            let wide = min_fde(&model.predict(scene, 1, &opts).expect("decode"), gt).expect("metric");
            assert!(
                wide <= base,
                "scene {}: minFDE rose from {base} to {wide} at K'={k_prime}",
                scene.scene_id
            );
            if wide < base {
                improved += 1;
            }
        }
    }

    // Two-layer model with rearrangement, as trained: later layers reorder
    // on confidence, so prefix identity no longer holds and the claim drops
    // to a trend — the validation-mean best final displacement should fall
    // (or hold) as the decode widens, in at least 90% of adjacent steps.
    let model2 = &FLEET.emta_seed0;
    let trend_scenes = &val_scenes[..100];
    let mut opts2 = model2.decode_options();
    let mut means = Vec::new();
    for k_prime in 6..=24usize {
        opts2.modes = k_prime;
        means.push(mean(trend_scenes.iter().map(|scene| {
            min_fde(&model2.predict(scene, 1, &opts2).expect("decode"), &scene.future[&1])
                .expect("metric")
        })));
    }
    let pairs = means.len() - 1;
    let rises = (1..means.len()).filter(|&i| means[i] > means[i - 1]).count();
    assert!(
        (pairs - rises) as f64 / pairs as f64 >= 0.9,
        "two-layer widening trend broke: mean minFDE rose in {rises}/{pairs} steps ({means:?})"
    );

    format!(
        "single-layer exact on {} scenes x K'=7..24 ({improved} strict improvements); \
         two-layer mean minFDE {:.3} -> {:.3} with {rises}/{pairs} rises",
        val_scenes.len(),
        means[0],
        means[means.len() - 1]
    )
}

// ---- 5-7: trained ablation trends -------------------------------------------------

fn c05_emta_vs_wta() -> String {
    let fleet = &*FLEET;
    let cov = |r: &MetricReport| r.aggregate.coverage.expect("fork scenes carry oracle branches");
    let emta_cov = mean(fleet.emta.iter().map(cov));
    let wta_cov = mean(fleet.wta.iter().map(cov));
    let emta_ap = mean(fleet.emta.iter().map(|r| r.aggregate.m_ap));
    let wta_ap = mean(fleet.wta.iter().map(|r| r.aggregate.m_ap));
    let emta_ade = mean(fleet.emta.iter().map(|r| r.aggregate.min_ade));
    let wta_ade = mean(fleet.wta.iter().map(|r| r.aggregate.min_ade));

    assert!(
        emta_cov >= wta_cov,
        "coverage regressed: earliest-match {emta_cov:.4} < closest-mode {wta_cov:.4}"
    );
    assert!(emta_ap >= wta_ap, "AP regressed: earliest-match {emta_ap:.4} < closest-mode {wta_ap:.4}");
    let degradation = (emta_ade - wta_ade) / wta_ade;
    assert!(
        degradation < 0.10,
        "minADE degraded {:.1}% (earliest-match {emta_ade:.4} vs closest-mode {wta_ade:.4})",
        degradation * 100.0
    );
    let budget = fleet.emta_secs + fleet.wta_secs;
    assert!(budget < 3600.0, "the two compared arms took {budget:.0}s to train+eval, budget is 1h");

    format!(
        "coverage {emta_cov:.3} vs {wta_cov:.3}, AP {emta_ap:.3} vs {wta_ap:.3}, \
         minADE {emta_ade:.3} vs {wta_ade:.3} ({:+.1}%), {budget:.0}s",
        degradation * 100.0
    )
}

fn c06_rearrangement_benefit() -> String {
    let fleet = &*FLEET;
    let on = mean(fleet.emta.iter().map(|r| r.aggregate.m_ap));
    let off = mean(fleet.norearr.iter().map(|r| r.aggregate.m_ap));
    assert!(on >= off, "mean AP with rearrangement {on:.4} fell below {off:.4} without");
    format!("mean AP {on:.3} with rearrangement vs {off:.3} without, 5 seeds")
}

fn c07_ranking_loss_effect() -> String {
    let fleet = &*FLEET;
    let inv = |r: &MetricReport| r.aggregate.inversion_rate.expect("matched scenes exist after training");
    let with_rank = mean(fleet.emta.iter().map(inv));
    let without = mean(fleet.norank.iter().map(inv));
    assert!(
        with_rank < without,
        "ranking loss did not reduce inversions: {with_rank:.4} vs {without:.4} without it"
    );
    format!("mean inversion rate {with_rank:.3} with the hinge vs {without:.3} without, 5 seeds")
}

// ---- 8: metrics vs literal references ---------------------------------------------

fn ref_ade(pred: &Trajectory, gt: &Trajectory) -> f64 {
    pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(g)).sum::<f64>() / pred.len() as f64
}

/// The ranked sweep, re-derived from its definition: walk predictions in
/// descending confidence (scene rank, then mode index on ties), count the
/// first match per scene as a hit and everything else as a false alarm
/// (duplicates skipped entirely in soft mode), then integrate the
/// right-to-left precision envelope over recall against the scene count.
fn ref_average_precision(mut pool: Vec<PooledPrediction>, scene_count: usize, soft: bool) -> f64 {
    pool.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("no NaN confidences")
            .then(a.scene.cmp(&b.scene))
            .then(a.mode.cmp(&b.mode))
    });
    let mut seen = vec![false; scene_count];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points: Vec<(f64, f64)> = Vec::new();
    for p in &pool {
        if p.matched && !seen[p.scene] {
            seen[p.scene] = true;
            tp += 1;
        } else if p.matched && soft {
            continue;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / scene_count as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut last = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > last {
            area += (recall - last) * envelope[i];
            last = recall;
        }
    }
    area
}

fn c08_metric_references() -> String {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let mut instances = 0usize;

    // Best-of-K displacement metrics on random prediction sets.
    for case in 0..400usize {
        let k = rng.gen_range(1..=6usize);
        let t = rng.gen_range(2..=5usize);
        let gt = rand_traj(&mut rng, t, 8.0);
        let spread = if case % 3 == 0 { 1.5 } else { 6.0 };
        let preds = PredictionSet {
            modes: (0..k)
                .map(|_| {
                    let mut traj = gt.clone();
                    for p in &mut traj.0 {
                        p.x += rng.gen_range(-spread..spread);
                        p.y += rng.gen_range(-spread..spread);
                    }
                    ModePrediction { trajectory: traj, scales: vec![Point::new(1.0, 1.0); t], confidence: rng.gen_range(0.0..1.0) }
                })
                .collect(),
        };

        let want_ade = preds.modes.iter().map(|m| ref_ade(&m.trajectory, &gt)).fold(f64::INFINITY, f64::min);
        let want_fde = preds
            .modes
            .iter()
            .map(|m| m.trajectory.endpoint().distance(&gt.endpoint()))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_ade(&preds, &gt).expect("metric"), want_ade, "minADE case {case}");
        assert_eq!(min_fde(&preds, &gt).expect("metric"), want_fde, "minFDE case {case}");
        assert_eq!(miss(&preds, &gt, MATCH_THRESHOLD).expect("metric"), want_fde > MATCH_THRESHOLD, "miss case {case}");
        instances += 1;
    }

    // Ranked sweep on random pools, hard and soft.
    for case in 0..300usize {
        let scenes = rng.gen_range(1..=6usize);
        let mut pool = Vec::new();
        for scene in 0..scenes {
            for mode in 0..rng.gen_range(1..=4usize) {
                pool.push(PooledPrediction {
                    confidence: (rng.gen_range(0..=10) as f64) / 10.0, // coarse grid forces ties
                    matched: rng.gen_bool(0.5),
                    scene,
                    mode,
                });
            }
        }
        for soft in [false, true] {
            let got = average_precision(pool.clone(), scenes, soft).expect("non-empty");
            let want = ref_average_precision(pool.clone(), scenes, soft);
            assert_eq!(got, want, "ranked sweep case {case} soft={soft}");
        }
        instances += 1;
    }

    // Hand-swept pool: hit, miss, miss, hit over two scenes = 0.75 exactly.
    let hand = vec![
        PooledPrediction { confidence: 0.9, matched: true, scene: 0, mode: 0 },
        PooledPrediction { confidence: 0.8, matched: false, scene: 1, mode: 0 },
        PooledPrediction { confidence: 0.7, matched: false, scene: 0, mode: 1 },
        PooledPrediction { confidence: 0.6, matched: true, scene: 1, mode: 1 },
    ];
    assert_eq!(average_precision(hand, 2, false).expect("non-empty"), 0.75, "hand-swept pool");
    instances += 1;

    // Joint metrics: agent-mean then best-of-K, plus both miss rules.
    for case in 0..300usize {
        let k = rng.gen_range(1..=4usize);
        let a = rng.gen_range(1..=3usize);
        let t = rng.gen_range(2..=4usize);
        let target_ids: Vec<u64> = (1..=a as u64).collect();
        let gt: BTreeMap<u64, Trajectory> =
            target_ids.iter().map(|&id| (id, rand_traj(&mut rng, t, 6.0))).collect();
        let spread = if case % 3 == 0 { 1.5 } else { 5.0 };
        let preds = JointPredictionSet {
            target_ids: target_ids.clone(),
            modes: (0..k)
                .map(|_| JointModePrediction {
                    trajectories: target_ids
                        .iter()
                        .map(|id| {
                            let mut traj = gt[id].clone();
                            for p in &mut traj.0 {
                                p.x += rng.gen_range(-spread..spread);
                                p.y += rng.gen_range(-spread..spread);
                            }
                            traj
                        })
                        .collect(),
                    scales: vec![vec![Point::new(1.0, 1.0); t]; a],
                    scene_score: rng.gen_range(0.0..1.0),
                })
                .collect(),
        };

        let mode_ade = |m: &JointModePrediction| {
            m.trajectories.iter().zip(&target_ids).map(|(p, id)| ref_ade(p, &gt[id])).sum::<f64>() / a as f64
        };
        let mode_fde = |m: &JointModePrediction| {
            m.trajectories
                .iter()
                .zip(&target_ids)
                .map(|(p, id)| p.endpoint().distance(&gt[id].endpoint()))
                .sum::<f64>()
                / a as f64
        };
        let want_ade = preds.modes.iter().map(mode_ade).fold(f64::INFINITY, f64::min);
        let want_fde = preds.modes.iter().map(mode_fde).fold(f64::INFINITY, f64::min);
        assert_eq!(joint_min_ade(&preds, &gt).expect("metric"), want_ade, "joint minADE case {case}");
        assert_eq!(joint_min_fde(&preds, &gt).expect("metric"), want_fde, "joint minFDE case {case}");

        for rule in [JointMissRule::AnyAgentMisses, JointMissRule::AllAgentsMiss] {
            let mode_missed = |m: &JointModePrediction| {
                let off = |(p, id): (&Trajectory, &u64)| {
                    p.endpoint().distance(&gt[id].endpoint()) > MATCH_THRESHOLD
                };
                match rule {
                    JointMissRule::AnyAgentMisses => m.trajectories.iter().zip(&target_ids).any(off),
                    JointMissRule::AllAgentsMiss => m.trajectories.iter().zip(&target_ids).all(off),
                }
            };
            let want_miss = preds.modes.iter().all(mode_missed);
            assert_eq!(
                joint_miss(&preds, &gt, MATCH_THRESHOLD, rule).expect("metric"),
                want_miss,
                "joint miss case {case} rule {rule:?}"
            );
        }
        instances += 1;
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "metric battery took {secs:.1}s, budget is 60s");
    format!("{instances} instances, exact agreement incl. the 0.75 hand sweep")
}

// ---- 9: one-pass vs step-by-step latency ------------------------------------------

fn c09_parallel_latency() -> String {
    let dir = tempfile::tempdir().expect("tempdir");
    let ck = dir.path().join("checkpoint.json");
    let model = ModeSeqModel::init(&ModelConfig::desk(), 0).expect("valid config");
    Checkpoint::from_model(&model, None).save(&ck).expect("checkpoint saves");

    let out = Command::new(env!("CARGO_BIN_EXE_modeseq"))
        .args([
            "bench",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--k-list",
            "2,4,8,16,32",
            "--scenes",
            "24",
            "--out-root",
            dir.path().to_str().unwrap(),
            "--run-name",
            "acceptance-bench",
        ])
        .output()
        .expect("bench runs");
    assert!(
        out.status.success(),
        "bench exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );

    let csv = std::fs::read_to_string(dir.path().join("acceptance-bench/bench.csv"))
        .expect("bench.csv written");
    let mut median: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        median.insert(
            (cells[0].to_string(), cells[1].parse().expect("k")),
            cells[3].parse().expect("median_ms"),
        );
    }
    let cell = |variant: &str, k: usize| median[&(variant.to_string(), k)];

    // The one-pass decoder must win outright once the mode count is large,
    // and its absolute saving must keep widening as K doubles.
    for k in [8usize, 16, 32] {
        assert!(
            cell("parallel", k) < cell("recurrent", k),
            "one-pass decode is not faster at K={k}: {} vs {} ms",
            cell("parallel", k),
            cell("recurrent", k)
        );
    }
    let advantage: Vec<f64> =
        [8usize, 16, 32].iter().map(|&k| cell("recurrent", k) - cell("parallel", k)).collect();
    assert!(
        advantage[0] < advantage[1] && advantage[1] < advantage[2],
        "latency advantage is not growing with K: {advantage:?} ms at K=8/16/32"
    );

    format!(
        "median saving {:.1} / {:.1} / {:.1} ms at K=8/16/32 (ratio x{:.1} at 32)",
        advantage[0],
        advantage[1],
        advantage[2],
        cell("recurrent", 32) / cell("parallel", 32)
    )
}

// ---- 10: overfit smoke test --------------------------------------------------------

fn c10_overfit_smoke() -> String {
    let started = Instant::now();
    let spec = fork3_spec();
    let scenes: Vec<Scene> = (0..8u64)
        .map(|i| {
            generate_fork_scene(&spec.with_seed(mix_seed(77, i)), &format!("overfit-{i}"))
                .expect("scene generates")
        })
        .collect();

    // 8 scenes, batches of 4: two steps per epoch, 150 epochs = 300 steps.
    let cfg = ModelConfig { variant: DecoderVariant::Parallel, ..ModelConfig::desk() };
    let tc = TrainConfig { epochs: 150, batch_size: 4, seed: 5, ..TrainConfig::desk() };

    let run = || {
        let mut model = ModeSeqModel::init(&cfg, 5).expect("valid config");
        let (outcome, _) = train(&mut model, &scenes, &tc, None, None, None).expect("training runs");
        outcome
    };
    let first_run = run();
    assert_eq!(first_run.steps, 300, "schedule should produce exactly 300 steps");

    let reg_of = |r: &modeseq::train::StepRecord| mean(r.layers.iter().map(|l| l.regression));
    let first = reg_of(&first_run.records[0]);
    let lowest = first_run.records.iter().map(reg_of).fold(f64::INFINITY, f64::min);
    let last = reg_of(first_run.records.last().expect("records exist"));
    assert!(
        lowest <= 0.5 * first,
        "regression loss only reached {lowest:.3} from {first:.3}; a 50% drop was required"
    );

    // Bit-identical repeat: same seeds, same data, same trace.
    let second_run = run();
    for (a, b) in first_run.records.iter().zip(&second_run.records) {
        assert!(
            a.step == b.step && a.total == b.total && a.grad_norm == b.grad_norm,
            "repeat diverged at step {}: total {} vs {}",
            a.step,
            a.total,
            b.total
        );
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "overfit smoke took {secs:.1}s, budget is 120s");
    format!(
        "regression {first:.2} -> {last:.2} (low {lowest:.2}) over 300 steps, repeat bit-identical, {secs:.0}s"
    )
}

// ---- 11: the joint head respects the forbidden branch pair ------------------------

fn c11_joint_coupling() -> String {
    let spec = interactive_spec();
    let gen = |base: u64, n: usize, tag: &str| -> Vec<Scene> {
        (0..n)
            .map(|i| {
                generate_interactive_scene(
                    &spec.with_seed(mix_seed(base, i as u64)),
                    Coupling::YieldOrProceed,
                    &format!("{tag}-{i:05}"),
                )
                .expect("interactive scene generates")
            })
            .collect()
    };
    let train_scenes = gen(55, 300, "itrain");
    let val_scenes = gen(56, 100, "ival");

    let mut forbidden = 0usize;
    let mut total = 0usize;
    for seed in 0..3u64 {
        let cfg = ModelConfig { joint: true, ..ModelConfig::desk() };
        let mut model = ModeSeqModel::init(&cfg, 2000 + seed).expect("valid config");
        let tc = TrainConfig { seed, ..TrainConfig::desk() };
        train(&mut model, &train_scenes, &tc, None, None, None).expect("joint training runs");

        let opts = model.decode_options();
        for scene in &val_scenes {
            let preds = model.predict_joint(scene, &opts).expect("joint decode");
            let top = preds
                .modes
                .iter()
                .max_by(|a, b| a.scene_score.partial_cmp(&b.scene_score).expect("finite scores"))
                .expect("modes exist");
            let oracle = scene.oracle_branches.as_ref().expect("interactive scenes carry branches");
            // Branch banks per agent: [proceed, yield] each; both agents
            // proceeding is the pair the data never contains.
            let b1 = nearest_branch_index(&top.trajectories[0], &oracle[0..2]);
            let b2 = nearest_branch_index(&top.trajectories[1], &oracle[2..4]);
            if b1 == 0 && b2 == 0 {
                forbidden += 1;
            }
            total += 1;
        }
    }

    let rate = forbidden as f64 / total as f64;
    assert!(
        rate < 0.05,
        "top-ranked joint mode picked the forbidden pair in {forbidden}/{total} scenes ({:.1}%)",
        rate * 100.0
    );
    format!("forbidden pair on top in {forbidden}/{total} validation scenes ({:.1}%), 3 seeds", rate * 100.0)
}
