//! `modeseq train`: resolve config (preset < file < flags), write the run
//! manifest, train, and save checkpoint + CSV trace.

use crate::config::RunConfig;
use crate::error::CliError;
use crate::runs::{create_run_dir, output_root, unix_now, RunManifest};
use crate::TrainArgs;
use modeseq::model::{Checkpoint, ModeSeqModel};
use modeseq::synth::{dataset_hash, load_dataset};
use modeseq::train::train;
use std::fs::File;
use std::io::BufWriter;

/// Apply CLI flags on top of the preset/file config. Flags always win.
fn apply_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(v) = args.variant {
        cfg.model.variant = v.into();
    }
    if let Some(s) = args.strategy {
        cfg.train.assign.strategy = s.into();
    }
    if let Some(iv) = args.ignored {
        cfg.train.assign.ignored_variant = iv.into();
    }
    if let Some(d) = args.distance {
        cfg.train.assign.distance_mode = d.into();
    }
    if let Some(r) = args.rearrange {
        cfg.model.rearrange = r.into();
    }
    if let Some(c) = args.causal {
        cfg.model.causal = c.into();
    }
    if args.joint {
        cfg.model.joint = true;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = args.modes {
        cfg.model.modes = k;
    }
    if let Some(l) = args.layers {
        cfg.model.layers = l;
    }
    if let Some(v) = args.lambda_cls {
        cfg.train.weights.lambda_cls = v;
    }
    if let Some(v) = args.lambda_rank {
        cfg.train.weights.lambda_rank = v;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.train.checkpoint_every = Some(n);
    }
}

pub fn run(args: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let mut cfg = RunConfig::preset(&args.preset)?;
    if let Some(path) = &args.config {
        cfg.merge_file(path)?;
    }
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;

    if !args.data.exists() {
        return Err(CliError::Data(format!(
            "dataset manifest {} does not exist (run `modeseq generate` first)",
            args.data.display()
        )));
    }
    let scenes = load_dataset(&args.data)?;
    let hash = dataset_hash(&args.data)?;

    let root = output_root(args.out_root.as_deref());
    let run_dir = create_run_dir(&root, "train", cfg.train.seed, args.run_name.as_deref())?;

    let mut manifest = RunManifest::new("train", argv.to_vec(), cfg.train.seed, cfg.clone());
    manifest.dataset_manifest = Some(args.data.clone());
    manifest.dataset_hash = Some(hash);
    manifest.outputs.insert("checkpoint".into(), "checkpoint.json".into());
    manifest.outputs.insert("train_log".into(), "train_log.csv".into());
    manifest.write(&run_dir)?;

    let mut model = ModeSeqModel::init(&cfg.model, cfg.train.seed)?;
    let log_path = run_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);

    let ckpt_dir = run_dir.clone();
    let mut hook = |step: u64, ckpt: &Checkpoint| -> std::io::Result<()> {
        ckpt.save(&ckpt_dir.join(format!("checkpoint_step{step}.json")))
            .map_err(|e| std::io::Error::other(e.to_string()))
    };

    let (outcome, opt_state) = train(
        &mut model,
        &scenes,
        &cfg.train,
        None,
        Some(&mut log),
        Some(&mut hook),
    )?;
    drop(log);

    let ckpt_path = run_dir.join("checkpoint.json");
    Checkpoint::from_model(&model, Some(opt_state)).save(&ckpt_path)?;

    manifest.finished_unix = Some(unix_now());
    manifest.write(&run_dir)?;

    println!("run dir: {}", run_dir.display());
    println!("checkpoint: {}", ckpt_path.display());
    println!(
        "steps: {}  final loss: {:.6}  (trace: {})",
        outcome.steps,
        outcome.final_loss,
        log_path.display()
    );
    Ok(())
}
