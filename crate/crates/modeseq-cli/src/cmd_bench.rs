//! `modeseq bench`: wall-clock decode latency per mode count, recurrent vs
//! parallel, on the same checkpoint parameters. Single-threaded by design —
//! the numbers are only comparable within one run on one machine.

use crate::error::CliError;
use crate::runs::{create_run_dir, output_root, unix_now, RunManifest};
use crate::BenchArgs;
use modeseq::decoder::DecoderVariant;
use modeseq::model::{Checkpoint, ModeSeqModel};
use modeseq::scene::Scene;
use modeseq::synth::{fork3_spec, generate_fork_scene, mix_seed};
use std::time::Instant;

fn parse_k_list(text: &str, max_modes: usize) -> Result<Vec<usize>, CliError> {
    let mut ks = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let k: usize = part
            .parse()
            .map_err(|_| CliError::Config(format!("bad K '{part}' in --k-list")))?;
        if k == 0 || k > max_modes {
            return Err(CliError::Config(format!(
                "K={k} outside this checkpoint's decodable range 1..={max_modes}"
            )));
        }
        ks.push(k);
    }
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(CliError::Config("--k-list is empty".to_string()));
    }
    Ok(ks)
}

struct Cell {
    variant: DecoderVariant,
    k: usize,
    scenes: usize,
    median_ms: f64,
    p95_ms: f64,
    mean_ms: f64,
}

fn time_cell(
    model: &ModeSeqModel,
    scenes: &[Scene],
    variant: DecoderVariant,
    k: usize,
) -> Result<Cell, CliError> {
    let mut opts = model.decode_options();
    opts.variant = variant;
    opts.modes = k;

    // Warm caches/allocator outside the measurement.
    for scene in scenes.iter().take(2) {
        model.predict(scene, scene.targets[0], &opts)?;
    }

    let mut ms: Vec<f64> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let t0 = Instant::now();
        model.predict(scene, scene.targets[0], &opts)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let n = ms.len();
    let median_ms = ms[(n - 1) / 2];
    let p95_ms = ms[(((n as f64) * 0.95).ceil() as usize).clamp(1, n) - 1];
    let mean_ms = ms.iter().sum::<f64>() / n as f64;
    Ok(Cell { variant, k, scenes: n, median_ms, p95_ms, mean_ms })
}

pub fn run(args: BenchArgs, argv: &[String]) -> Result<(), CliError> {
    let (model, _) = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let ks = parse_k_list(&args.k_list, model.config.max_modes)?;
    if args.scenes == 0 {
        return Err(CliError::Config("--scenes must be >= 1".to_string()));
    }

    let root = output_root(args.out_root.as_deref());
    let run_dir = create_run_dir(&root, "bench", args.seed, args.run_name.as_deref())?;
    let cfg = crate::config::RunConfig {
        model: model.config.clone(),
        ..Default::default()
    };
    let mut manifest = RunManifest::new("bench", argv.to_vec(), args.seed, cfg);
    // Wall-clock measurements never replay bit-for-bit.
    manifest.bit_reproducible = false;
    manifest.outputs.insert("bench_csv".into(), "bench.csv".into());
    manifest.write(&run_dir)?;

    let spec = fork3_spec();
    let scenes: Vec<Scene> = (0..args.scenes)
        .map(|i| {
            generate_fork_scene(
                &spec.with_seed(mix_seed(args.seed, i as u64)),
                &format!("bench-{i:05}"),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut csv = String::from("variant,k,scenes,median_ms,p95_ms,mean_ms\n");
    let mut cells: Vec<Cell> = Vec::new();
    for &k in &ks {
        for variant in [DecoderVariant::Recurrent, DecoderVariant::Parallel] {
            let cell = time_cell(&model, &scenes, variant, k)?;
            csv.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4}\n",
                cell.variant, cell.k, cell.scenes, cell.median_ms, cell.p95_ms, cell.mean_ms
            ));
            cells.push(cell);
        }
    }
    std::fs::write(run_dir.join("bench.csv"), &csv)?;

    println!("{:>10} {:>4} {:>12} {:>12} {:>12}", "variant", "K", "median_ms", "p95_ms", "mean_ms");
    for c in &cells {
        println!(
            "{:>10} {:>4} {:>12.4} {:>12.4} {:>12.4}",
            c.variant.to_string(),
            c.k,
            c.median_ms,
            c.p95_ms,
            c.mean_ms
        );
    }
    // Headline ratio per K: how much the one-pass decoder saves.
    for &k in &ks {
        let rec = cells
            .iter()
            .find(|c| c.k == k && c.variant == DecoderVariant::Recurrent)
            .expect("cell exists");
        let par = cells
            .iter()
            .find(|c| c.k == k && c.variant == DecoderVariant::Parallel)
            .expect("cell exists");
        println!("K={k}: recurrent/parallel median ratio = {:.2}", rec.median_ms / par.median_ms);
    }

    manifest.finished_unix = Some(unix_now());
    manifest.write(&run_dir)?;
    println!("run dir: {}", run_dir.display());
    Ok(())
}
