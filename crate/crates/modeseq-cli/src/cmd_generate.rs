//! `modeseq generate`: synthesize a dataset and print its manifest path.

use crate::error::CliError;
use crate::runs::output_root;
use crate::{CouplingArg, GenerateArgs};
use modeseq::synth::{
    dataset_hash, fork_spec_with_branches, interactive_spec, Coupling, DatasetKind, ForkSpec,
};

/// Map a preset name to (spec, kind). `fork3` is the canonical three-way
/// junction; `fork2`..`fork8` vary the branch count; `interactive` is the
/// two-target crossing.
fn resolve_preset(
    name: &str,
    coupling: CouplingArg,
) -> Result<(ForkSpec, DatasetKind), CliError> {
    if name == "interactive" {
        let coupling = match coupling {
            CouplingArg::YieldOrProceed => Coupling::YieldOrProceed,
            CouplingArg::Independent => Coupling::Independent,
        };
        return Ok((interactive_spec(), DatasetKind::Interactive(coupling)));
    }
    if let Some(b) = name.strip_prefix("fork") {
        if let Ok(b) = b.parse::<usize>() {
            if (1..=8).contains(&b) {
                return Ok((fork_spec_with_branches(b), DatasetKind::Fork));
            }
        }
    }
    Err(CliError::Config(format!(
        "unknown preset '{name}'; expected fork1..fork8 or interactive \
         (see `modeseq generate --help`)"
    )))
}

pub fn run(args: GenerateArgs, _argv: &[String]) -> Result<(), CliError> {
    let (spec, kind) = resolve_preset(&args.preset, args.coupling)?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => output_root(args.out_root.as_deref())
            .join("datasets")
            .join(format!("{}-n{}-seed{}", args.preset, args.n, args.seed)),
    };
    let manifest = modeseq::synth::generate_dataset(&spec, kind, args.n, args.seed, &out)?;
    let hash = dataset_hash(&manifest)?;
    println!("dataset manifest: {}", manifest.display());
    println!("dataset sha256: {hash}");
    Ok(())
}
