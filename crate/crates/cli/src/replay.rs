use std::collections::BTreeMap;

use crate::manifest::{sha256_file, RunManifest};
use crate::{run_recorded, CliError, CliResult, Command, ReplayArgs};

/// Re-executes the recorded command into `args.out` and compares every output
/// checksum with the recorded one.
pub(crate) fn run(args: &ReplayArgs) -> CliResult<String> {
    let recorded = RunManifest::load(&args.manifest)?;
    if matches!(recorded.command, Command::Replay(_)) {
        return Err(CliError::config("a replay manifest cannot itself be replayed"));
    }
    for input in &recorded.inputs {
        let now = sha256_file(std::path::Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::config(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let mut command = recorded.command.clone();
    command.set_out(args.out.clone());
    let rerun = run_recorded(command, recorded.argv.clone())?;

    let before: BTreeMap<_, _> = recorded.outputs.iter().map(|d| (&d.path, &d.sha256)).collect();
    let after: BTreeMap<_, _> = rerun.outputs.iter().map(|d| (&d.path, &d.sha256)).collect();
    if let Some(path) = before.keys().chain(after.keys()).find(|p| before.get(*p) != after.get(*p)) {
        return Err(CliError::Diverged(format!(
            "replay of {} differs at {path}",
            args.manifest.display()
        )));
    }
    Ok(format!("replay: {} outputs match {}", after.len(), args.manifest.display()))
}
