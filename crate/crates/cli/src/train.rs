use std::io::Write;

use frameslide::denoiser::{
    smooth, train_micro, MicroConfig, MicroDenoiser, NoisePredictor, TrainConfig, TrainingClip, TrainingSet,
};
use frameslide::schedule::ScheduleParams;
use rayon::prelude::*;

use crate::corpus::{load_entries, load_latents};
use crate::manifest::{file_manifest, sibling, DenoiserInfo, RunRecord};
use crate::{create_dir, pool, CliError, CliResult, TrainArgs};

/// Trailing window of the smoothed column in the loss CSV.
pub const SMOOTH_WINDOW: usize = 200;

pub(crate) fn run(args: &TrainArgs) -> CliResult<RunRecord> {
    let entries = load_entries(&args.corpus)?;
    if entries.is_empty() {
        return Err(CliError::config(format!("corpus {} is empty", args.corpus.display())));
    }
    let clips = pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                Ok(TrainingClip {
                    frames: load_latents(&args.corpus, e, args.factor)?,
                    label: e.class.unwrap_or(0),
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let shape = clips[0].frames[0].shape();
    if let Some(c) = clips.iter().position(|c| c.label as usize >= args.classes) {
        return Err(CliError::config(format!(
            "clip {} has label {} but --classes is {}",
            entries[c].path, clips[c].label, args.classes
        )));
    }
    let schedule = ScheduleParams {
        steps: args.diffusion_steps,
        beta_start: args.beta_start,
        beta_end: args.beta_end,
    };
    let sched = schedule.build()?;
    let cfg = MicroConfig {
        shape,
        frames: args.clip_frames,
        hidden: args.hidden,
        classes: args.classes,
        ..MicroConfig::default()
    };
    let mut model = MicroDenoiser::new(cfg, args.seed)?;
    let trace = train_micro(
        &mut model,
        &TrainingSet { clips },
        &sched,
        &TrainConfig {
            steps: args.steps,
            batch_size: args.batch,
            lr: args.lr,
            null_prob: args.null_prob,
            seed: args.seed,
        },
    )?;

    if let Some(parent) = args.out.parent() {
        create_dir(parent)?;
    }
    model.save(&args.out)?;
    let loss_path = sibling(&args.out, ".loss.csv");
    let mut csv = String::from("step,loss,smoothed\n");
    for (i, (l, s)) in trace.iter().zip(smooth(&trace, SMOOTH_WINDOW)).enumerate() {
        csv.push_str(&format!("{},{l},{s}\n", i + 1));
    }
    let mut file = std::fs::File::create(&loss_path).map_err(|e| CliError::io(&loss_path, e))?;
    file.write_all(csv.as_bytes()).map_err(|e| CliError::io(&loss_path, e))?;

    Ok(RunRecord {
        seed: Some(args.seed),
        schedule: Some(schedule),
        denoiser: Some(DenoiserInfo {
            id: model.id(),
            param_sha256: None,
        }),
        inputs: vec![args.corpus.clone()],
        outputs: vec![args.out.clone(), loss_path],
        manifest_path: file_manifest(&args.out),
        ..Default::default()
    })
}
