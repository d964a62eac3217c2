use std::path::{Path, PathBuf};

use frameslide::codec::{
    decode, frame_file_name, latent_file_name, load_ppm, load_video, save_latent, save_ppm, PixelFrame,
};
use frameslide::controller::{infill_sequence, write_trace, GenerationConfig, RunStats, Sampler};
use frameslide::denoiser::{AnalyticDenoiser, ConditionLabel, GaussianWorldSpec, MicroDenoiser, NoisePredictor};
use frameslide::rng::stream;
use frameslide::schedule::NoiseSchedule;
use frameslide::toyworld::{write_manifest, CorpusEntry, MANIFEST_FILE};
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{load_entries, load_pixels};
use crate::manifest::{dir_manifest, sha256_file, DenoiserInfo, RunRecord};
use crate::{create_dir, pool, CliError, CliResult, GenerateArgs, Task};

pub const TRACE_FILE: &str = "trace.log";

fn parse_label(s: &str) -> CliResult<ConditionLabel> {
    if s.eq_ignore_ascii_case("null") {
        return Ok(ConditionLabel::Null);
    }
    s.parse::<u32>()
        .map(ConditionLabel::Class)
        .map_err(|_| CliError::config(format!("--label '{s}' must be a class id or 'null'")))
}

struct Loaded {
    denoiser: Box<dyn NoisePredictor>,
    info: DenoiserInfo,
    param_file: Option<PathBuf>,
    classes: Option<usize>,
}

fn load_denoiser(args: &GenerateArgs, sched: &NoiseSchedule) -> CliResult<Loaded> {
    if args.denoiser == "analytic" {
        let world: GaussianWorldSpec = args.world.parse()?;
        let den = AnalyticDenoiser::new(world, sched, args.queue + 1)?;
        return Ok(Loaded {
            info: DenoiserInfo {
                id: den.id(),
                param_sha256: None,
            },
            denoiser: Box::new(den),
            param_file: None,
            classes: None,
        });
    }
    let Some(path) = args.denoiser.strip_prefix("micro:") else {
        return Err(CliError::config(format!(
            "--denoiser '{}' must be 'analytic' or 'micro:PATH'",
            args.denoiser
        )));
    };
    let path = PathBuf::from(path);
    let den = MicroDenoiser::load(&path)?;
    Ok(Loaded {
        info: DenoiserInfo {
            id: den.id(),
            param_sha256: Some(sha256_file(&path)?),
        },
        classes: Some(den.config().classes),
        denoiser: Box::new(den),
        param_file: Some(path),
    })
}

/// Frames handed to the queue walk: given ones as `Some`, gaps as `None`.
fn build_sequence(task: Task, given: Vec<PixelFrame>, frames: usize) -> CliResult<Vec<Option<PixelFrame>>> {
    let total = frames + 1;
    match task {
        Task::Ti2v | Task::Predict | Task::T2v => {
            if given.is_empty() {
                return Err(CliError::config("no start frame given"));
            }
            if task == Task::Ti2v && given.len() != 1 {
                return Err(CliError::config("ti2v takes exactly one start image"));
            }
            if given.len() > total {
                return Err(CliError::config(format!(
                    "{} given frames exceed M + 1 = {total}",
                    given.len()
                )));
            }
            let mut seq: Vec<_> = given.into_iter().map(Some).collect();
            seq.resize(total, None);
            Ok(seq)
        }
        Task::Infill => {
            if given.len() < 2 {
                return Err(CliError::config("infilling needs at least two given frames"));
            }
            Ok(infill_sequence(&given))
        }
    }
}

/// Runs one video into `dir`, writing each frame and its latent as soon as it
/// exists.
#[allow(clippy::too_many_arguments)]
fn generate_video(
    den: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cfg: GenerationConfig,
    task: Task,
    given: Vec<PixelFrame>,
    y: ConditionLabel,
    dir: &Path,
    trace: bool,
) -> CliResult<RunStats> {
    create_dir(dir)?;
    let mut sampler = Sampler::new(den, sched, cfg)?;
    if trace {
        sampler = sampler.with_trace();
    }
    let given = if task == Task::T2v {
        // the opening clip comes from a plain sample; the walk extends it
        let clip = sampler.sample_t2v(y, &mut stream(cfg.seed, 1))?;
        let keep = clip.frames().min(cfg.frames + 1);
        (0..keep)
            .map(|k| decode(&clip.latent_frame(k), cfg.factor))
            .collect::<frameslide::Result<Vec<_>>>()?
    } else {
        given
    };
    let seq = build_sequence(task, given, cfg.frames)?;
    sampler.queue_walk(&seq, y, |i, x, z| {
        save_ppm(x, &dir.join(frame_file_name(i)))?;
        save_latent(z, &dir.join(latent_file_name(i)))
    })?;
    if trace {
        let path = dir.join(TRACE_FILE);
        let mut out = Vec::new();
        write_trace(sampler.trace(), &mut out).map_err(|e| CliError::io(&path, e))?;
        std::fs::write(&path, out).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(sampler.stats().clone())
}

fn check_label(y: ConditionLabel, classes: Option<usize>) -> CliResult<()> {
    match (y, classes) {
        (ConditionLabel::Class(c), Some(n)) if c as usize >= n => Err(CliError::config(format!(
            "label {c} is out of range for a denoiser with {n} classes"
        ))),
        _ => Ok(()),
    }
}

pub(crate) fn run(args: &GenerateArgs) -> CliResult<RunRecord> {
    let schedule = args.schedule.params();
    let sched = schedule.build()?;
    let cfg = GenerationConfig {
        queue_len: args.queue,
        frames: args.frames,
        guidance: args.guidance,
        ddim_steps: args.ddim,
        resample: args.resample,
        seed: args.seed,
        use_inversion: !args.no_inversion,
        factor: args.factor,
    };
    cfg.validate(&sched)?;
    let default_label = parse_label(&args.label)?;
    let loaded = load_denoiser(args, &sched)?;
    let den = loaded.denoiser.as_ref();
    let mut inputs: Vec<PathBuf> = loaded.param_file.iter().cloned().collect();

    let stats: Vec<RunStats> = if let Some(corpus) = &args.corpus {
        inputs.push(corpus.clone());
        let entries = load_entries(corpus)?;
        create_dir(&args.out)?;
        let written: Vec<CorpusEntry> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| CorpusEntry {
                seed: stream(args.seed, i as u64).random(),
                ..e.clone()
            })
            .collect();
        let stats = pool()?.install(|| {
            entries
                .par_iter()
                .zip(&written)
                .map(|(e, w)| {
                    let y = e.class.map_or(default_label, ConditionLabel::Class);
                    check_label(y, loaded.classes)?;
                    let given = match args.task {
                        Task::T2v => Vec::new(),
                        _ => {
                            let clip = load_pixels(corpus, e)?.frames;
                            match args.task {
                                Task::Ti2v => clip.into_iter().take(1).collect(),
                                Task::Predict => clip.into_iter().take(args.prefix).collect(),
                                _ => clip.into_iter().take(args.frames + 1).step_by(2).collect(),
                            }
                        }
                    };
                    let cfg = GenerationConfig { seed: w.seed, ..cfg };
                    generate_video(den, &sched, cfg, args.task, given, y, &args.out.join(&w.path), args.trace)
                })
                .collect::<CliResult<Vec<_>>>()
        })?;
        let path = args.out.join(MANIFEST_FILE);
        let mut out = Vec::new();
        write_manifest(&written, &mut out).map_err(|e| CliError::io(&path, e))?;
        std::fs::write(&path, out).map_err(|e| CliError::io(&path, e))?;
        stats
    } else {
        check_label(default_label, loaded.classes)?;
        let given = match (args.task, &args.image, &args.given) {
            (Task::T2v, None, None) => Vec::new(),
            (Task::T2v, _, _) => return Err(CliError::config("t2v takes no --image or --given")),
            (_, Some(image), _) => {
                inputs.push(image.clone());
                vec![load_ppm(image)?]
            }
            (_, None, Some(dir)) => {
                inputs.push(dir.clone());
                load_video(dir)?.frames
            }
            (_, None, None) => return Err(CliError::config("one of --image, --given or --corpus is required")),
        };
        vec![generate_video(den, &sched, cfg, args.task, given, default_label, &args.out, args.trace)?]
    };

    let per_frame: Vec<usize> = stats.iter().flat_map(|s| s.calls_per_frame.iter().copied()).collect();
    Ok(RunRecord {
        seed: Some(args.seed),
        schedule: Some(schedule),
        denoiser: Some(loaded.info),
        inputs,
        outputs: vec![args.out.clone()],
        manifest_path: dir_manifest(&args.out),
        calls_per_frame: (!per_frame.is_empty())
            .then(|| per_frame.iter().sum::<usize>() as f64 / per_frame.len() as f64),
        peak_resident_latents: stats.iter().map(|s| s.peak_resident_latents).max(),
        duration_ms: 0,
    })
}
