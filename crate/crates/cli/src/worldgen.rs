use std::io::Write;

use frameslide::codec::{decode, latent_file_name, save_latent, save_video, PixelVideo};
use frameslide::denoiser::GaussianWorldSpec;
use frameslide::rng::stream;
use frameslide::toyworld::{
    gen_shape_video, sample_ar1_clip, shape_corpus_plan, write_manifest, CorpusEntry, MotionClass, MANIFEST_FILE,
};
use rand::Rng;
use rayon::prelude::*;

use crate::manifest::{dir_manifest, RunRecord};
use crate::{create_dir, pool, CliError, CliResult, WorldKind, WorldgenArgs};

pub(crate) fn run(args: &WorldgenArgs) -> CliResult<RunRecord> {
    if args.frames == 0 {
        return Err(CliError::config("--frames must be at least 1"));
    }
    let out = &args.out;
    create_dir(out)?;
    let entries: Vec<CorpusEntry> = match args.kind {
        WorldKind::Shapes => shape_corpus_plan(args.count, args.seed),
        WorldKind::Ar1 => (0..args.count)
            .map(|i| CorpusEntry {
                path: format!("clip_{i:05}"),
                class: None,
                subject: i as u32,
                seed: stream(args.seed, i as u64).random(),
            })
            .collect(),
    };
    let world = match args.kind {
        WorldKind::Ar1 => Some(args.world.parse::<GaussianWorldSpec>()?),
        WorldKind::Shapes => None,
    };

    pool()?.install(|| {
        entries.par_iter().try_for_each(|e| -> CliResult<()> {
            let dir = out.join(&e.path);
            create_dir(&dir)?;
            match &world {
                None => {
                    let class = MotionClass::from_id(e.class.unwrap_or(0))?;
                    let clip = gen_shape_video(class, e.seed, args.frames, args.size)?;
                    save_video(&clip.video, &dir)?;
                }
                Some(world) => {
                    let clip = sample_ar1_clip(world, args.frames, e.seed)?;
                    let mut frames = Vec::with_capacity(args.frames);
                    for (k, z) in clip.to_frames().iter().enumerate() {
                        save_latent(z, &dir.join(latent_file_name(k)))?;
                        frames.push(decode(z, args.factor)?);
                    }
                    save_video(&PixelVideo::new(frames)?, &dir)?;
                }
            }
            Ok(())
        })
    })?;

    let path = out.join(MANIFEST_FILE);
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?);
    write_manifest(&entries, &mut file).map_err(|e| CliError::io(&path, e))?;
    file.flush().map_err(|e| CliError::io(&path, e))?;

    Ok(RunRecord {
        seed: Some(args.seed),
        outputs: vec![out.clone()],
        manifest_path: dir_manifest(out),
        ..Default::default()
    })
}
