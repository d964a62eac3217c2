//! Reading corpora written by `worldgen` (or by `generate --corpus`).

use std::path::Path;

use frameslide::codec::{encode, latent_file_name, load_latent, load_video, PixelVideo};
use frameslide::toyworld::{load_manifest, CorpusEntry, MANIFEST_FILE};
use frameslide::LatentFrame;

use crate::{CliError, CliResult};

pub(crate) fn load_entries(dir: &Path) -> CliResult<Vec<CorpusEntry>> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("corpus {} does not exist", dir.display())));
    }
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::config(format!(
            "corpus {} has no {MANIFEST_FILE}",
            dir.display()
        )));
    }
    Ok(load_manifest(dir)?)
}

pub(crate) fn load_pixels(dir: &Path, entry: &CorpusEntry) -> CliResult<PixelVideo> {
    Ok(load_video(&dir.join(&entry.path))?)
}

/// Stored latents when the clip has them, otherwise its encoded frames.
pub(crate) fn load_latents(dir: &Path, entry: &CorpusEntry, factor: usize) -> CliResult<Vec<LatentFrame>> {
    let clip = dir.join(&entry.path);
    if clip.join(latent_file_name(0)).is_file() {
        let mut frames = Vec::new();
        loop {
            let path = clip.join(latent_file_name(frames.len()));
            if !path.is_file() {
                return Ok(frames);
            }
            frames.push(load_latent(&path)?);
        }
    }
    load_pixels(dir, entry)?
        .frames
        .iter()
        .map(|f| encode(f, factor).map_err(CliError::from))
        .collect()
}
