use std::collections::BTreeMap;
use std::path::Path;

use frameslide::eval::{extract_features, grouped_fvd_features, write_report, FeatureGroups};
use frameslide::toyworld::{CorpusEntry, MotionClass};
use rayon::prelude::*;

use crate::corpus::{load_entries, load_pixels};
use crate::manifest::{file_manifest, RunRecord};
use crate::{create_dir, pool, CliError, CliResult, EvalArgs, GroupBy};

fn group_key(entry: &CorpusEntry, by: Option<GroupBy>) -> String {
    match by {
        None => "all".to_string(),
        Some(GroupBy::Label) => match entry.class.map(MotionClass::from_id) {
            Some(Ok(c)) => c.name().to_string(),
            Some(Err(_)) => format!("class_{}", entry.class.unwrap_or_default()),
            None => "unlabelled".to_string(),
        },
        Some(GroupBy::Subject) => format!("subject_{:04}", entry.subject),
    }
}

fn features(dir: &Path, by: Option<GroupBy>) -> CliResult<Vec<(String, Vec<f64>)>> {
    let entries = load_entries(dir)?;
    entries
        .par_iter()
        .map(|e| Ok((group_key(e, by), extract_features(&load_pixels(dir, e)?)?)))
        .collect()
}

pub(crate) fn run(args: &EvalArgs) -> CliResult<RunRecord> {
    let (real, fake) = pool()?.install(|| -> CliResult<_> {
        Ok((features(&args.real, args.group_by)?, features(&args.fake, args.group_by)?))
    })?;
    let mut groups: FeatureGroups = BTreeMap::new();
    for (key, f) in real {
        groups.entry(key).or_default().0.push(f);
    }
    for (key, f) in fake {
        groups.entry(key).or_default().1.push(f);
    }
    let report = grouped_fvd_features(&groups)?;

    if let Some(parent) = args.out.parent() {
        create_dir(parent)?;
    }
    let mut csv = Vec::new();
    write_report(&report, &mut csv).map_err(|e| CliError::io(&args.out, e))?;
    std::fs::write(&args.out, csv).map_err(|e| CliError::io(&args.out, e))?;

    Ok(RunRecord {
        inputs: vec![args.real.clone(), args.fake.clone()],
        outputs: vec![args.out.clone()],
        manifest_path: file_manifest(&args.out),
        ..Default::default()
    })
}
