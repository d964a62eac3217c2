//! The `frameslide` command line: corpus generation, training, sampling and
//! evaluation, each leaving a JSON run manifest that `replay` can re-execute.
//!
//! Exit codes are 0 on success, 2 for configuration errors, 3 for I/O errors
//! and 1 when a replay does not reproduce its recorded outputs.

mod corpus;
mod eval;
mod generate;
pub mod manifest;
mod replay;
mod train;
mod worldgen;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use manifest::RunManifest;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FRAMESLIDE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io(format!("i/o error on {}: {err}", path.display()))
    }
}

impl From<frameslide::Error> for CliError {
    fn from(e: frameslide::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "frameslide", version, about = "Image-conditioned video sampling with a frozen clip diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Synthesize a video (or one per clip of a corpus).
    Generate(GenerateArgs),
    /// Train a micro denoiser on a corpus.
    Train(TrainArgs),
    /// Fréchet distance between a real and a generated corpus.
    Eval(EvalArgs),
    /// Write a synthetic corpus.
    Worldgen(WorldgenArgs),
    /// Re-run a command from its manifest and compare output checksums.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Worldgen(_) => "worldgen",
            Command::Replay(_) => "replay",
        }
    }

    /// Where the command writes; every recorded output path starts here.
    pub fn out(&self) -> &Path {
        match self {
            Command::Generate(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Worldgen(a) => &a.out,
            Command::Replay(a) => &a.out,
        }
    }

    pub(crate) fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Generate(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::Worldgen(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }

    /// Makes every path absolute so a manifest can be replayed from anywhere.
    fn absolutize(&mut self) -> CliResult<()> {
        fn abs(p: &mut PathBuf) -> CliResult<()> {
            *p = std::path::absolute(&*p).map_err(|e| CliError::io(p, e))?;
            Ok(())
        }
        fn abs_opt(p: &mut Option<PathBuf>) -> CliResult<()> {
            p.as_mut().map_or(Ok(()), abs)
        }
        match self {
            Command::Generate(a) => {
                abs_opt(&mut a.image)?;
                abs_opt(&mut a.given)?;
                abs_opt(&mut a.corpus)?;
                if let Some(path) = a.denoiser.strip_prefix("micro:") {
                    let mut p = PathBuf::from(path);
                    abs(&mut p)?;
                    a.denoiser = format!("micro:{}", p.display());
                }
                abs(&mut a.out)
            }
            Command::Train(a) => {
                abs(&mut a.corpus)?;
                abs(&mut a.out)
            }
            Command::Eval(a) => {
                abs(&mut a.real)?;
                abs(&mut a.fake)?;
                abs(&mut a.out)
            }
            Command::Worldgen(a) => abs(&mut a.out),
            Command::Replay(a) => {
                abs(&mut a.manifest)?;
                abs(&mut a.out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ti2v,
    Infill,
    Predict,
    T2v,
}

/// Diffusion schedule: linear betas over `steps` steps.
#[derive(Debug, Clone, Copy, Args, Serialize, Deserialize)]
pub struct ScheduleArgs {
    /// Diffusion steps T.
    #[arg(long = "steps", default_value_t = frameslide::schedule::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = frameslide::schedule::DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = frameslide::schedule::DEFAULT_BETA_END)]
    pub beta_end: f64,
}

impl ScheduleArgs {
    pub fn params(&self) -> frameslide::schedule::ScheduleParams {
        frameslide::schedule::ScheduleParams {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = Task::Ti2v)]
    pub task: Task,
    /// Start image (PPM).
    #[arg(long, conflicts_with = "corpus")]
    pub image: Option<PathBuf>,
    /// Directory of given frames (frame_0000.ppm, ...) for predict or infill.
    #[arg(long, conflicts_with_all = ["image", "corpus"])]
    pub given: Option<PathBuf>,
    /// Generate one video per clip of this corpus, conditioned on its frames
    /// and labels.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Given prefix length per clip when predicting from a corpus.
    #[arg(long, default_value_t = 1)]
    pub prefix: usize,
    /// Class id, or `null` for the unconditional branch.
    #[arg(long, default_value = "0")]
    pub label: String,
    /// M: frames to synthesize after the first.
    #[arg(long, default_value_t = 15)]
    pub frames: usize,
    /// K: queue length.
    #[arg(long, default_value_t = 4)]
    pub queue: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// DDIM step count; 0 runs the full ancestral chain.
    #[arg(long, default_value_t = 0)]
    pub ddim: usize,
    /// U: denoise passes per step.
    #[arg(long, default_value_t = 1)]
    pub resample: usize,
    #[arg(long, default_value_t = 9.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `analytic` or `micro:PATH`.
    #[arg(long, default_value = "analytic")]
    pub denoiser: String,
    /// Gaussian world for the analytic denoiser, e.g. `rho=0.9,sigma2=1,mu=0,shape=8x8x3`.
    #[arg(long, default_value = "")]
    pub world: String,
    /// Codec pooling factor.
    #[arg(long, default_value_t = frameslide::codec::DEFAULT_FACTOR)]
    pub factor: usize,
    #[arg(long)]
    pub no_inversion: bool,
    /// Also write trace.log with one line per replacement.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// SGD steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub null_prob: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub hidden: usize,
    /// Frames per training window (K + 1 of the sampler that will use it).
    #[arg(long, default_value_t = 5)]
    pub clip_frames: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = frameslide::codec::DEFAULT_FACTOR)]
    pub factor: usize,
    #[arg(long, default_value_t = frameslide::schedule::DEFAULT_STEPS)]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = frameslide::schedule::DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = frameslide::schedule::DEFAULT_BETA_END)]
    pub beta_end: f64,
    /// Parameter file; the loss trace goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Label,
    Subject,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Shapes,
    Ar1,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct WorldgenArgs {
    #[arg(long, value_enum)]
    pub kind: WorldKind,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per clip.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Frame side in pixels (shapes).
    #[arg(long, default_value_t = frameslide::toyworld::DEFAULT_SIZE)]
    pub size: usize,
    /// AR(1) world parameters (ar1).
    #[arg(long, default_value = "")]
    pub world: String,
    /// Codec factor used to render AR(1) latents as pixels.
    #[arg(long, default_value_t = frameslide::codec::DEFAULT_FACTOR)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Output location for the re-run (same kind as the original `--out`).
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("frameslide: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, argv) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("frameslide: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

/// Runs one parsed command and returns a one-line summary.
pub fn execute(mut command: Command, argv: Vec<String>) -> CliResult<String> {
    command.absolutize()?;
    if let Command::Replay(args) = &command {
        return replay::run(args);
    }
    let manifest = run_recorded(command, argv)?;
    Ok(format!(
        "{}: wrote {} outputs under {} in {} ms",
        manifest.command.name(),
        manifest.outputs.len(),
        manifest.command.out().display(),
        manifest.duration_ms
    ))
}

/// Runs a non-replay command and writes its manifest.
pub(crate) fn run_recorded(command: Command, argv: Vec<String>) -> CliResult<RunManifest> {
    let started = std::time::Instant::now();
    let mut record = match &command {
        Command::Generate(a) => generate::run(a)?,
        Command::Train(a) => train::run(a)?,
        Command::Eval(a) => eval::run(a)?,
        Command::Worldgen(a) => worldgen::run(a)?,
        Command::Replay(_) => unreachable!("replay is not recorded"),
    };
    record.duration_ms = started.elapsed().as_millis();
    let manifest = RunManifest::finish(command, argv, record)?;
    manifest.save()?;
    Ok(manifest)
}

/// Worker pool sized by `FRAMESLIDE_THREADS` (default: all cores).
pub(crate) fn pool() -> CliResult<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("{THREADS_ENV}='{v}' is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("cannot start worker pool: {e}")))
}

pub(crate) fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
