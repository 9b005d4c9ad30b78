//! Command-line front end: phantom generation, training, denoising,
//! evaluation, gradient checks and frame stacking.
//!
//! Every command is a plain function in [`commands`] so tests can drive the
//! pipeline without spawning the binary.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pawave::metrics::{DEFAULT_I_MAX, DEFAULT_K1, DEFAULT_K2};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "pawave", version, about = "Wavelet CNN denoising for low-fluence photoacoustic frames")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Global {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run config file (key = value).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for everything the command writes [default: .].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl Global {
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Gen(GenArgs),
    /// Train a network and write a checkpoint plus loss CSV.
    Train(TrainArgs),
    /// Denoise image or volume files with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// PSNR/SSIM against ground truths, or CNR from an ROI file.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Stack frames into a volume file.
    Stack(StackArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    Strokes,
    Letters,
    Depth,
}

#[derive(Args, Clone, Debug)]
pub struct GenArgs {
    /// Build pairs from this manifest instead of the scene flags.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SceneKind::Strokes)]
    pub scene: SceneKind,
    /// Number of scenes.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Side length of square stroke scenes, in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Strokes per scene.
    #[arg(long, default_value_t = 4)]
    pub strokes: usize,
    /// Text of letter scenes.
    #[arg(long, default_value = "UCSD")]
    pub text: String,
    /// Attenuation of depth scenes, per mm.
    #[arg(long, default_value_t = 0.03)]
    pub attenuation: f64,
    /// Fluence labels (e.g. 0.25mJ,40uJ) or the groups laser, led, all.
    #[arg(long, value_delimiter = ',', default_value = "0.25mJ")]
    pub presets: Vec<String>,
    /// Custom signal scale for a single preset label.
    #[arg(long, requires = "sigma")]
    pub alpha: Option<f64>,
    /// Custom noise sigma for a single preset label.
    #[arg(long, requires = "alpha")]
    pub sigma: Option<f64>,
    /// Also write 16-bit PGM previews.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// Directory written by `gen` (overrides the config).
    #[arg(long, conflicts_with = "manifest")]
    pub dataset: Option<PathBuf>,
    /// Manifest to build the dataset from (overrides the config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print every config key at its default and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Clone, Debug)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image (.paif) or volume (.paiv) files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Inserted before the extension of each output file name.
    #[arg(long, default_value = "denoised")]
    pub suffix: String,
    /// Also write a 16-bit PGM preview (first frame).
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Images to score (network outputs, or any frame in CNR mode).
    #[arg(long, alias = "image", num_args = 1.., required = true)]
    pub output: Vec<PathBuf>,
    /// Ground truths, one per --output file (paired mode).
    #[arg(long, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    /// ROI file switching to CNR mode: `role, row_mm, col_mm, h_mm, w_mm` per line.
    #[arg(long)]
    pub rois: Option<PathBuf>,
    /// Rescale each ground truth to [0, 1] as training does.
    #[arg(long)]
    pub normalize_truth: bool,
    #[arg(long, default_value_t = DEFAULT_I_MAX)]
    pub i_max: f64,
    #[arg(long, default_value_t = DEFAULT_K1)]
    pub k1: f64,
    #[arg(long, default_value_t = DEFAULT_K2)]
    pub k2: f64,
    /// CSV path [default: <out-dir>/metrics.csv].
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradcheckPreset {
    /// Op checks plus both tiny networks.
    All,
    /// Op checks plus the one-level network.
    Tiny,
    /// Op checks plus the two-level residual network with a skip.
    Skip,
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradcheckPreset::All)]
    pub preset: GradcheckPreset,
    /// Number of seeds per op check, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

#[derive(Args, Clone, Debug)]
pub struct StackArgs {
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
    /// Volume path [default: <out-dir>/volume.paiv].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Sizes the global worker pool. Only the first call in a process has an
/// effect.
pub fn init_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    init_threads(cli.global.threads)?;
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => {
            let s = commands::gen(a, g)?;
            println!("wrote {} pairs and {}", s.pairs.len(), s.manifest.display());
        }
        Command::Train(a) if a.print_config => print!("{}", RunConfig::defaults_text()),
        Command::Train(a) => {
            let s = commands::train(a, g)?;
            if let Some(w) = &s.warning {
                eprintln!("warning: {w}");
            }
            if let (Some(first), Some(last)) = (s.log.first(), s.log.last()) {
                println!(
                    "trained {} epochs on {} pairs ({} held out): loss {:.6} -> {:.6}",
                    s.log.len(),
                    s.train_pairs,
                    s.test_pairs,
                    first.train,
                    last.train
                );
            }
            println!("checkpoint {}, loss log {}", s.checkpoint.display(), s.loss_csv.display());
        }
        Command::Denoise(a) => {
            for r in commands::denoise(a, g)? {
                println!(
                    "frame={} size={}x{} frames={} ms_per_frame={:.2}",
                    commands::file_name(&r.input),
                    r.height,
                    r.width,
                    r.frames,
                    r.ms_per_frame()
                );
            }
        }
        Command::Eval(a) => print!("{}", pawave::metrics::reports_to_table(&commands::eval(a, g)?)),
        Command::Gradcheck(a) => {
            let checks = commands::gradcheck(a, g)?;
            for c in &checks {
                println!(
                    "{} {} max_rel_err={:.3e} tol={:.0e} evaluated={}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.tolerance,
                    c.evaluated
                );
            }
            commands::gradcheck_verdict(&checks)?;
        }
        Command::Stack(a) => {
            let (path, frames) = commands::stack(a, g)?;
            println!("stacked {frames} frames into {}", path.display());
        }
    }
    Ok(())
}
