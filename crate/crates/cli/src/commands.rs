use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use pawave::checkpoint;
use pawave::gradcheck::{self, GradCheck};
use pawave::image::{Volume, IMAGE_MAGIC, VOLUME_MAGIC};
use pawave::metrics::{self, MetricConstants, MetricReport};
use pawave::model::{self, build_model, ModelParams};
use pawave::phantom::{DegradationPreset, FluenceLabel, Manifest, PhantomSpec, LASER_LADDER, LED_PRESETS};
use pawave::train::{self, normalize, EpochLoss, Pair, PairedDataset};
use pawave::Image;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{DenoiseArgs, EvalArgs, GenArgs, Global, GradcheckArgs, GradcheckPreset, SceneKind, StackArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAIRS_FILE: &str = "pairs.csv";
const PAIRS_HEADER: &str = "index,label,noisy,clean";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn resolve_presets(args: &GenArgs) -> CliResult<Vec<DegradationPreset>> {
    let mut out = Vec::new();
    for name in &args.presets {
        match name.as_str() {
            "laser" => out.extend(LASER_LADDER),
            "led" => out.extend(LED_PRESETS),
            "all" => out.extend(DegradationPreset::all()),
            label => {
                let label: FluenceLabel = label.parse().map_err(|e: pawave::Error| CliError::Usage(e.to_string()))?;
                out.push(match (args.alpha, args.sigma) {
                    (Some(a), Some(s)) => DegradationPreset::custom(label, a, s)?,
                    _ => DegradationPreset::lookup(&label).map_err(|e| CliError::Usage(e.to_string()))?,
                });
            }
        }
    }
    if args.alpha.is_some() && args.presets.len() != 1 {
        return Err(CliError::Usage("--alpha/--sigma need exactly one preset label".into()));
    }
    if out.is_empty() {
        return Err(CliError::Usage("no presets given".into()));
    }
    Ok(out)
}

/// The manifest `gen` would write for these arguments.
pub fn gen_manifest(args: &GenArgs, global: &Global) -> CliResult<Manifest> {
    let manifest = match (&args.manifest, &global.config) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(cfg)) => RunConfig::load(cfg)?.manifest,
        (None, None) => None,
    };
    if let Some(path) = manifest {
        return Ok(Manifest::parse(&read_text(&path)?)?);
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be >= 1".into()));
    }
    let seed = global.seed.unwrap_or(0);
    let height = args.height.unwrap_or(args.size);
    let width = args.width.unwrap_or(args.size);
    let specs: Vec<PhantomSpec> = (0..args.count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let mut spec = match args.scene {
                SceneKind::Strokes => PhantomSpec::strokes(args.size, args.strokes, s),
                SceneKind::Letters => PhantomSpec::letters(&args.text, height, width, s),
                SceneKind::Depth => PhantomSpec::depth_targets(args.attenuation, s),
            };
            spec.height = args.height.unwrap_or(spec.height);
            spec.width = args.width.unwrap_or(spec.width);
            spec.validate().map(|_| spec)
        })
        .collect::<pawave::Result<_>>()?;
    Ok(Manifest::cartesian(&specs, &resolve_presets(args)?, seed))
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

/// Writes `manifest.txt`, `pairs.csv` and one noisy/clean image pair per
/// manifest line under `pairs/`.
pub fn gen(args: &GenArgs, global: &Global) -> CliResult<GenSummary> {
    let manifest = gen_manifest(args, global)?;
    if manifest.entries.is_empty() {
        return Err(pawave::Error::EmptyDataset.into());
    }
    let dir = global.out_dir();
    create_dir(&dir.join("pairs"))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    write_text(&manifest_path, &manifest.to_text())?;

    let mut csv = format!("{PAIRS_HEADER}\n");
    let mut pairs = Vec::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let pair = entry.build()?;
        let noisy = format!("pairs/{i:04}_noisy.paif");
        let clean = format!("pairs/{i:04}_clean.paif");
        pair.noisy.write(dir.join(&noisy))?;
        pair.clean.write(dir.join(&clean))?;
        if args.pgm {
            pair.noisy.write_pgm(dir.join(format!("pairs/{i:04}_noisy.pgm")))?;
            pair.clean.write_pgm(dir.join(format!("pairs/{i:04}_clean.pgm")))?;
        }
        csv.push_str(&format!("{i},{},{noisy},{clean}\n", pair.label));
        pairs.push((dir.join(noisy), dir.join(clean)));
    }
    write_text(&dir.join(PAIRS_FILE), &csv)?;
    Ok(GenSummary {
        manifest: manifest_path,
        pairs,
    })
}

/// Loads the pairs listed in a `gen` output directory.
pub fn read_dataset(dir: &Path) -> CliResult<PairedDataset> {
    let path = dir.join(PAIRS_FILE);
    let text = read_text(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PAIRS_HEADER) {
        return Err(CliError::Data(format!("{}: expected header {PAIRS_HEADER:?}", path.display())));
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(CliError::Data(format!("{} line {}: expected 4 fields", path.display(), i + 2)));
        }
        pairs.push(Pair {
            noisy: Image::read(dir.join(f[2]))?,
            clean: Image::read(dir.join(f[3]))?,
            label: f[1].to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(pawave::Error::EmptyDataset.into());
    }
    Ok(PairedDataset::new(pairs)?)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub log: Vec<EpochLoss>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub warning: Option<String>,
}

/// Effective run config for `train`: the config file (or defaults), then
/// command-line overrides.
pub fn train_config(args: &TrainArgs, global: &Global) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.dataset.is_some() || args.manifest.is_some() {
        cfg.dataset = args.dataset.clone();
        cfg.manifest = args.manifest.clone();
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs, global: &Global) -> CliResult<TrainSummary> {
    let cfg = train_config(args, global)?;
    let data = match (&cfg.dataset, &cfg.manifest) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either a dataset directory or a manifest, not both".into())),
        (Some(dir), None) => read_dataset(dir)?,
        (None, Some(m)) => Manifest::parse(&read_text(m)?)?.build()?,
        (None, None) => return Err(CliError::Usage("no training data: set dataset or manifest".into())),
    };
    let data = data.normalized();

    let dir = global.out_dir();
    create_dir(&dir)?;
    let params = build_model(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train::train_with(params, &data, &cfg.train, |epoch, p| {
        checkpoint::save(p, dir.join(format!("checkpoint_epoch{epoch:04}.mwck")))
    })?;
    let checkpoint_path = dir.join(&cfg.checkpoint);
    let loss_path = dir.join(&cfg.loss_csv);
    if let Some(parent) = checkpoint_path.parent() {
        create_dir(parent)?;
    }
    checkpoint::save(&outcome.params, &checkpoint_path)?;
    write_text(&loss_path, &train::loss_log_csv(&outcome.log))?;

    Ok(TrainSummary {
        checkpoint: checkpoint_path,
        loss_csv: loss_path,
        train_pairs: outcome.split.train.len(),
        test_pairs: outcome.split.test.len(),
        warning: outcome.split.warning,
        log: outcome.log,
    })
}

/// Normalizes a frame to `[0, 1]` and runs it through the network.
pub fn denoise_image(params: &ModelParams<f32>, image: &Image) -> CliResult<Image> {
    let input = normalize(image).to_tensor();
    let out = model::forward(params, &input)?;
    let out = Image::from_tensor(&out, 0, image.spacing_mm())?;
    if !out.is_finite() {
        return Err(CliError::Numeric("network output has non-finite pixels".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenoiseResult {
    pub input: PathBuf,
    pub output: PathBuf,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub millis: f64,
}

impl DenoiseResult {
    pub fn ms_per_frame(&self) -> f64 {
        self.millis / self.frames as f64
    }
}

fn output_name(input: &Path, suffix: &str) -> String {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = input
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "paif".into());
    format!("{stem}.{suffix}.{ext}")
}

fn denoise_file(params: &ModelParams<f32>, input: &Path, output: &Path, pgm: bool) -> CliResult<DenoiseResult> {
    let bytes = fs::read(input).map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    let start = Instant::now();
    let frames = if bytes.starts_with(VOLUME_MAGIC) {
        let vol = Volume::from_bytes(&bytes)?;
        let out = vol.frames.iter().map(|f| denoise_image(params, f)).collect::<CliResult<Vec<_>>>()?;
        let n = out.len();
        let first = out[0].clone();
        Volume::new(out)?.write(output)?;
        (n, first)
    } else if bytes.starts_with(IMAGE_MAGIC) {
        let out = denoise_image(params, &Image::from_bytes(&bytes)?)?;
        out.write(output)?;
        (1, out)
    } else {
        return Err(CliError::Data(format!("{}: not an image or volume file", input.display())));
    };
    let millis = start.elapsed().as_secs_f64() * 1e3;
    if pgm {
        frames.1.write_pgm(output.with_extension("pgm"))?;
    }
    Ok(DenoiseResult {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        frames: frames.0,
        height: frames.1.height(),
        width: frames.1.width(),
        millis,
    })
}

/// Denoises every input file into `--out-dir`, several files at a time.
/// Prints and records per-frame latency in `latency.csv`.
pub fn denoise(args: &DenoiseArgs, global: &Global) -> CliResult<Vec<DenoiseResult>> {
    if args.inputs.is_empty() {
        return Err(CliError::Usage("no input files".into()));
    }
    let params = checkpoint::load(&args.checkpoint)?;
    let dir = global.out_dir();
    create_dir(&dir)?;
    let names: Vec<String> = args.inputs.iter().map(|p| output_name(p, &args.suffix)).collect();
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(CliError::Usage("two inputs map to the same output file name".into()));
    }
    let results = args
        .inputs
        .par_iter()
        .zip(&names)
        .map(|(input, name)| denoise_file(&params, input, &dir.join(name), args.pgm))
        .collect::<CliResult<Vec<_>>>()?;

    let mut csv = String::from("file,frames,height,width,ms_per_frame\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            file_name(&r.input),
            r.frames,
            r.height,
            r.width,
            r.ms_per_frame()
        ));
    }
    write_text(&dir.join("latency.csv"), &csv)?;
    Ok(results)
}

fn read_frames(path: &Path) -> CliResult<Vec<Image>> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(VOLUME_MAGIC) {
        Ok(Volume::from_bytes(&bytes)?.frames)
    } else {
        Ok(vec![Image::from_bytes(&bytes)?])
    }
}

fn frame_label(path: &Path, i: usize, n: usize) -> String {
    if n == 1 {
        file_name(path)
    } else {
        format!("{}#{i}", file_name(path))
    }
}

/// Paired PSNR/SSIM (outputs against ground truths) or, with `--rois`,
/// single-image CNR. Writes the reports as CSV.
pub fn eval(args: &EvalArgs, global: &Global) -> CliResult<Vec<MetricReport>> {
    let constants = MetricConstants {
        i_max: args.i_max,
        k1: args.k1,
        k2: args.k2,
    };
    if args.output.is_empty() {
        return Err(CliError::Usage("no --output images to evaluate".into()));
    }
    let mut reports = Vec::new();
    if let Some(roi_path) = &args.rois {
        if !args.truth.is_empty() {
            return Err(CliError::Usage("CNR mode (--rois) takes no --truth files".into()));
        }
        let rois = metrics::parse_roi_spec(&read_text(roi_path)?)?;
        for path in &args.output {
            let frames = read_frames(path)?;
            for (i, img) in frames.iter().enumerate() {
                let (obj, bg) = metrics::resolve_rois(img, &rois)?;
                reports.push(metrics::evaluate_cnr(
                    &frame_label(path, i, frames.len()),
                    img,
                    &obj,
                    &bg,
                    constants,
                )?);
            }
        }
    } else {
        if args.truth.len() != args.output.len() {
            return Err(CliError::Usage(format!(
                "{} outputs but {} ground truths",
                args.output.len(),
                args.truth.len()
            )));
        }
        for (out_path, gt_path) in args.output.iter().zip(&args.truth) {
            let outs = read_frames(out_path)?;
            let gts = read_frames(gt_path)?;
            if outs.len() != gts.len() {
                return Err(CliError::Data(format!(
                    "{} has {} frames, {} has {}",
                    out_path.display(),
                    outs.len(),
                    gt_path.display(),
                    gts.len()
                )));
            }
            for (i, (o, g)) in outs.iter().zip(&gts).enumerate() {
                let g = if args.normalize_truth { normalize(g) } else { g.clone() };
                reports.push(metrics::evaluate_pair(&frame_label(out_path, i, outs.len()), o, &g, constants)?);
            }
        }
    }
    let csv = args.csv.clone().unwrap_or_else(|| global.out_dir().join("metrics.csv"));
    write_text(&csv, &metrics::reports_to_csv(&reports))?;
    Ok(reports)
}

/// Runs the finite-difference suite. See [`gradcheck_verdict`] for the
/// pass/fail decision.
pub fn gradcheck(args: &GradcheckArgs, global: &Global) -> CliResult<Vec<GradCheck>> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let start = global.seed.unwrap_or(0);
    let checks: Vec<GradCheck> = gradcheck::full_suite(start..start + args.seeds)?
        .into_iter()
        .filter(|c| {
            let model = c.name.starts_with("mwcnn");
            let skip = c.name.contains("skip");
            match args.preset {
                GradcheckPreset::All => true,
                GradcheckPreset::Tiny => !skip,
                GradcheckPreset::Skip => !model || skip,
            }
        })
        .collect();
    Ok(checks)
}

/// Any failed check is a numeric error.
pub fn gradcheck_verdict(checks: &[GradCheck]) -> CliResult<()> {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Concatenates frames (images or volumes) into one volume file.
pub fn stack(args: &StackArgs, global: &Global) -> CliResult<(PathBuf, usize)> {
    if args.frames.is_empty() {
        return Err(CliError::Usage("no frames to stack".into()));
    }
    let mut frames = Vec::new();
    for f in &args.frames {
        frames.extend(read_frames(f)?);
    }
    let vol = Volume::new(frames)?;
    let out = args.output.clone().unwrap_or_else(|| global.out_dir().join("volume.paiv"));
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    vol.write(&out)?;
    Ok((out, vol.frames.len()))
}
