//! Synthetic paired datasets.
//!
//! Clean scenes are rendered at intensity ~1 on a zero background and
//! softened by a small separable blur standing in for the system PSF.
//! Low-fluence inputs are `alpha * clean + N(0, sigma^2)`; for depth scenes
//! `alpha` also decays as `exp(-mu * depth)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{Roi, RoiRole};
use crate::train::{Pair, PairedDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FluenceUnit {
    MilliJoule,
    MicroJoule,
}

/// Pulse energy a preset is named after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluenceLabel {
    pub value: f64,
    pub unit: FluenceUnit,
}

impl FluenceLabel {
    pub const fn mj(value: f64) -> Self {
        FluenceLabel {
            value,
            unit: FluenceUnit::MilliJoule,
        }
    }

    pub const fn uj(value: f64) -> Self {
        FluenceLabel {
            value,
            unit: FluenceUnit::MicroJoule,
        }
    }

    pub fn millijoules(&self) -> f64 {
        match self.unit {
            FluenceUnit::MilliJoule => self.value,
            FluenceUnit::MicroJoule => self.value * 1e-3,
        }
    }
}

impl fmt::Display for FluenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit {
            FluenceUnit::MilliJoule => write!(f, "{}mJ", self.value),
            FluenceUnit::MicroJoule => write!(f, "{}uJ", self.value),
        }
    }
}

impl FromStr for FluenceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (num, unit) = if let Some(n) = t.strip_suffix("mJ") {
            (n, FluenceUnit::MilliJoule)
        } else if let Some(n) = t.strip_suffix("uJ").or_else(|| t.strip_suffix("μJ")) {
            (n, FluenceUnit::MicroJoule)
        } else {
            return Err(Error::Config(format!("fluence label {t:?} needs a mJ or uJ suffix")));
        };
        let value = num
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("fluence label {t:?}: {e}")))?;
        Ok(FluenceLabel { value, unit })
    }
}

/// Signal scale and additive noise level tied to a fluence label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationPreset {
    pub label: FluenceLabel,
    pub alpha: f64,
    pub sigma: f64,
}

/// Laser ladder, highest fluence first. 17 mJ is the ground-truth preset.
pub const LASER_LADDER: [DegradationPreset; 5] = [
    DegradationPreset {
        label: FluenceLabel::mj(17.0),
        alpha: 1.0,
        sigma: 0.0,
    },
    DegradationPreset {
        label: FluenceLabel::mj(0.95),
        alpha: 0.75,
        sigma: 0.1,
    },
    DegradationPreset {
        label: FluenceLabel::mj(0.25),
        alpha: 0.5,
        sigma: 0.2,
    },
    DegradationPreset {
        label: FluenceLabel::mj(0.065),
        alpha: 0.3,
        sigma: 0.3,
    },
    DegradationPreset {
        label: FluenceLabel::mj(0.016),
        alpha: 0.15,
        sigma: 0.4,
    },
];

/// LED presets, highest fluence first.
pub const LED_PRESETS: [DegradationPreset; 3] = [
    DegradationPreset {
        label: FluenceLabel::uj(160.0),
        alpha: 0.42,
        sigma: 0.22,
    },
    DegradationPreset {
        label: FluenceLabel::uj(80.0),
        alpha: 0.34,
        sigma: 0.26,
    },
    DegradationPreset {
        label: FluenceLabel::uj(40.0),
        alpha: 0.22,
        sigma: 0.32,
    },
];

impl DegradationPreset {
    pub fn custom(label: FluenceLabel, alpha: f64, sigma: f64) -> Result<Self> {
        let p = DegradationPreset { label, alpha, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Every built-in preset, sorted from highest to lowest fluence.
    pub fn all() -> Vec<DegradationPreset> {
        let mut v: Vec<_> = LASER_LADDER.iter().chain(&LED_PRESETS).copied().collect();
        v.sort_by(|a, b| b.label.millijoules().total_cmp(&a.label.millijoules()));
        v
    }

    pub fn lookup(label: &FluenceLabel) -> Result<DegradationPreset> {
        Self::all()
            .into_iter()
            .find(|p| p.label == *label)
            .ok_or_else(|| Error::Config(format!("no preset for fluence {label}")))
    }
}

impl FromStr for DegradationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationPreset::lookup(&s.parse()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    /// Random anti-aliased polylines.
    Strokes { count: usize, width_px: f64, intensity: f64 },
    /// Bitmap glyphs laid out in a row.
    Letters { text: String, intensity: f64 },
    /// Round targets centred laterally at each depth.
    DepthTargets {
        depths_mm: Vec<f64>,
        radius_mm: f64,
        attenuation_per_mm: f64,
        intensity: f64,
    },
}

impl Scene {
    pub fn kind(&self) -> &'static str {
        match self {
            Scene::Strokes { .. } => "strokes",
            Scene::Letters { .. } => "letters",
            Scene::DepthTargets { .. } => "depth",
        }
    }
}

/// Depths of the target phantom, in mm.
pub const TARGET_DEPTHS_MM: [f64; 5] = [2.5, 7.5, 12.5, 17.5, 22.5];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    pub scene: Scene,
    pub frames: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn strokes(size: usize, count: usize, seed: u64) -> Self {
        PhantomSpec {
            height: size,
            width: size,
            spacing_mm: 0.1,
            scene: Scene::Strokes {
                count,
                width_px: 2.0,
                intensity: 1.0,
            },
            frames: 1,
            seed,
        }
    }

    /// 256x320 px at 0.1 mm with a 2 mm target at each standard depth.
    pub fn depth_targets(attenuation_per_mm: f64, seed: u64) -> Self {
        PhantomSpec {
            height: 256,
            width: 320,
            spacing_mm: 0.1,
            scene: Scene::DepthTargets {
                depths_mm: TARGET_DEPTHS_MM.to_vec(),
                radius_mm: 1.0,
                attenuation_per_mm,
                intensity: 1.0,
            },
            frames: 1,
            seed,
        }
    }

    pub fn letters(text: &str, height: usize, width: usize, seed: u64) -> Self {
        PhantomSpec {
            height,
            width,
            spacing_mm: 0.1,
            scene: Scene::Letters {
                text: text.to_string(),
                intensity: 1.0,
            },
            frames: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!("degenerate phantom size {}x{}", self.height, self.width)));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::Config("pixel spacing must be > 0".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if let Scene::Letters { text, .. } = &self.scene {
            for ch in text.chars() {
                glyph(ch)?;
            }
        }
        Ok(())
    }

    /// Exponential attenuation coefficient applied when degrading, if any.
    pub fn attenuation_per_mm(&self) -> Option<f64> {
        match self.scene {
            Scene::DepthTargets { attenuation_per_mm, .. } => Some(attenuation_per_mm),
            _ => None,
        }
    }
}

/// 5x7 glyph bitmaps, one string per row.
fn glyph(ch: char) -> Result<[&'static str; 7]> {
    Ok(match ch.to_ascii_uppercase() {
        'U' => ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'C' => [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'D' => ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        ' ' => ["....."; 7],
        other => return Err(Error::Config(format!("no glyph for {other:?}"))),
    })
}

struct LetterLayout {
    scale: usize,
    top: usize,
    left: usize,
}

fn letter_layout(spec: &PhantomSpec, n: usize) -> LetterLayout {
    let n = n.max(1);
    // each glyph cell is 6 columns wide including a one-column gap
    let scale = ((spec.height * 3 / 5) / 7).min(spec.width * 9 / 10 / (6 * n)).max(1);
    let text_w = (6 * n - 1) * scale;
    let text_h = 7 * scale;
    LetterLayout {
        scale,
        top: spec.height.saturating_sub(text_h) / 2,
        left: spec.width.saturating_sub(text_w) / 2,
    }
}

/// One bounding ROI per non-space glyph of a letter scene, with a one-pixel
/// margin, labelled by the character.
pub fn letter_regions(spec: &PhantomSpec) -> Result<Vec<(String, Roi)>> {
    let Scene::Letters { text, .. } = &spec.scene else {
        return Err(Error::Config("letter regions need a letter scene".into()));
    };
    spec.validate()?;
    let lay = letter_layout(spec, text.chars().count());
    let mut out = Vec::new();
    for (i, ch) in text.chars().enumerate() {
        if ch == ' ' {
            continue;
        }
        let row = lay.top.saturating_sub(1);
        let col = (lay.left + i * 6 * lay.scale).saturating_sub(1);
        let h = (7 * lay.scale + 2).min(spec.height - row);
        let w = (5 * lay.scale + 2).min(spec.width - col);
        out.push((ch.to_string(), Roi::new(row, col, h, w, RoiRole::Object)));
    }
    Ok(out)
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Separable [1, 2, 1] / 4 blur with edge clamping.
fn blur(img: &mut Image) {
    let (h, w) = (img.height(), img.width());
    let src = img.data().to_vec();
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = src[r * w + c.saturating_sub(1)];
            let m = src[r * w + c];
            let rr = src[r * w + (c + 1).min(w - 1)];
            tmp[r * w + c] = 0.25 * l + 0.5 * m + 0.25 * rr;
        }
    }
    let out = img.data_mut();
    for r in 0..h {
        for c in 0..w {
            let u = tmp[r.saturating_sub(1) * w + c];
            let m = tmp[r * w + c];
            let d = tmp[(r + 1).min(h - 1) * w + c];
            out[r * w + c] = 0.25 * u + 0.5 * m + 0.25 * d;
        }
    }
}

fn render_strokes(img: &mut Image, count: usize, width_px: f64, intensity: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let margin = 2.0f64.min(h / 4.0).min(w / 4.0);
    for _ in 0..count {
        let vertices = rng.gen_range(3..=5);
        let pts: Vec<(f64, f64)> = (0..vertices)
            .map(|_| (rng.gen_range(margin..h - margin), rng.gen_range(margin..w - margin)))
            .collect();
        let level = intensity * rng.gen_range(0.8..=1.0);
        let half = width_px / 2.0;
        for r in 0..img.height() {
            for c in 0..img.width() {
                let p = (r as f64 + 0.5, c as f64 + 0.5);
                let d = pts.windows(2).map(|s| dist_to_segment(p, s[0], s[1])).fold(f64::INFINITY, f64::min);
                let coverage = (half + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = (coverage * level) as f32;
                    if v > img.get(r, c) {
                        img.set(r, c, v);
                    }
                }
            }
        }
    }
}

fn render_letters(img: &mut Image, spec: &PhantomSpec, text: &str, intensity: f64) -> Result<()> {
    let lay = letter_layout(spec, text.chars().count());
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch)?;
        let left = lay.left + i * 6 * lay.scale;
        for (gy, line) in rows.iter().enumerate() {
            for (gx, cell) in line.bytes().enumerate() {
                if cell != b'#' {
                    continue;
                }
                for dy in 0..lay.scale {
                    for dx in 0..lay.scale {
                        let (r, c) = (lay.top + gy * lay.scale + dy, left + gx * lay.scale + dx);
                        if r < img.height() && c < img.width() {
                            img.set(r, c, intensity as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Centre column of the depth targets.
pub fn target_column(spec: &PhantomSpec) -> usize {
    spec.width / 2
}

/// Row of the target at `depth_mm`.
pub fn depth_row(depth_mm: f64, spacing_mm: f64) -> usize {
    (depth_mm / spacing_mm).round() as usize
}

fn render_targets(img: &mut Image, spec: &PhantomSpec, depths_mm: &[f64], radius_mm: f64, intensity: f64) {
    let radius = radius_mm / spec.spacing_mm;
    let cc = target_column(spec) as f64;
    for &d in depths_mm {
        let cr = depth_row(d, spec.spacing_mm) as f64;
        for r in 0..img.height() {
            for c in 0..img.width() {
                let dist = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                let coverage = (radius + 0.5 - dist).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    img.set(r, c, img.get(r, c).max((coverage * intensity) as f32));
                }
            }
        }
    }
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64)
}

/// Renders every frame of `spec`.
pub fn generate_clean(spec: &PhantomSpec) -> Result<Vec<Image>> {
    (0..spec.frames).map(|f| generate_frame(spec, f)).collect()
}

pub fn generate_frame(spec: &PhantomSpec, frame: usize) -> Result<Image> {
    spec.validate()?;
    let mut img = Image::zeros(spec.height, spec.width, spec.spacing_mm as f32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, frame));
    match &spec.scene {
        Scene::Strokes {
            count,
            width_px,
            intensity,
        } => {
            if *count == 0 {
                return Ok(img);
            }
            render_strokes(&mut img, *count, *width_px, *intensity, &mut rng);
        }
        Scene::Letters { text, intensity } => render_letters(&mut img, spec, text, *intensity)?,
        Scene::DepthTargets {
            depths_mm,
            radius_mm,
            intensity,
            ..
        } => render_targets(&mut img, spec, depths_mm, *radius_mm, *intensity),
    }
    blur(&mut img);
    Ok(img)
}

/// `alpha * clean + N(0, sigma^2)` per pixel.
pub fn degrade(clean: &Image, preset: &DegradationPreset, seed: u64) -> Result<Image> {
    degrade_with_attenuation(clean, preset, 0.0, seed)
}

/// As [`degrade`], with the signal scale decaying as `exp(-mu * depth)`,
/// depth being the row position in mm.
pub fn degrade_with_attenuation(clean: &Image, preset: &DegradationPreset, attenuation_per_mm: f64, seed: u64) -> Result<Image> {
    preset.validate()?;
    if !(attenuation_per_mm >= 0.0) {
        return Err(Error::Config("attenuation must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = f64::from(clean.spacing_mm());
    let mut out = clean.clone();
    let w = clean.width();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let depth = (i / w) as f64 * spacing;
        let alpha = preset.alpha * (-attenuation_per_mm * depth).exp();
        let noise: f64 = if preset.sigma > 0.0 {
            preset.sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        *v = (alpha * f64::from(*v) + noise) as f32;
    }
    Ok(out)
}

/// Object and background ROIs for one target depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRois {
    pub depth_mm: f64,
    pub objects: Vec<Roi>,
    pub backgrounds: Vec<Roi>,
}

/// Lateral offsets (mm) of the background ROI centres from the target.
pub const BACKGROUND_OFFSETS_MM: [f64; 5] = [-12.0, -7.5, 4.5, 9.0, 13.5];
/// Offsets (mm) of the object ROI centres within the target.
pub const OBJECT_OFFSETS_MM: [(f64, f64); 5] = [(0.0, 0.0), (-0.2, 0.0), (0.2, 0.0), (0.0, -0.2), (0.0, 0.2)];

/// Five 1x1 mm object ROIs inside each target and five 3x3 mm background
/// ROIs at the same depth.
pub fn depth_rois(spec: &PhantomSpec, image: &Image) -> Result<Vec<DepthRois>> {
    let Scene::DepthTargets { depths_mm, .. } = &spec.scene else {
        return Err(Error::Config("depth rois need a depth-target scene".into()));
    };
    let col_mm = target_column(spec) as f64 * spec.spacing_mm;
    depths_mm
        .iter()
        .map(|&d| {
            let row_mm = depth_row(d, spec.spacing_mm) as f64 * spec.spacing_mm;
            let obj_centres: Vec<(f64, f64)> = OBJECT_OFFSETS_MM.iter().map(|&(dr, dc)| (row_mm + dr, col_mm + dc)).collect();
            let bg_centres: Vec<(f64, f64)> = BACKGROUND_OFFSETS_MM.iter().map(|&dc| (row_mm, col_mm + dc)).collect();
            Ok(DepthRois {
                depth_mm: d,
                objects: crate::metrics::rois_from_physical(image, &obj_centres, (1.0, 1.0), RoiRole::Object)?,
                backgrounds: crate::metrics::rois_from_physical(image, &bg_centres, (3.0, 3.0), RoiRole::Background)?,
            })
        })
        .collect()
}

/// One dataset pair: a scene frame, the preset degrading it and the noise seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub spec: PhantomSpec,
    pub frame: usize,
    pub preset: DegradationPreset,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn label(&self) -> String {
        format!("{}:{}:{}", self.spec.scene.kind(), self.preset.label, self.seed)
    }

    pub fn build(&self) -> Result<Pair> {
        let clean = generate_frame(&self.spec, self.frame)?;
        let mu = self.spec.attenuation_per_mm().unwrap_or(0.0);
        let noisy = degrade_with_attenuation(&clean, &self.preset, mu, self.seed)?;
        Ok(Pair {
            noisy,
            clean,
            label: self.label(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Manifest {
    /// Every frame of every spec crossed with every preset. Noise seeds are
    /// derived from `seed` and the pair index.
    pub fn cartesian(specs: &[PhantomSpec], presets: &[DegradationPreset], seed: u64) -> Manifest {
        let mut entries = Vec::new();
        for spec in specs {
            for frame in 0..spec.frames {
                for preset in presets {
                    let seed = mix(seed, entries.len() as u64);
                    entries.push(ManifestEntry {
                        spec: PhantomSpec { frames: 1, ..spec.clone() },
                        frame,
                        preset: *preset,
                        seed,
                    });
                }
            }
        }
        Manifest { entries }
    }

    pub fn build(&self) -> Result<PairedDataset> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        PairedDataset::new(self.entries.iter().map(ManifestEntry::build).collect::<Result<_>>()?)
    }

    /// One pair per line of whitespace-separated `key=value` tokens.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# scene spec, preset label and noise seed per pair\n");
        for e in &self.entries {
            let sp = &e.spec;
            s.push_str(&format!(
                "scene={} height={} width={} spacing_mm={} scene_seed={} frame={}",
                sp.scene.kind(),
                sp.height,
                sp.width,
                sp.spacing_mm,
                sp.seed,
                e.frame
            ));
            match &sp.scene {
                Scene::Strokes {
                    count,
                    width_px,
                    intensity,
                } => s.push_str(&format!(" count={count} width_px={width_px} intensity={intensity}")),
                Scene::Letters { text, intensity } => s.push_str(&format!(" text={text} intensity={intensity}")),
                Scene::DepthTargets {
                    depths_mm,
                    radius_mm,
                    attenuation_per_mm,
                    intensity,
                } => {
                    let d: Vec<String> = depths_mm.iter().map(f64::to_string).collect();
                    s.push_str(&format!(
                        " depths_mm={} radius_mm={radius_mm} attenuation_per_mm={attenuation_per_mm} intensity={intensity}",
                        d.join(",")
                    ));
                }
            }
            s.push_str(&format!(
                " preset={} alpha={} sigma={} seed={}\n",
                e.preset.label, e.preset.alpha, e.preset.sigma, e.seed
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            entries.push(parse_entry(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Manifest { entries })
    }
}

fn parse_entry(line: &str) -> Result<ManifestEntry> {
    let mut kv = std::collections::BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("token {tok:?} is not key=value")))?;
        if kv.insert(k, v).is_some() {
            return Err(Error::Config(format!("duplicate key {k:?}")));
        }
    }
    let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Config(format!("missing key {k:?}")));
    fn num<T: FromStr>(k: &str, v: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        v.parse().map_err(|e| Error::Config(format!("{k}={v}: {e}")))
    }

    let kind = take("scene")?;
    let height = num("height", take("height")?)?;
    let width = num("width", take("width")?)?;
    let spacing_mm = num("spacing_mm", take("spacing_mm")?)?;
    let scene_seed = num("scene_seed", take("scene_seed")?)?;
    let frame = num("frame", take("frame")?)?;
    let scene = match kind {
        "strokes" => Scene::Strokes {
            count: num("count", take("count")?)?,
            width_px: num("width_px", take("width_px")?)?,
            intensity: num("intensity", take("intensity")?)?,
        },
        "letters" => Scene::Letters {
            text: take("text")?.to_string(),
            intensity: num("intensity", take("intensity")?)?,
        },
        "depth" => Scene::DepthTargets {
            depths_mm: take("depths_mm")?.split(',').map(|d| num("depths_mm", d)).collect::<Result<_>>()?,
            radius_mm: num("radius_mm", take("radius_mm")?)?,
            attenuation_per_mm: num("attenuation_per_mm", take("attenuation_per_mm")?)?,
            intensity: num("intensity", take("intensity")?)?,
        },
        other => return Err(Error::Config(format!("unknown scene {other:?}"))),
    };
    let label: FluenceLabel = take("preset")?.parse()?;
    let preset = match (kv.remove("alpha"), kv.remove("sigma")) {
        (Some(a), Some(s)) => DegradationPreset::custom(label, num("alpha", a)?, num("sigma", s)?)?,
        (None, None) => DegradationPreset::lookup(&label)?,
        _ => return Err(Error::Config("alpha and sigma must be given together".into())),
    };
    let seed = num(
        "seed",
        kv.remove("seed").ok_or_else(|| Error::Config("missing key \"seed\"".into()))?,
    )?;
    if let Some(k) = kv.keys().next() {
        return Err(Error::Config(format!("unknown key {k:?}")));
    }
    let spec = PhantomSpec {
        height,
        width,
        spacing_mm,
        scene,
        frames: 1,
        seed: scene_seed,
    };
    spec.validate()?;
    Ok(ManifestEntry { spec, frame, preset, seed })
}

/// Cartesian pairing of scenes and presets, built straight to a dataset.
pub fn build_dataset(specs: &[PhantomSpec], presets: &[DegradationPreset], seed: u64) -> Result<PairedDataset> {
    Manifest::cartesian(specs, presets, seed).build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn presets_are_monotone_in_fluence() {
        let all = DegradationPreset::all();
        assert_eq!(all.len(), 8);
        for pair in all.windows(2) {
            let (hi, lo) = (pair[0], pair[1]);
            assert!(hi.label.millijoules() > lo.label.millijoules());
            assert!(lo.alpha < hi.alpha, "{} vs {}", lo.label, hi.label);
            assert!(lo.sigma / lo.alpha > hi.sigma / hi.alpha);
        }
        let mid = DegradationPreset::lookup(&FluenceLabel::mj(0.25)).unwrap();
        assert_eq!((mid.alpha, mid.sigma), (0.5, 0.2));
    }

    #[test]
    fn fluence_labels_parse() {
        assert_eq!("0.25mJ".parse::<FluenceLabel>().unwrap(), FluenceLabel::mj(0.25));
        assert_eq!("40uJ".parse::<FluenceLabel>().unwrap(), FluenceLabel::uj(40.0));
        assert_eq!(FluenceLabel::uj(80.0).to_string(), "80uJ");
        assert!("17".parse::<FluenceLabel>().is_err());
        assert!("3mJ".parse::<DegradationPreset>().is_err());
    }

    #[test]
    fn empty_strokes_are_black() {
        let spec = PhantomSpec::strokes(16, 0, 1);
        let img = generate_clean(&spec).unwrap().remove(0);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = PhantomSpec::strokes(32, 4, 11);
        assert_eq!(generate_clean(&spec).unwrap(), generate_clean(&spec).unwrap());
        let other = PhantomSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_clean(&spec).unwrap(), generate_clean(&other).unwrap());
        let img = generate_frame(&spec, 0).unwrap();
        let max = img.data().iter().copied().fold(0.0, f32::max);
        assert!(max > 0.5 && max <= 1.0);
    }

    #[test]
    fn depth_targets_sit_at_expected_rows() {
        let spec = PhantomSpec::depth_targets(0.03, 0);
        let rows: Vec<usize> = TARGET_DEPTHS_MM.iter().map(|&d| depth_row(d, spec.spacing_mm)).collect();
        assert_eq!(rows, vec![25, 75, 125, 175, 225]);
        let img = generate_frame(&spec, 0).unwrap();
        let col = target_column(&spec);
        for r in rows {
            assert!(img.get(r, col) > 0.9);
            assert_eq!(img.get(r, 5), 0.0);
        }
        let rois = depth_rois(&spec, &img).unwrap();
        assert_eq!(rois.len(), 5);
        for d in &rois {
            assert_eq!(d.objects.len(), 5);
            assert_eq!(d.backgrounds.len(), 5);
            for o in &d.objects {
                assert_eq!((o.height, o.width), (10, 10));
                let (m, _) = o.stats(&img).unwrap();
                assert!(m > 0.9, "object roi mean {m}");
            }
            for b in &d.backgrounds {
                assert_eq!((b.height, b.width), (30, 30));
                assert_eq!(b.stats(&img).unwrap(), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn letters_render_and_regions_cover_them() {
        let spec = PhantomSpec::letters("UCSD", 64, 128, 0);
        let img = generate_frame(&spec, 0).unwrap();
        let regions = letter_regions(&spec).unwrap();
        assert_eq!(
            regions.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(),
            vec!["U", "C", "S", "D"]
        );
        let total: f32 = img.data().iter().sum();
        let inside: f32 = regions.iter().map(|(_, r)| img.crop(r).unwrap().data().iter().sum::<f32>()).sum();
        assert!(total > 0.0);
        assert!((inside - total).abs() < 1e-3 * total, "{inside} vs {total}");
        assert!(generate_frame(&PhantomSpec::letters("UCSQ", 64, 128, 0), 0).is_err());
    }

    #[test]
    fn degrade_identity_and_scaling() {
        let clean = generate_frame(&PhantomSpec::strokes(32, 3, 2), 0).unwrap();
        let id = DegradationPreset::custom(FluenceLabel::mj(17.0), 1.0, 0.0).unwrap();
        assert_eq!(degrade(&clean, &id, 5).unwrap(), clean);
        let half = DegradationPreset::custom(FluenceLabel::mj(1.0), 0.5, 0.0).unwrap();
        let out = degrade(&clean, &half, 5).unwrap();
        for (o, c) in out.data().iter().zip(clean.data()) {
            assert_eq!(*o, c * 0.5);
        }
        assert!(DegradationPreset::custom(FluenceLabel::mj(1.0), 0.0, 0.1).is_err());
    }

    #[test]
    fn noise_statistics() {
        let clean = Image::zeros(128, 128, 0.1).unwrap();
        let p = DegradationPreset::custom(FluenceLabel::mj(0.25), 0.5, 0.2).unwrap();
        let noisy = degrade(&clean, &p, 3).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let std = (noisy.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.2).abs() < 0.05 * 0.2, "{std}");
        assert!(mean.abs() < 3.0 * 0.2 / n.sqrt(), "{mean}");
        assert_eq!(degrade(&clean, &p, 3).unwrap(), noisy);
    }

    #[test]
    fn attenuation_darkens_with_depth() {
        let clean = Image::new(200, 1, 0.1, vec![1.0; 200]).unwrap();
        let p = DegradationPreset::custom(FluenceLabel::mj(1.0), 1.0, 0.0).unwrap();
        let out = degrade_with_attenuation(&clean, &p, 0.05, 0).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
        assert!((f64::from(out.get(100, 0)) - (-0.5f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn snr_ladder_decreases() {
        let clean = generate_frame(&PhantomSpec::strokes(64, 6, 3), 0).unwrap();
        let ranks: Vec<f64> = LASER_LADDER
            .iter()
            .map(|p| psnr(&degrade(&clean, p, 1).unwrap(), &clean, 1.0).unwrap().rank().unwrap())
            .collect();
        for w in ranks.windows(2) {
            assert!(w[1] < w[0], "{ranks:?}");
        }
    }

    #[test]
    fn dataset_counts_and_manifest_round_trip() {
        let specs: Vec<PhantomSpec> = (0..10).map(|s| PhantomSpec::strokes(16, 2, s)).collect();
        let presets = &LASER_LADDER[1..4];
        let data = build_dataset(&specs, presets, 7).unwrap();
        assert_eq!(data.len(), 30);
        assert!(data.pairs.iter().all(|p| p.noisy.same_dims(&p.clean)));

        let mut specs = specs;
        specs.push(PhantomSpec::depth_targets(0.03, 1));
        specs.push(PhantomSpec::letters("UCSD", 32, 64, 2));
        let m = Manifest::cartesian(&specs, presets, 7);
        let parsed = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.build().unwrap(), m.build().unwrap());
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let err = Manifest::parse("\nscene=strokes height=8").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let ok = "scene=strokes height=8 width=8 spacing_mm=0.1 scene_seed=1 frame=0 count=1 width_px=2 intensity=1 preset=0.25mJ seed=3";
        assert!(Manifest::parse(ok).is_ok());
        assert!(Manifest::parse(&format!("{ok} bogus=1")).is_err());
        assert!(Manifest::parse(&format!("{ok} alpha=0.5")).is_err());
    }
}
