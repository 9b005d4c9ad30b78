//! Image quality metrics: PSNR, global SSIM and multi-ROI CNR.
//!
//! All statistics are population statistics (divide by the pixel count) and
//! accumulate in `f64`.
//!
//! SSIM here is the single-window form computed from whole-image means,
//! variances and covariance. It is *not* the sliding-window SSIM most
//! libraries report, and the two give different numbers.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_I_MAX: f64 = 1.0;
pub const DEFAULT_K1: f64 = 1e-4;
pub const DEFAULT_K2: f64 = 9e-4;

/// A decibel value that may be infinite (PSNR of identical images) or
/// undefined (CNR with non-positive contrast or zero background noise).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decibels {
    Finite(f64),
    Infinite,
    Undefined,
}

impl Decibels {
    pub fn value(self) -> Option<f64> {
        match self {
            Decibels::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// Ordering key where infinite sorts above every finite value.
    pub fn rank(self) -> Option<f64> {
        match self {
            Decibels::Finite(v) => Some(v),
            Decibels::Infinite => Some(f64::INFINITY),
            Decibels::Undefined => None,
        }
    }
}

impl fmt::Display for Decibels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decibels::Finite(v) => write!(f, "{v:.6}"),
            Decibels::Infinite => f.write_str("inf"),
            Decibels::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoiRole {
    Object,
    Background,
}

impl FromStr for RoiRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "object" | "obj" => Ok(RoiRole::Object),
            "background" | "bg" => Ok(RoiRole::Background),
            other => Err(Error::Roi(format!("unknown role {other:?}"))),
        }
    }
}

impl fmt::Display for RoiRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoiRole::Object => "object",
            RoiRole::Background => "background",
        })
    }
}

/// Rectangle in pixel coordinates; `(row, col)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub role: RoiRole,
}

impl Roi {
    pub fn new(row: usize, col: usize, height: usize, width: usize, role: RoiRole) -> Self {
        Roi {
            row,
            col,
            height,
            width,
            role,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn check_bounds(&self, image: &Image) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::Roi(format!("{self:?} has zero area")));
        }
        if self.row + self.height > image.height() || self.col + self.width > image.width() {
            return Err(Error::Roi(format!(
                "{} roi at ({}, {}) size {}x{} exceeds {}x{} image",
                self.role,
                self.row,
                self.col,
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn pixels<'a>(&'a self, image: &'a Image) -> impl Iterator<Item = f64> + 'a {
        (self.row..self.row + self.height).flat_map(move |r| (self.col..self.col + self.width).map(move |c| f64::from(image.get(r, c))))
    }

    /// Population mean and standard deviation of the pixels inside.
    pub fn stats(&self, image: &Image) -> Result<(f64, f64)> {
        self.check_bounds(image)?;
        let n = self.area() as f64;
        let mean = self.pixels(image).sum::<f64>() / n;
        let var = self.pixels(image).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    }
}

fn check_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            op,
            format!("{}x{}", b.height(), b.width()),
            format!("{}x{}", a.height(), a.width()),
        ));
    }
    Ok(())
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

pub fn mse(output: &Image, ground_truth: &Image) -> Result<f64> {
    check_dims("mse", output, ground_truth)?;
    let n = output.data().len() as f64;
    Ok(output
        .data()
        .iter()
        .zip(ground_truth.data())
        .map(|(&o, &g)| {
            let d = f64::from(g) - f64::from(o);
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `20 log10(i_max / sqrt(MSE))`; infinite when the images are identical.
pub fn psnr(output: &Image, ground_truth: &Image, i_max: f64) -> Result<Decibels> {
    let m = mse(output, ground_truth)?;
    if m == 0.0 {
        return Ok(Decibels::Infinite);
    }
    Ok(Decibels::Finite(20.0 * (i_max / m.sqrt()).log10()))
}

/// Global single-window SSIM with stabilizers `k1`, `k2` added directly to
/// the luminance and contrast-structure terms.
pub fn ssim(output: &Image, ground_truth: &Image, k1: f64, k2: f64) -> Result<f64> {
    check_dims("ssim", output, ground_truth)?;
    let (a, b) = (output.data(), ground_truth.data());
    let n = a.len() as f64;
    let (mu_a, mu_b) = (mean(a), mean(b));
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let da = f64::from(x) - mu_a;
        let db = f64::from(y) - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    let (var_a, var_b, cov) = (var_a / n, var_b / n, cov / n);
    let num = (2.0 * mu_b * mu_a + k1) * (2.0 * cov + k2);
    let den = (mu_b * mu_b + mu_a * mu_a + k1) * (var_b + var_a + k2);
    Ok(num / den)
}

/// Contrast-to-noise ratio in dB over several object and background ROIs.
///
/// The object and background levels are the means of the per-ROI means; the
/// noise level is the mean of the per-background-ROI standard deviations.
pub fn cnr(image: &Image, object_rois: &[Roi], background_rois: &[Roi]) -> Result<Decibels> {
    if object_rois.is_empty() || background_rois.is_empty() {
        return Err(Error::Roi("cnr needs at least one object and one background roi".into()));
    }
    let mut mu_obj = 0.0;
    for roi in object_rois {
        mu_obj += roi.stats(image)?.0;
    }
    mu_obj /= object_rois.len() as f64;
    let (mut mu_bg, mut sigma_bg) = (0.0, 0.0);
    for roi in background_rois {
        let (m, s) = roi.stats(image)?;
        mu_bg += m;
        sigma_bg += s;
    }
    mu_bg /= background_rois.len() as f64;
    sigma_bg /= background_rois.len() as f64;

    let contrast = mu_obj - mu_bg;
    if contrast <= 0.0 || sigma_bg <= 0.0 || !contrast.is_finite() || !sigma_bg.is_finite() {
        return Ok(Decibels::Undefined);
    }
    Ok(Decibels::Finite(20.0 * (contrast / sigma_bg).log10()))
}

/// Converts ROIs given by centre and size in millimetres to pixel ROIs.
///
/// Sizes round to the nearest pixel with a 1x1 minimum; the top-left corner
/// is the rounded centre minus half the size.
pub fn rois_from_physical(image: &Image, centers_mm: &[(f64, f64)], size_mm: (f64, f64), role: RoiRole) -> Result<Vec<Roi>> {
    let spacing = f64::from(image.spacing_mm());
    if spacing <= 0.0 {
        return Err(Error::Roi("image has no positive pixel spacing".into()));
    }
    let to_px = |mm: f64| ((mm / spacing).round() as usize).max(1);
    let (h, w) = (to_px(size_mm.0), to_px(size_mm.1));
    centers_mm
        .iter()
        .map(|&(row_mm, col_mm)| {
            let cr = (row_mm / spacing).round();
            let cc = (col_mm / spacing).round();
            let top = cr - (h / 2) as f64;
            let left = cc - (w / 2) as f64;
            let oob = || {
                Error::Roi(format!(
                    "{role} roi centred at ({row_mm} mm, {col_mm} mm) of size {}x{} mm falls outside the {}x{} image",
                    size_mm.0,
                    size_mm.1,
                    image.height(),
                    image.width()
                ))
            };
            if top < 0.0 || left < 0.0 || !top.is_finite() || !left.is_finite() {
                return Err(oob());
            }
            let roi = Roi::new(top as usize, left as usize, h, w, role);
            roi.check_bounds(image).map_err(|_| oob())?;
            Ok(roi)
        })
        .collect()
}

/// One ROI line: `role, center_row_mm, center_col_mm, h_mm, w_mm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalRoi {
    pub role: RoiRole,
    pub center_mm: (f64, f64),
    pub size_mm: (f64, f64),
}

/// Parses an ROI spec file; blank lines and `#` comments are skipped.
pub fn parse_roi_spec(text: &str) -> Result<Vec<PhysicalRoi>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 comma-separated fields, found {}", fields.len())));
        }
        let role: RoiRole = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let roi = PhysicalRoi {
            role,
            center_mm: (num(fields[1])?, num(fields[2])?),
            size_mm: (num(fields[3])?, num(fields[4])?),
        };
        if roi.size_mm.0 <= 0.0 || roi.size_mm.1 <= 0.0 {
            return Err(err("roi size must be positive".into()));
        }
        out.push(roi);
    }
    Ok(out)
}

/// Resolves parsed ROI lines against an image, split by role.
pub fn resolve_rois(image: &Image, rois: &[PhysicalRoi]) -> Result<(Vec<Roi>, Vec<Roi>)> {
    let (mut obj, mut bg) = (Vec::new(), Vec::new());
    for r in rois {
        let px = rois_from_physical(image, &[r.center_mm], r.size_mm, r.role)?;
        match r.role {
            RoiRole::Object => obj.extend(px),
            RoiRole::Background => bg.extend(px),
        }
    }
    Ok((obj, bg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConstants {
    pub i_max: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricConstants {
    fn default() -> Self {
        MetricConstants {
            i_max: DEFAULT_I_MAX,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub psnr_db: Option<Decibels>,
    pub ssim: Option<f64>,
    pub cnr_db: Option<Decibels>,
    pub constants: MetricConstants,
    pub rois: Vec<Roi>,
}

pub fn clamp_unit(image: &Image) -> Image {
    image.map(|v| v.clamp(0.0, 1.0))
}

/// PSNR and SSIM of a model output against its ground truth. The output is
/// clamped to `[0, 1]` first.
pub fn evaluate_pair(label: &str, output: &Image, ground_truth: &Image, constants: MetricConstants) -> Result<MetricReport> {
    let out = clamp_unit(output);
    Ok(MetricReport {
        label: label.to_string(),
        psnr_db: Some(psnr(&out, ground_truth, constants.i_max)?),
        ssim: Some(ssim(&out, ground_truth, constants.k1, constants.k2)?),
        cnr_db: None,
        constants,
        rois: Vec::new(),
    })
}

/// CNR of a single frame; no ground truth needed.
pub fn evaluate_cnr(label: &str, image: &Image, objects: &[Roi], backgrounds: &[Roi], constants: MetricConstants) -> Result<MetricReport> {
    Ok(MetricReport {
        label: label.to_string(),
        psnr_db: None,
        ssim: None,
        cnr_db: Some(cnr(image, objects, backgrounds)?),
        constants,
        rois: objects.iter().chain(backgrounds).copied().collect(),
    })
}

/// PSNR/SSIM restricted to labelled sub-regions (one per letter, say).
pub fn evaluate_regions(
    output: &Image,
    ground_truth: &Image,
    regions: &[(String, Roi)],
    constants: MetricConstants,
) -> Result<Vec<MetricReport>> {
    check_dims("evaluate_regions", output, ground_truth)?;
    regions
        .iter()
        .map(|(label, roi)| {
            let mut r = evaluate_pair(label, &output.crop(roi)?, &ground_truth.crop(roi)?, constants)?;
            r.rois.push(*roi);
            Ok(r)
        })
        .collect()
}

pub const CSV_HEADER: &str = "label,psnr_db,ssim,cnr_db,i_max,k1,k2,rois";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let opt = |d: Option<Decibels>| d.map(|v| v.to_string()).unwrap_or_default();
        let rois: Vec<String> = self
            .rois
            .iter()
            .map(|r| format!("{}:{}:{}:{}:{}", r.role, r.row, r.col, r.height, r.width))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.label,
            opt(self.psnr_db),
            self.ssim.map(|s| format!("{s:.6}")).unwrap_or_default(),
            opt(self.cnr_db),
            self.constants.i_max,
            self.constants.k1,
            self.constants.k2,
            rois.join(";")
        )
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn reports_to_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:>12}  {:>10}  {:>12}\n", "label", "PSNR (dB)", "SSIM", "CNR (dB)");
    let dash = |d: Option<Decibels>| d.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    for r in reports {
        s.push_str(&format!(
            "{:<width$}  {:>12}  {:>10}  {:>12}\n",
            r.label,
            dash(r.psnr_db),
            r.ssim.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            dash(r.cnr_db)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: Vec<f32>) -> Image {
        Image::new(h, w, 0.1, data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = img(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Decibels::Infinite);

        let gt = Image::zeros(4, 4, 0.1).unwrap();
        let out = Image::new(4, 4, 0.1, vec![0.1; 16]).unwrap();
        let v = psnr(&out, &gt, 1.0).unwrap().value().unwrap();
        assert!((v - 20.0).abs() < 1e-6, "{v}");
        assert!(psnr(&a, &gt, 1.0).is_err());
    }

    #[test]
    fn psnr_is_sign_symmetric() {
        let gt = img(2, 2, vec![0.5, 0.25, 0.75, 0.5]);
        let plus = gt.map(|v| v + 0.125);
        let minus = gt.map(|v| v - 0.125);
        assert_eq!(psnr(&plus, &gt, 1.0).unwrap(), psnr(&minus, &gt, 1.0).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let a = img(2, 2, vec![0.1, 0.9, 0.4, 0.3]);
        assert_eq!(ssim(&a, &a, DEFAULT_K1, DEFAULT_K2).unwrap(), 1.0);

        let x = img(2, 2, vec![1.0, -1.0, 1.0, -1.0]);
        let neg = x.map(|v| -v);
        let s = ssim(&x, &neg, DEFAULT_K1, DEFAULT_K2).unwrap();
        // means 0, var 1, cov -1: (k1)(-2 + k2) / (k1 (2 + k2))
        let want = (-2.0 + DEFAULT_K2) / (2.0 + DEFAULT_K2);
        assert!(s < 0.0);
        assert!((s - want).abs() < 1e-12);

        let b = img(2, 2, vec![0.3, 0.2, 0.8, 0.1]);
        assert_eq!(
            ssim(&a, &b, DEFAULT_K1, DEFAULT_K2).unwrap(),
            ssim(&b, &a, DEFAULT_K1, DEFAULT_K2).unwrap()
        );
    }

    #[test]
    fn cnr_hand_case() {
        // background alternates 0/2: mean 1, population std 1
        let mut im = Image::zeros(4, 8, 0.1).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                im.set(r, c, 10.0);
            }
            for c in 4..8 {
                im.set(r, c, if (r + c) % 2 == 0 { 0.0 } else { 2.0 });
            }
        }
        let obj = [Roi::new(0, 0, 4, 4, RoiRole::Object)];
        let bg = [Roi::new(0, 4, 4, 4, RoiRole::Background)];
        let v = cnr(&im, &obj, &bg).unwrap().value().unwrap();
        assert!((v - 20.0 * 9f64.log10()).abs() < 1e-12);
        assert!((v - 19.085).abs() < 1e-3);

        let shifted = im.map(|p| p + 3.0);
        let w = cnr(&shifted, &obj, &bg).unwrap().value().unwrap();
        assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn cnr_undefined_cases() {
        let flat = Image::new(2, 4, 0.1, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let obj = [Roi::new(0, 0, 2, 2, RoiRole::Object)];
        let bg = [Roi::new(0, 2, 2, 2, RoiRole::Background)];
        assert_eq!(cnr(&flat, &obj, &bg).unwrap(), Decibels::Undefined);

        let noiseless = Image::new(1, 2, 0.1, vec![5.0, 1.0]).unwrap();
        let obj = [Roi::new(0, 0, 1, 1, RoiRole::Object)];
        let bg = [Roi::new(0, 1, 1, 1, RoiRole::Background)];
        assert_eq!(cnr(&noiseless, &obj, &bg).unwrap(), Decibels::Undefined);
        assert!(cnr(&noiseless, &[], &bg).is_err());
        assert!(cnr(&noiseless, &[Roi::new(0, 1, 1, 2, RoiRole::Object)], &bg).is_err());
    }

    #[test]
    fn physical_rois() {
        let im = Image::zeros(100, 100, 0.1).unwrap();
        let r = rois_from_physical(&im, &[(5.0, 5.0)], (1.0, 1.0), RoiRole::Object).unwrap();
        assert_eq!((r[0].height, r[0].width), (10, 10));
        assert_eq!((r[0].row, r[0].col), (45, 45));
        let r = rois_from_physical(&im, &[(5.0, 5.0)], (3.0, 3.0), RoiRole::Background).unwrap();
        assert_eq!((r[0].height, r[0].width), (30, 30));
        let r = rois_from_physical(&im, &[(5.0, 5.0)], (0.01, 0.02), RoiRole::Object).unwrap();
        assert_eq!((r[0].height, r[0].width), (1, 1));
        let err = rois_from_physical(&im, &[(9.9, 5.0)], (3.0, 3.0), RoiRole::Background).unwrap_err();
        assert!(err.to_string().contains("9.9 mm"), "{err}");
    }

    #[test]
    fn roi_spec_parsing() {
        let text = "# role, row, col, h, w\nobject, 2.5, 16, 1, 1\n\nbackground,2.5,4,3,3 # left\n";
        let rois = parse_roi_spec(text).unwrap();
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[1].role, RoiRole::Background);
        assert_eq!(rois[1].size_mm, (3.0, 3.0));
        assert!(matches!(parse_roi_spec("object, 1, 2, 3"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_roi_spec("\nthing, 1, 2, 3, 4"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn report_formats() {
        let a = img(2, 2, vec![0.1, 0.9, 0.4, 0.3]);
        let r = evaluate_pair("U", &a, &a, MetricConstants::default()).unwrap();
        assert!(r.csv_row().starts_with("U,inf,1.000000,,1,"));
        let table = reports_to_table(&[r]);
        assert!(table.contains("inf"));
    }

    #[test]
    fn evaluate_pair_clamps_output() {
        let gt = img(1, 2, vec![0.0, 1.0]);
        let out = img(1, 2, vec![-0.5, 1.5]);
        assert_eq!(
            evaluate_pair("x", &out, &gt, MetricConstants::default()).unwrap().psnr_db,
            Some(Decibels::Infinite)
        );
    }
}
