//! Single-channel images with physical pixel spacing, and their file formats.
//!
//! `PAIF` frame layout (all little-endian):
//!
//! ```text
//! "PAIF" | u32 version | u32 height | u32 width | f32 spacing_mm | f32 * height*width
//! ```
//!
//! `PAIV` volumes stack frames along a new leading axis:
//!
//! ```text
//! "PAIV" | u32 version | u32 frames | u32 height | u32 width | f32 spacing_mm | f32 * frames*height*width
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Roi;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"PAIF";
pub const VOLUME_MAGIC: &[u8; 4] = b"PAIV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    spacing_mm: f32,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, spacing_mm: f32, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Format(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(Error::Format(format!("pixel spacing must be > 0, got {spacing_mm}")));
        }
        Ok(Image {
            height,
            width,
            spacing_mm,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, spacing_mm: f32) -> Result<Self> {
        Image::new(height, width, spacing_mm, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing_mm(&self) -> f32 {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the pixels inside `roi`; the ROI must be in bounds.
    pub fn crop(&self, roi: &Roi) -> Result<Image> {
        roi.check_bounds(self)?;
        let mut data = Vec::with_capacity(roi.height * roi.width);
        for r in roi.row..roi.row + roi.height {
            data.extend_from_slice(&self.data[r * self.width + roi.col..r * self.width + roi.col + roi.width]);
        }
        Image::new(roi.height, roi.width, self.spacing_mm, data)
    }

    /// `(1, 1, h, w)` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.data.clone()).expect("dims match data")
    }

    /// Builds an image from one sample of a single-channel tensor.
    pub fn from_tensor(t: &Tensor<f32>, sample: usize, spacing_mm: f32) -> Result<Image> {
        let s = t.shape();
        if s.c != 1 || sample >= s.n {
            return Err(Error::shape("image from tensor", "single-channel sample", s));
        }
        Image::new(s.h, s.w, spacing_mm, t.sample(sample).to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.spacing_mm.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Image> {
        let mut r = Reader::new(bytes);
        r.magic(IMAGE_MAGIC)?;
        r.version()?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let spacing = r.f32()?;
        let data = r.f32s(height * width)?;
        r.finish()?;
        Image::new(height, width, spacing, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        Image::from_bytes(&fs::read(path)?)
    }

    /// 16-bit binary PGM of the image clamped to `[0, 1]`, for viewing only.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            f.write_all(&q.to_be_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Frames of identical size stacked into a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub frames: Vec<Image>,
}

impl Volume {
    pub fn new(frames: Vec<Image>) -> Result<Volume> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Format("volume needs at least one frame".into()))?;
        for (i, f) in frames.iter().enumerate() {
            if !f.same_dims(first) || f.spacing_mm != first.spacing_mm {
                return Err(Error::Format(format!(
                    "frame {i} is {}x{} @ {} mm, expected {}x{} @ {} mm",
                    f.height, f.width, f.spacing_mm, first.height, first.width, first.spacing_mm
                )));
            }
        }
        Ok(Volume { frames })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let first = &self.frames[0];
        let mut out = Vec::new();
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(first.height as u32).to_le_bytes());
        out.extend_from_slice(&(first.width as u32).to_le_bytes());
        out.extend_from_slice(&first.spacing_mm.to_le_bytes());
        for f in &self.frames {
            for v in &f.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        let mut r = Reader::new(bytes);
        r.magic(VOLUME_MAGIC)?;
        r.version()?;
        let frames = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let spacing = r.f32()?;
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push(Image::new(height, width, spacing, r.f32s(height * width)?)?);
        }
        r.finish()?;
        Volume::new(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
        Volume::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<u32> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(v)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
