//! `MWCK` checkpoint files.
//!
//! ```text
//! "MWCK"            magic
//! u32               format version
//! u32               levels
//! u32               convs_per_block
//! u32               input_channels
//! u8                residual (0 or 1)
//! u32 + u32 * n     channel schedule (count, then widths)
//! per layer         weights (c_out*c_in*9 f32) then bias (c_out f32), builder order
//! u64               byte length of everything above
//! u64               CRC-64/XZ of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::image::Reader;
use crate::model::{ModelConfig, ModelParams};
use crate::ops::ConvLayerParams;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MWCK";
pub const VERSION: u32 = 1;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    params.shape_walk()?;
    let cfg = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.levels, cfg.convs_per_block, cfg.input_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(u8::from(cfg.residual));
    out.extend_from_slice(&(cfg.channel_schedule.len() as u32).to_le_bytes());
    for &w in &cfg.channel_schedule {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for layer in &params.layers {
        for v in layer.weights.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let len = out.len() as u64;
    let sum = CHECKSUM.checksum(&out);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < 16 + MAGIC.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 16);
    let mut t = Reader::new(trailer);
    let len = t.u64()?;
    let sum = t.u64()?;

    let mut r = Reader::new(body);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if len != body.len() as u64 {
        return Err(Error::Format(format!("length record says {len} bytes, body has {}", body.len())));
    }
    let actual = CHECKSUM.checksum(body);
    if actual != sum {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {sum:#018x}, computed {actual:#018x}"
        )));
    }

    let levels = r.u32()? as usize;
    let convs_per_block = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let residual = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad residual flag {b}"))),
    };
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(Error::Format(format!("implausible schedule length {n}")));
    }
    let channel_schedule = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        levels,
        convs_per_block,
        channel_schedule,
        input_channels,
        residual,
    };
    config.validate()?;

    let mut layers = Vec::new();
    for spec in config.layer_specs() {
        let shape = Shape::new(spec.c_out, spec.c_in, 3, 3);
        let weights = Tensor::from_vec(shape, r.f32s(shape.len())?)?;
        let bias = r.f32s(spec.c_out)?;
        layers.push(ConvLayerParams::new(weights, bias)?);
    }
    if r.position() != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected bytes after the last layer",
            body.len() - r.position()
        )));
    }
    let params = ModelParams { config, layers };
    params.shape_walk()?;
    Ok(params)
}

pub fn save(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::desk();
        cfg.residual = true;
        let p = build_model(cfg, 4).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(&bytes[..4], b"MWCK");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let n = bytes.len();
        assert_eq!(u64::from_le_bytes(bytes[n - 16..n - 8].try_into().unwrap()), (n - 16) as u64);
    }

    #[test]
    fn detects_corruption() {
        let p = build_model(ModelConfig::desk(), 4).unwrap();
        let bytes = to_bytes(&p).unwrap();

        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes(&magic).unwrap_err().to_string().contains("magic"));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(from_bytes(&version).unwrap_err().to_string().contains("version"));

        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn rejects_layer_count_mismatch() {
        let mut p = build_model(ModelConfig::desk(), 4).unwrap();
        p.layers.pop();
        assert!(to_bytes(&p).is_err());
    }
}
