//! `.apmg` model files.
//!
//! Layout (all little-endian): magic `APMG`, `u32` version, config
//! (`M, C, D, H, W` as `u32`, seed as `u64`), transforms (`M × 16` f32,
//! row-major), grids, `W1`, `W2`, `W3`, `vmin`, `vmax`, `p` (`u32`).

use std::fs;
use std::path::Path;

use super::{ApmgModel, Decoder, FeatureGrids, GridTransform, ModelConfig, HIDDEN};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"APMG";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes(model: &ApmgModel<f32>) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(64 + 4 * cfg.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [
        cfg.grids,
        cfg.channels,
        cfg.resolution[0],
        cfg.resolution[1],
        cfg.resolution[2],
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    let mut put = |vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for g in &model.transforms {
        for row in &g.m {
            put(row);
        }
    }
    put(&model.grids.data);
    put(&model.decoder.w1);
    put(&model.decoder.w2);
    put(&model.decoder.w3);
    put(&[model.vmin, model.vmax]);
    out.extend_from_slice(&cfg.flat_top_p.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ApmgModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let seed = r.u64("config")?;
    let mut config = ModelConfig::new(dims[0], dims[1], [dims[2], dims[3], dims[4]]);
    config.seed = seed;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let m = config.grids;
    let tvals = r.f32s(16 * m, "transforms")?;
    let transforms = tvals
        .chunks_exact(16)
        .map(|c| {
            let mut t = GridTransform { m: [[0.0f32; 4]; 4] };
            for (row, vals) in t.m.iter_mut().zip(c.chunks_exact(4)) {
                row.copy_from_slice(vals);
            }
            t
        })
        .collect();
    let grids = r.f32s(m * config.grid_len(), "grids")?;
    let inp = config.feature_len();
    let w1 = r.f32s(HIDDEN * inp, "w1")?;
    let w2 = r.f32s(HIDDEN * HIDDEN, "w2")?;
    let w3 = r.f32s(HIDDEN, "w3")?;
    let range = r.f32s(2, "range")?;
    config.flat_top_p = r.u32("flat_top_p")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ApmgModel {
        grids: FeatureGrids {
            grids: m,
            channels: config.channels,
            resolution: config.resolution,
            data: grids,
        },
        config,
        transforms,
        decoder: Decoder {
            input: inp,
            w1,
            w2,
            w3,
        },
        vmin: range[0],
        vmax: range[1],
    })
}

pub fn save_model(model: &ApmgModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ApmgModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
