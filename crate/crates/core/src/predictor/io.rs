//! Binary weight files.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic      8 bytes   "TPMLPW\0\0"
//! version    u32       1
//! scaling    u32       0 = raw features, 1 = log features
//! layers     u32       number of affine layers
//! per layer:
//!   rows     u32       inputs
//!   cols     u32       outputs
//!   weight   rows*cols f64, row-major
//!   bias     cols f64
//! ```
//!
//! The file must end exactly after the last layer.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::features::FeatureScaling;
use super::mlp::{Dense, MlpWeights};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"TPMLPW\0\0";
pub const WEIGHTS_VERSION: u32 = 1;

/// Upper bound on any layer dimension, to reject garbage before allocating.
const MAX_DIM: u32 = 1 << 16;

pub fn encode_weights(w: &MlpWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + w.num_parameters() * 8 + w.layers.len() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&w.scaling.code().to_le_bytes());
    out.extend_from_slice(&(w.layers.len() as u32).to_le_bytes());
    for l in &w.layers {
        out.extend_from_slice(&(l.weight.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.weight.ncols() as u32).to_le_bytes());
        for v in l.weight.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in l.bias.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptWeights {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.buf.len())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_weights(buf: &[u8], path: &str) -> Result<MlpWeights> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != WEIGHTS_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let code = r.u32()?;
    let scaling = FeatureScaling::from_code(code).ok_or_else(|| r.corrupt(format!("unknown scaling {code}")))?;
    let n_layers = r.u32()?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(r.corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers as usize);
    for i in 0..n_layers {
        let rows = r.u32()?;
        let cols = r.u32()?;
        if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
            return Err(r.corrupt(format!("layer {i} has shape {rows}x{cols}")));
        }
        let (rows, cols) = (rows as usize, cols as usize);
        let weight = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?).expect("shape matches length");
        let bias = Array1::from(r.f64s(cols)?);
        layers.push(Dense { weight, bias });
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let w = MlpWeights { layers, scaling };
    w.validate().map_err(|e| r.corrupt(e.to_string()))?;
    Ok(w)
}

pub fn save_weights(w: &MlpWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<MlpWeights> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&buf, &path.display().to_string())
}
