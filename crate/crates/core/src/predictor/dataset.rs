//! Measured-latency samples used for training.
//!
//! One record per line: `op,dims,gpu,latency_seconds[,dtype]`, e.g.
//! `bmm,4-512-64-512,V100,1.25e-4`. `dtype` defaults to `fp32`. Blank
//! lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::{Dtype, OpType};
use crate::tiledb::{dash_join, parse_dashed};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub op_type: OpType,
    pub dims: Vec<u64>,
    pub gpu_name: String,
    pub measured_latency: f64,
    pub dtype: Dtype,
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::parse(path, i + 1, m);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(4..=5).contains(&f.len()) {
            return Err(err(format!("expected 4 or 5 fields, found {}", f.len())));
        }
        let op_type: OpType = f[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let dims = parse_dashed(f[1]).map_err(|m| err(format!("dims: {m}")))?;
        let measured_latency: f64 = f[3]
            .parse()
            .map_err(|_| err(format!("latency `{}` is not a number", f[3])))?;
        if !(measured_latency > 0.0 && measured_latency.is_finite()) {
            return Err(err(format!("latency must be positive, got {}", f[3])));
        }
        let dtype = match f.get(4) {
            Some(d) if !d.is_empty() => d.parse().map_err(|e: Error| err(e.to_string()))?,
            _ => Dtype::Fp32,
        };
        out.push(TrainSample {
            op_type,
            dims,
            gpu_name: f[2].to_string(),
            measured_latency,
            dtype,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn dataset_to_string(samples: &[TrainSample]) -> String {
    let mut out = String::from("# op,dims,gpu,latency_seconds,dtype\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{}",
            s.op_type.name(),
            dash_join(&s.dims),
            s.gpu_name,
            s.measured_latency,
            s.dtype
        );
    }
    out
}

pub fn save_dataset(samples: &[TrainSample], path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(samples)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "# header\nbmm,4-512-64-512,V100,1.25e-4\nsoftmax,4096-1024,H100,3e-5,fp16\n";
        let s = parse_dataset(text, Path::new("d")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].dims, vec![4, 512, 64, 512]);
        assert_eq!(s[1].dtype, Dtype::Fp16);
        let back = parse_dataset(&dataset_to_string(&s), Path::new("d")).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_nonpositive_latency() {
        let err = parse_dataset("bmm,1-1-1-1,V100,0\n", Path::new("d")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
