//! Synthetic ground truth.
//!
//! A fake GPU whose kernel latencies follow the utilization law exactly,
//! with `alpha` and `beta` given by fixed logistic functions of the log of
//! two tile features. Used to generate training data and to check that the
//! learning pipeline recovers a known surface.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::GpuSpec;
use crate::error::{Error, Result};
use crate::kernel::{
    describe_kernel, Dtype, ElementwiseKind, KernelDesc, OpFamily, OpType, TileShape,
};
use crate::numeric::sigmoid;
use crate::predictor::{analyze, KernelPrediction, LatencyModel, TileAnalysis, TrainSample, UtilCoeffs};
use crate::tiledb::TileDb;

pub const DEFAULT_ORACLE: &str = include_str!("../oracle/default.toml");
pub const ORACLE_FORMAT_VERSION: u32 = 1;

/// `sigmoid(bias + log_f1 * ln f1 + log_f3 * ln f3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Logistic {
    pub bias: f64,
    pub log_f1: f64,
    pub log_f3: f64,
}

impl Logistic {
    pub const fn constant(logit: f64) -> Self {
        Logistic {
            bias: logit,
            log_f1: 0.0,
            log_f3: 0.0,
        }
    }

    pub fn eval(&self, f1: f64, f3: f64) -> f64 {
        sigmoid(self.bias + self.log_f1 * safe_ln(f1) + self.log_f3 * safe_ln(f3))
    }
}

fn safe_ln(x: f64) -> f64 {
    x.max(1e-30).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub format_version: u32,
    pub noise_sigma: f64,
    pub alpha: Logistic,
    pub beta: Logistic,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self::parse(DEFAULT_ORACLE, Path::new("<builtin oracle>")).expect("builtin oracle config is valid")
    }
}

impl OracleSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let spec: OracleSpec = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::parse(path, line, e.message())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != ORACLE_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "oracle format_version {} is not supported (expected {ORACLE_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        let finite = |l: &Logistic| [l.bias, l.log_f1, l.log_f3].iter().all(|v| v.is_finite());
        if !finite(&self.alpha) || !finite(&self.beta) {
            return Err(Error::InvalidConfig("oracle coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn with_noise(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    pub fn coeffs(&self, a: &TileAnalysis) -> UtilCoeffs {
        let (f1, f3) = (a.features.f1(), a.features.f3());
        UtilCoeffs {
            alpha: self.alpha.eval(f1, f3),
            beta: self.beta.eval(f1, f3),
        }
    }

    /// Latency without noise.
    pub fn clean_latency(&self, k: &KernelDesc, tile: TileShape, gpu: &GpuSpec) -> Result<f64> {
        let a = analyze(k, tile, gpu)?;
        Ok(KernelPrediction::from_coeffs(&a, self.coeffs(&a))?.latency)
    }

    /// Latency times `exp(noise_sigma * z)`, with `z` drawn from `seed`.
    pub fn latency(&self, k: &KernelDesc, tile: TileShape, gpu: &GpuSpec, seed: u64) -> Result<f64> {
        let clean = self.clean_latency(k, tile, gpu)?;
        Ok(clean * self.noise_factor(seed))
    }

    pub fn noise_factor(&self, seed: u64) -> f64 {
        if self.noise_sigma == 0.0 {
            return 1.0;
        }
        let z: f64 = ChaCha8Rng::seed_from_u64(seed).sample(StandardNormal);
        (self.noise_sigma * z).exp()
    }
}

/// Inclusive integer range, sampled log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimRange {
    pub min: u64,
    pub max: u64,
}

impl DimRange {
    pub const fn new(min: u64, max: u64) -> Self {
        DimRange { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> u64 {
        let lo = (self.min as f64).ln();
        let hi = ((self.max + 1) as f64).ln();
        let v = rng.random_range(lo..hi).exp().floor() as u64;
        v.clamp(self.min, self.max)
    }
}

/// Per-dimension ranges for one operator family, in the dims order of
/// that family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRanges {
    pub family: OpFamily,
    pub dims: Vec<DimRange>,
}

impl OpRanges {
    /// Ranges used for the training datasets of each family.
    pub fn default_for(family: OpFamily) -> Self {
        let dims = match family {
            OpFamily::Bmm => vec![DimRange::new(1, 1024); 4],
            OpFamily::Fc => vec![
                DimRange::new(1, 8192),
                DimRange::new(1, 65536),
                DimRange::new(1, 65536),
            ],
            OpFamily::Elementwise => vec![DimRange::new(512, 16384), DimRange::new(512, 4096)],
            OpFamily::Softmax | OpFamily::LayerNorm => {
                vec![DimRange::new(4096, 16384), DimRange::new(512, 4096)]
            }
        };
        OpRanges { family, dims }
    }

    pub fn validate(&self) -> Result<()> {
        let rank = Self::default_for(self.family).dims.len();
        if self.dims.len() != rank {
            return Err(Error::RankMismatch {
                what: format!("{} ranges", self.family),
                expected: rank,
                actual: self.dims.len(),
            });
        }
        for (i, r) in self.dims.iter().enumerate() {
            if r.min == 0 || r.min > r.max {
                return Err(Error::EmptyRange(format!(
                    "{} dim {i}: [{}, {}]",
                    self.family, r.min, r.max
                )));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> (OpType, Vec<u64>) {
        let op = match self.family {
            OpFamily::Bmm => OpType::Bmm,
            OpFamily::Fc => OpType::Fc,
            OpFamily::Elementwise => {
                let kinds = ElementwiseKind::ALL;
                OpType::Elementwise(kinds[rng.random_range(0..kinds.len())])
            }
            OpFamily::Softmax => OpType::Softmax,
            OpFamily::LayerNorm => OpType::LayerNorm,
        };
        (op, self.dims.iter().map(|r| r.sample(rng)).collect())
    }
}

/// `n` samples labelled by the oracle. GPUs are assigned round-robin; every
/// random choice derives from `seed`.
pub fn generate_dataset(
    ranges: &OpRanges,
    oracle: &OracleSpec,
    gpus: &[GpuSpec],
    tiledb: &TileDb,
    dtype: Dtype,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    ranges.validate()?;
    oracle.validate()?;
    if n > 0 && gpus.is_empty() {
        return Err(Error::InvalidConfig("no GPUs to generate data for".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let gpu = &gpus[i % gpus.len()];
        let (op_type, dims) = ranges.draw(&mut rng);
        let noise_seed: u64 = rng.random();
        let k = describe_kernel(op_type.clone(), &dims, dtype)?;
        let tile = tiledb.lookup_tile(&op_type, &dims, gpu);
        let measured_latency = oracle.latency(&k, tile, gpu, noise_seed)?;
        out.push(TrainSample {
            op_type,
            dims,
            gpu_name: gpu.name.clone(),
            measured_latency,
            dtype,
        });
    }
    Ok(out)
}

/// The oracle without noise, usable wherever a trained predictor is.
#[derive(Debug, Clone, Copy)]
pub struct OracleModel<'a> {
    pub spec: &'a OracleSpec,
    pub tiledb: &'a TileDb,
}

impl LatencyModel for OracleModel<'_> {
    fn predict_kernel(&self, k: &KernelDesc, gpu: &GpuSpec) -> Result<KernelPrediction> {
        if k.op_type.family().is_none() {
            return Ok(KernelPrediction::memory_bound(k, gpu));
        }
        let tile = self.tiledb.lookup_tile(&k.op_type, &k.dims, gpu);
        let a = analyze(k, tile, gpu)?;
        KernelPrediction::from_coeffs(&a, self.spec.coeffs(&a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;

    #[test]
    fn builtin_config_parses() {
        let s = OracleSpec::default();
        assert_eq!(s.noise_sigma, 0.03);
        assert!(s.alpha.bias > s.beta.bias);
    }

    #[test]
    fn constant_functions_saturate_to_alpha() {
        let spec = OracleSpec {
            format_version: 1,
            noise_sigma: 0.0,
            alpha: Logistic::constant(1.0),
            beta: Logistic::constant(-3.0),
        };
        let gpu = Catalog::builtin().get("V100").unwrap().clone();
        let k = describe_kernel(OpType::Bmm, &[1024, 1024, 64, 1024], Dtype::Fp32).unwrap();
        let a = analyze(&k, TileShape(vec![1, 16, 16]), &gpu).unwrap();
        assert!(a.plan.num_waves > 10_000);
        let c = spec.coeffs(&a);
        let u = crate::predictor::utilization(&c, a.plan.num_waves);
        assert!((u - 0.731).abs() < 1e-3, "{u}");
    }

    #[test]
    fn same_seed_same_draw() {
        let s = OracleSpec::default();
        assert_eq!(s.noise_factor(11).to_bits(), s.noise_factor(11).to_bits());
        assert_ne!(s.noise_factor(11), s.noise_factor(12));
        assert_eq!(s.clone().with_noise(0.0).noise_factor(11), 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = DEFAULT_ORACLE.replace("format_version = 1", "format_version = 2");
        assert!(OracleSpec::parse(&bad, Path::new("o")).is_err());
        let neg = DEFAULT_ORACLE.replace("noise_sigma = 0.03", "noise_sigma = -1.0");
        assert!(OracleSpec::parse(&neg, Path::new("o")).is_err());
        let typo = DEFAULT_ORACLE.replace("log_f3 = -0.08", "log_f4 = -0.08");
        assert!(matches!(OracleSpec::parse(&typo, Path::new("o")), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_range_rejected() {
        let mut r = OpRanges::default_for(OpFamily::Bmm);
        r.dims[2] = DimRange::new(5, 4);
        let gpus = Catalog::builtin().gpus().to_vec();
        let e = generate_dataset(&r, &OracleSpec::default(), &gpus, &TileDb::new(), Dtype::Fp32, 3, 0);
        assert!(matches!(e, Err(Error::EmptyRange(_))));
    }

    #[test]
    fn zero_samples_is_empty() {
        let r = OpRanges::default_for(OpFamily::Fc);
        let d = generate_dataset(&r, &OracleSpec::default(), &[], &TileDb::new(), Dtype::Fp32, 0, 0).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn log_uniform_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = DimRange::new(3, 9);
        let mut seen = [false; 10];
        for _ in 0..2000 {
            let v = r.sample(&mut rng);
            assert!((3..=9).contains(&v));
            seen[v as usize] = true;
        }
        assert!(seen[3..=9].iter().all(|&s| s));
    }
}
