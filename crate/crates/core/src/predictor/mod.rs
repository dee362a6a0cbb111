//! Learned per-tile utilization and the kernel latency it implies.

pub mod dataset;
pub mod features;
pub mod io;
pub mod mlp;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

pub use dataset::TrainSample;
pub use features::{featurize, FeatureScaling, FeatureVector};
pub use mlp::{predict_coeffs, utilization, Architecture, MlpWeights, UtilCoeffs, UTIL_FLOOR};
pub use train::{train, TrainConfig, TrainOutcome};

use crate::catalog::GpuSpec;
use crate::error::{Error, Result};
use crate::kernel::{assemble_latency, memory_bound_latency, plan_tiles, roofline_bw_per_sm, KernelDesc, OpFamily, TileShape, WavePlan};
use crate::tiledb::TileDb;

/// Everything about a kernel's tiling on one GPU that does not need the network.
#[derive(Debug, Clone)]
pub struct TileAnalysis {
    pub tile: TileShape,
    pub plan: WavePlan,
    /// Per-SM roofline, the bound each tile runs against.
    pub roofline: f64,
    pub features: FeatureVector,
}

pub fn analyze(k: &KernelDesc, tile: TileShape, gpu: &GpuSpec) -> Result<TileAnalysis> {
    let plan = plan_tiles(k, &tile, gpu)?;
    let roofline = roofline_bw_per_sm(k, gpu);
    let features = featurize(&plan, gpu, k)?;
    Ok(TileAnalysis {
        tile,
        plan,
        roofline,
        features,
    })
}

/// Latency of one kernel plus the intermediate values that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPrediction {
    pub latency: f64,
    pub tile: Option<TileShape>,
    pub num_waves: Option<u64>,
    pub coeffs: Option<UtilCoeffs>,
    pub utilization: Option<f64>,
    pub memory_bound: bool,
}

impl KernelPrediction {
    pub fn memory_bound(k: &KernelDesc, gpu: &GpuSpec) -> Self {
        KernelPrediction {
            latency: memory_bound_latency(k, gpu),
            tile: None,
            num_waves: None,
            coeffs: None,
            utilization: None,
            memory_bound: true,
        }
    }

    pub fn from_coeffs(a: &TileAnalysis, coeffs: UtilCoeffs) -> Result<Self> {
        let util = utilization(&coeffs, a.plan.num_waves);
        Ok(KernelPrediction {
            latency: assemble_latency(&a.plan, a.roofline, util)?,
            tile: Some(a.tile.clone()),
            num_waves: Some(a.plan.num_waves),
            coeffs: Some(coeffs),
            utilization: Some(util),
            memory_bound: false,
        })
    }
}

/// Anything that can put a latency on a kernel.
pub trait LatencyModel {
    fn predict_kernel(&self, k: &KernelDesc, gpu: &GpuSpec) -> Result<KernelPrediction>;
}

/// One trained network per operator family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictorSet {
    nets: BTreeMap<OpFamily, MlpWeights>,
}

pub const WEIGHTS_EXTENSION: &str = "tpw";

impl PredictorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, family: OpFamily, weights: MlpWeights) {
        self.nets.insert(family, weights);
    }

    pub fn get(&self, family: OpFamily) -> Result<&MlpWeights> {
        self.nets
            .get(&family)
            .ok_or_else(|| Error::UntrainedOperator(family.as_str().to_string()))
    }

    pub fn families(&self) -> impl Iterator<Item = OpFamily> + '_ {
        self.nets.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    /// Write `<dir>/<family>.tpw` for every family present.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (family, w) in &self.nets {
            io::save_weights(w, &dir.join(format!("{}.{WEIGHTS_EXTENSION}", family.as_str())))?;
        }
        Ok(())
    }

    /// Load whichever family files exist in `dir`, or a single weight file
    /// named after its family.
    pub fn load(path: &Path) -> Result<Self> {
        let mut set = PredictorSet::new();
        if path.is_file() {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let family: OpFamily = stem.parse().map_err(|_| {
                Error::InvalidConfig(format!(
                    "cannot tell the operator family of {}; name it <family>.{WEIGHTS_EXTENSION}",
                    path.display()
                ))
            })?;
            set.insert(family, io::load_weights(path)?);
            return Ok(set);
        }
        if !path.is_dir() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        for family in OpFamily::ALL {
            let file = path.join(format!("{}.{WEIGHTS_EXTENSION}", family.as_str()));
            if file.exists() {
                set.insert(family, io::load_weights(&file)?);
            }
        }
        Ok(set)
    }
}

/// The learned model: tile lookup, wave plan, network coefficients.
#[derive(Debug, Clone, Copy)]
pub struct TilePredictor<'a> {
    pub predictors: &'a PredictorSet,
    pub tiledb: &'a TileDb,
}

impl LatencyModel for TilePredictor<'_> {
    fn predict_kernel(&self, k: &KernelDesc, gpu: &GpuSpec) -> Result<KernelPrediction> {
        let Some(family) = k.op_type.family() else {
            return Ok(KernelPrediction::memory_bound(k, gpu));
        };
        let net = self.predictors.get(family)?;
        let tile = self.tiledb.lookup_tile(&k.op_type, &k.dims, gpu);
        let a = analyze(k, tile, gpu)?;
        let coeffs = predict_coeffs(net, &a.features)?;
        KernelPrediction::from_coeffs(&a, coeffs)
    }
}
