//! The five per-tile utilization features.
//!
//! Each feature compares what one tile needs with what one SM offers,
//! with numerator and denominator first expressed in the units below:
//!
//! | feature | numerator                      | denominator                 |
//! |---------|--------------------------------|-----------------------------|
//! | f1      | FLOPs per tile (GFLOP)         | peak FLOP/s per SM (TFLOP/s)|
//! | f2      | bytes per tile (MB)            | memory BW per SM (GB/s)     |
//! | f3      | waves x bytes per tile (MB)    | L2 per SM (KB)              |
//! | f4      | waves x bytes per tile (MB)    | device memory per SM (MB)   |
//! | f5      | tile intensity (GFLOP / MB)    | device ridge ((TFLOP/s) / (GB/s)) |

use serde::{Deserialize, Serialize};

use crate::catalog::{per_sm, GpuSpec};
use crate::error::{Error, Result};
use crate::kernel::{KernelDesc, WavePlan};

pub const NUM_FEATURES: usize = 5;

const KILO: f64 = 1e3;
const MEGA: f64 = 1e6;
const GIGA: f64 = 1e9;
const TERA: f64 = 1e12;

/// Floor applied before taking logarithms of features.
const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; NUM_FEATURES]);

/// How features are presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScaling {
    /// Unit-scaled ratios as listed above.
    #[default]
    Raw,
    /// Natural log of the unit-scaled ratios. Needs a smaller learning
    /// rate than the default to train stably.
    Log,
}

impl FeatureScaling {
    pub fn code(self) -> u32 {
        match self {
            FeatureScaling::Raw => 0,
            FeatureScaling::Log => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(FeatureScaling::Raw),
            1 => Some(FeatureScaling::Log),
            _ => None,
        }
    }
}

impl FeatureVector {
    pub fn f1(&self) -> f64 {
        self.0[0]
    }

    pub fn f3(&self) -> f64 {
        self.0[2]
    }

    pub fn model_input(&self, scaling: FeatureScaling) -> [f64; NUM_FEATURES] {
        match scaling {
            FeatureScaling::Raw => self.0,
            FeatureScaling::Log => self.0.map(|f| f.max(LOG_FLOOR).ln()),
        }
    }
}

pub fn featurize(plan: &WavePlan, gpu: &GpuSpec, k: &KernelDesc) -> Result<FeatureVector> {
    if plan.mem_tile.is_nan() || plan.mem_tile <= 0.0 {
        return Err(Error::ZeroTileMemory);
    }
    let peak = k.peak_flops(gpu);
    let sm = per_sm(gpu, peak);
    let waves = plan.num_waves as f64;

    let f1 = (plan.flops_tile / GIGA) / (sm.peak_flops_per_sm / TERA);
    let f2 = (plan.mem_tile / MEGA) / (sm.mem_bw_per_sm / GIGA);
    let f3 = (waves * plan.mem_tile / MEGA) / (sm.l2_per_sm / KILO);
    let f4 = (waves * plan.mem_tile / MEGA) / (sm.mem_per_sm / MEGA);
    let f5 = ((plan.flops_tile / GIGA) / (plan.mem_tile / MEGA)) / ((peak / TERA) / (gpu.mem_bw / GIGA));
    Ok(FeatureVector([f1, f2, f3, f4, f5]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::kernel::{describe_kernel, Dtype, OpType};

    fn setup(name: &str) -> (GpuSpec, KernelDesc) {
        let gpu = Catalog::builtin().get(name).unwrap().clone();
        let k = describe_kernel(OpType::Bmm, &[8, 256, 64, 256], Dtype::Fp32).unwrap();
        (gpu, k)
    }

    #[test]
    fn f1_gflop_over_tflops() {
        let (gpu, k) = setup("H100");
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 1,
            flops_tile: 1e9,
            mem_tile: 1e6,
        };
        let f = featurize(&plan, &gpu, &k).unwrap();
        assert!((f.f1() - 1.973).abs() < 1e-3, "{}", f.f1());
        assert_eq!(f.f1(), 1.0 / (66.9 / 132.0));
    }

    #[test]
    fn f2_is_milliseconds() {
        let (gpu, k) = setup("V100");
        // one tile moving exactly one SM's bandwidth-second
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 1,
            flops_tile: 1.0,
            mem_tile: 900e9 / 80.0,
        };
        let f = featurize(&plan, &gpu, &k).unwrap();
        assert!((f.0[1] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn f3_mb_over_kb_scale() {
        let (gpu, k) = setup("V100");
        let l2_per_sm = 6e6 / 80.0;
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 1,
            flops_tile: 1.0,
            mem_tile: l2_per_sm,
        };
        // equal byte counts in MB over KB leave a factor of 1e-3
        let f = featurize(&plan, &gpu, &k).unwrap();
        assert!((f.f3() - 1e-3).abs() < 1e-15);

        let three = WavePlan { num_waves: 3, ..plan };
        let g = featurize(&three, &gpu, &k).unwrap();
        assert!((g.f3() - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn f4_is_unitless_share_of_memory() {
        let (gpu, k) = setup("A100-40GB");
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 2,
            flops_tile: 1.0,
            mem_tile: 40e9 / 108.0,
        };
        let f = featurize(&plan, &gpu, &k).unwrap();
        assert!((f.0[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn f5_is_one_at_the_ridge() {
        // tile intensity equal to the device ridge 8.1e12 / 900e9 = 9 FLOP/B
        let (gpu, k) = setup("V100");
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 1,
            flops_tile: 9.0 * 2048.0,
            mem_tile: 2048.0,
        };
        let f = featurize(&plan, &gpu, &k).unwrap();
        assert!((f.0[4] - 1.0).abs() < 1e-12, "{}", f.0[4]);
        // the 1e-3 in GFLOP/MB and in (TFLOP/s)/(GB/s) cancel
        let half = WavePlan { flops_tile: 4.5 * 2048.0, ..plan };
        assert!((featurize(&half, &gpu, &k).unwrap().0[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_tile_memory_rejected() {
        let (gpu, k) = setup("V100");
        let plan = WavePlan {
            num_tiles: 1,
            num_waves: 1,
            flops_tile: 1.0,
            mem_tile: 0.0,
        };
        assert!(matches!(featurize(&plan, &gpu, &k), Err(Error::ZeroTileMemory)));
    }

    #[test]
    fn log_scaling() {
        let f = FeatureVector([1.0, std::f64::consts::E, 0.0, 1.0, 1.0]);
        let x = f.model_input(FeatureScaling::Log);
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 1.0).abs() < 1e-15);
        assert!(x[2].is_finite());
        assert_eq!(f.model_input(FeatureScaling::Raw), f.0);
    }
}
