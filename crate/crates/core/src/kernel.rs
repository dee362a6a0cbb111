//! Operator accounting and the tile/wave latency equations.
//!
//! Dimension conventions per operator:
//!
//! | op           | dims                 | output        |
//! |--------------|----------------------|---------------|
//! | `bmm`        | `[B, M, K, N]`       | `[B, M, N]`   |
//! | `fc`         | `[B, In, Out]`       | `[B, Out]`    |
//! | elementwise  | `[rows, cols]`       | `[rows, cols]`|
//! | `softmax`    | `[rows, cols]`       | `[rows, cols]`|
//! | `layernorm`  | `[rows, cols]`       | `[rows, cols]`|
//! | `other:NAME` | `[read, written]`    | `[written]`   |
//!
//! `other` dims are element counts read and written; such kernels carry no
//! FLOPs and are always estimated as memory-bound.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::GpuSpec;
use crate::error::{Error, Result};
use crate::numeric::ceil_div;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Fp32,
    Fp16,
}

impl Dtype {
    pub fn bytes(self) -> u64 {
        match self {
            Dtype::Fp32 => 4,
            Dtype::Fp16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Fp32 => "fp32",
            Dtype::Fp16 => "fp16",
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "float32" | "f32" => Ok(Dtype::Fp32),
            "fp16" | "float16" | "f16" | "half" => Ok(Dtype::Fp16),
            _ => Err(Error::InvalidConfig(format!("unknown dtype `{s}`"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Gelu,
    Tanh,
}

impl ElementwiseKind {
    pub const ALL: [ElementwiseKind; 7] = [
        ElementwiseKind::Add,
        ElementwiseKind::Sub,
        ElementwiseKind::Mul,
        ElementwiseKind::Div,
        ElementwiseKind::Relu,
        ElementwiseKind::Gelu,
        ElementwiseKind::Tanh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElementwiseKind::Add => "add",
            ElementwiseKind::Sub => "sub",
            ElementwiseKind::Mul => "mul",
            ElementwiseKind::Div => "div",
            ElementwiseKind::Relu => "relu",
            ElementwiseKind::Gelu => "gelu",
            ElementwiseKind::Tanh => "tanh",
        }
    }

    /// Two input tensors rather than one.
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul | ElementwiseKind::Div
        )
    }

    pub fn is_activation(self) -> bool {
        matches!(self, ElementwiseKind::Relu | ElementwiseKind::Gelu | ElementwiseKind::Tanh)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpType {
    Bmm,
    Fc,
    Elementwise(ElementwiseKind),
    Softmax,
    LayerNorm,
    Other(String),
}

/// The five operator families that have a learned utilization predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpFamily {
    Bmm,
    Fc,
    Elementwise,
    Softmax,
    LayerNorm,
}

impl OpFamily {
    pub const ALL: [OpFamily; 5] = [
        OpFamily::Bmm,
        OpFamily::Fc,
        OpFamily::Elementwise,
        OpFamily::Softmax,
        OpFamily::LayerNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpFamily::Bmm => "bmm",
            OpFamily::Fc => "fc",
            OpFamily::Elementwise => "elementwise",
            OpFamily::Softmax => "softmax",
            OpFamily::LayerNorm => "layernorm",
        }
    }

    pub fn is_gemm(self) -> bool {
        matches!(self, OpFamily::Bmm | OpFamily::Fc)
    }
}

impl FromStr for OpFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bmm" => Ok(OpFamily::Bmm),
            "fc" | "linear" => Ok(OpFamily::Fc),
            "elementwise" | "ew" => Ok(OpFamily::Elementwise),
            "softmax" => Ok(OpFamily::Softmax),
            "layernorm" | "ln" => Ok(OpFamily::LayerNorm),
            _ => Err(Error::UnknownOperator(s.to_string())),
        }
    }
}

impl fmt::Display for OpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl OpType {
    pub fn family(&self) -> Option<OpFamily> {
        match self {
            OpType::Bmm => Some(OpFamily::Bmm),
            OpType::Fc => Some(OpFamily::Fc),
            OpType::Elementwise(_) => Some(OpFamily::Elementwise),
            OpType::Softmax => Some(OpFamily::Softmax),
            OpType::LayerNorm => Some(OpFamily::LayerNorm),
            OpType::Other(_) => None,
        }
    }

    pub fn is_gemm(&self) -> bool {
        matches!(self, OpType::Bmm | OpType::Fc)
    }

    /// Elementwise, softmax and layernorm: row-wise vector kernels.
    pub fn is_vector(&self) -> bool {
        matches!(self, OpType::Elementwise(_) | OpType::Softmax | OpType::LayerNorm)
    }

    /// Canonical name, also the key used by the tile database.
    pub fn name(&self) -> String {
        match self {
            OpType::Bmm => "bmm".into(),
            OpType::Fc => "fc".into(),
            OpType::Elementwise(k) => k.as_str().into(),
            OpType::Softmax => "softmax".into(),
            OpType::LayerNorm => "layernorm".into(),
            OpType::Other(n) => format!("other:{n}"),
        }
    }

    fn input_rank(&self) -> usize {
        match self {
            OpType::Bmm => 4,
            OpType::Fc => 3,
            _ => 2,
        }
    }
}

impl FromStr for OpType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(name) = lower.strip_prefix("other:") {
            if name.is_empty() {
                return Err(Error::UnknownOperator(s.to_string()));
            }
            return Ok(OpType::Other(name.to_string()));
        }
        let op = match lower.as_str() {
            "bmm" | "matmul" => OpType::Bmm,
            "fc" | "linear" => OpType::Fc,
            "softmax" => OpType::Softmax,
            "layernorm" | "layer_norm" => OpType::LayerNorm,
            other => match ElementwiseKind::ALL.iter().find(|k| k.as_str() == other) {
                Some(k) => OpType::Elementwise(*k),
                None => return Err(Error::UnknownOperator(s.to_string())),
            },
        };
        Ok(op)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// FLOPs charged per output element for the vector operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopConstants {
    pub elementwise: f64,
    pub gelu: f64,
    pub tanh: f64,
    pub softmax: f64,
    pub layernorm: f64,
}

impl Default for FlopConstants {
    fn default() -> Self {
        FlopConstants {
            elementwise: 1.0,
            gelu: 8.0,
            tanh: 8.0,
            softmax: 5.0,
            layernorm: 8.0,
        }
    }
}

/// One operator instance with its FLOP and memory-traffic accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDesc {
    pub op_type: OpType,
    pub dims: Vec<u64>,
    pub dtype: Dtype,
    pub flops_k: f64,
    /// Bytes moved to and from device memory.
    pub mem_k: f64,
    pub out_dims: Vec<u64>,
    /// Number of operators folded into this kernel (1 unless fused).
    pub fused_ops: usize,
}

impl KernelDesc {
    /// Arithmetic intensity, FLOP per byte.
    pub fn intensity(&self) -> f64 {
        self.flops_k / self.mem_k
    }

    pub fn out_elements(&self) -> u64 {
        self.out_dims.iter().product()
    }

    pub fn out_bytes(&self) -> f64 {
        (self.out_elements() * self.dtype.bytes()) as f64
    }

    /// Peak FLOP/s of the datapath this kernel runs on.
    pub fn peak_flops(&self, gpu: &GpuSpec) -> f64 {
        gpu.peak_flops_for(self.dtype, self.op_type.is_gemm())
    }
}

pub fn describe_kernel(op_type: OpType, dims: &[u64], dtype: Dtype) -> Result<KernelDesc> {
    describe_kernel_with(op_type, dims, dtype, &FlopConstants::default())
}

pub fn describe_kernel_with(
    op_type: OpType,
    dims: &[u64],
    dtype: Dtype,
    consts: &FlopConstants,
) -> Result<KernelDesc> {
    let rank = op_type.input_rank();
    if dims.len() != rank {
        return Err(Error::RankMismatch {
            what: format!("dims of {op_type}"),
            expected: rank,
            actual: dims.len(),
        });
    }
    if let Some(index) = dims.iter().position(|&d| d == 0) {
        return Err(Error::NonPositiveDim {
            op: op_type.name(),
            index,
        });
    }
    let d: Vec<f64> = dims.iter().map(|&x| x as f64).collect();
    let bytes = dtype.bytes() as f64;

    let (flops_k, elems_moved, out_dims) = match &op_type {
        OpType::Bmm => {
            let (b, m, k, n) = (d[0], d[1], d[2], d[3]);
            (
                2.0 * b * m * k * n,
                b * m * k + b * k * n + b * m * n,
                vec![dims[0], dims[1], dims[3]],
            )
        }
        OpType::Fc => {
            let (b, i, o) = (d[0], d[1], d[2]);
            // input, weight, bias, output
            (2.0 * b * i * o + b * o, b * i + i * o + o + b * o, vec![dims[0], dims[2]])
        }
        OpType::Elementwise(kind) => {
            let n = d[0] * d[1];
            let per = match kind {
                ElementwiseKind::Gelu => consts.gelu,
                ElementwiseKind::Tanh => consts.tanh,
                _ => consts.elementwise,
            };
            let tensors = if kind.is_binary() { 3.0 } else { 2.0 };
            (per * n, tensors * n, dims.to_vec())
        }
        OpType::Softmax => {
            let n = d[0] * d[1];
            (consts.softmax * n, 2.0 * n, dims.to_vec())
        }
        OpType::LayerNorm => {
            let n = d[0] * d[1];
            // input, output, gamma, beta
            (consts.layernorm * n, 2.0 * n + 2.0 * d[1], dims.to_vec())
        }
        OpType::Other(_) => (0.0, d[0] + d[1], vec![dims[1]]),
    };

    Ok(KernelDesc {
        op_type,
        dims: dims.to_vec(),
        dtype,
        flops_k,
        mem_k: elems_moved * bytes,
        out_dims,
        fused_ops: 1,
    })
}

/// Tile dimensions, one per output dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileShape(pub Vec<u64>);

impl TileShape {
    pub fn dims(&self) -> &[u64] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Tile and wave decomposition of one kernel on one GPU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavePlan {
    pub num_tiles: u64,
    pub num_waves: u64,
    pub flops_tile: f64,
    pub mem_tile: f64,
}

/// Number of tiles covering `out_dims`: the product of per-dimension ceilings.
pub fn count_tiles(out_dims: &[u64], tile: &[u64]) -> u64 {
    out_dims
        .iter()
        .zip(tile)
        .map(|(&x, &t)| ceil_div(x, t))
        .fold(1u64, u64::saturating_mul)
}

pub fn plan_tiles(k: &KernelDesc, tile: &TileShape, gpu: &GpuSpec) -> Result<WavePlan> {
    if tile.rank() != k.out_dims.len() {
        return Err(Error::RankMismatch {
            what: format!("tile for {} output", k.op_type),
            expected: k.out_dims.len(),
            actual: tile.rank(),
        });
    }
    if let Some(index) = tile.0.iter().position(|&t| t == 0) {
        return Err(Error::NonPositiveDim {
            op: format!("tile of {}", k.op_type),
            index,
        });
    }
    let num_tiles = count_tiles(&k.out_dims, &tile.0);
    let num_waves = ceil_div(num_tiles, u64::from(gpu.num_sm));
    let flops_tile = k.flops_k / num_tiles as f64;
    let bytes = k.dtype.bytes() as f64;
    let t: Vec<f64> = tile.0.iter().map(|&x| x as f64).collect();
    let mem_tile = match k.op_type {
        OpType::Bmm => {
            // [tb, tm, tn] over [B, M, N]; K is the reduction dim
            let kd = k.dims[2] as f64;
            t[0] * (t[1] * kd + kd * t[2] + t[1] * t[2]) * bytes
        }
        OpType::Fc => {
            let kd = k.dims[1] as f64;
            (t[0] * kd + kd * t[1] + t[0] * t[1]) * bytes
        }
        _ => k.mem_k / num_tiles as f64,
    };
    Ok(WavePlan {
        num_tiles,
        num_waves,
        flops_tile,
        mem_tile,
    })
}

/// Roofline throughput bound: `min(intensity * mem_bw, peak_flops)`.
pub fn roofline_bw(k: &KernelDesc, gpu: &GpuSpec) -> f64 {
    (k.intensity() * gpu.mem_bw).min(k.peak_flops(gpu))
}

/// Roofline of a single SM. Tiles run one per SM, so per-tile time is
/// measured against this share of the whole-GPU bound.
pub fn roofline_bw_per_sm(k: &KernelDesc, gpu: &GpuSpec) -> f64 {
    roofline_bw(k, gpu) / f64::from(gpu.num_sm)
}

/// Kernel latency from a wave plan: per-tile time at the achieved
/// throughput (`roofline * util`), repeated once per wave.
pub fn assemble_latency(plan: &WavePlan, roofline: f64, util: f64) -> Result<f64> {
    if !(util > 0.0 && util <= 1.0) {
        return Err(Error::UtilizationOutOfRange(util));
    }
    let achieved = roofline * util;
    let per_tile = plan.flops_tile / achieved;
    Ok(per_tile * plan.num_waves as f64)
}

/// Fallback for kernels without a learned predictor.
pub fn memory_bound_latency(k: &KernelDesc, gpu: &GpuSpec) -> f64 {
    k.mem_k / gpu.mem_bw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;

    fn gpu(name: &str) -> GpuSpec {
        Catalog::builtin().get(name).unwrap().clone()
    }

    fn fake_kernel(flops: f64, mem: f64) -> KernelDesc {
        KernelDesc {
            op_type: OpType::Other("test".into()),
            dims: vec![1, 1],
            dtype: Dtype::Fp32,
            flops_k: flops,
            mem_k: mem,
            out_dims: vec![1],
            fused_ops: 1,
        }
    }

    #[test]
    fn bmm_tiny_accounting() {
        let k = describe_kernel(OpType::Bmm, &[1, 4, 4, 4], Dtype::Fp32).unwrap();
        assert_eq!(k.flops_k, 128.0);
        assert_eq!(k.mem_k, 192.0);
        assert_eq!(k.out_dims, vec![1, 4, 4]);
    }

    #[test]
    fn bmm_attention_shape() {
        let k = describe_kernel(OpType::Bmm, &[32, 512, 64, 512], Dtype::Fp32).unwrap();
        assert_eq!(k.flops_k, 2.0 * 32.0 * 512.0 * 64.0 * 512.0);
        assert!((k.flops_k - 1.0737e9).abs() / 1.0737e9 < 1e-4);
    }

    #[test]
    fn elementwise_add_traffic() {
        let k = describe_kernel(OpType::Elementwise(ElementwiseKind::Add), &[4096, 1024], Dtype::Fp32).unwrap();
        assert_eq!(k.mem_k, 3.0 * 4096.0 * 1024.0 * 4.0);
        assert_eq!(k.flops_k, 4096.0 * 1024.0);
        let g = describe_kernel(OpType::Elementwise(ElementwiseKind::Gelu), &[4096, 1024], Dtype::Fp32).unwrap();
        assert_eq!(g.mem_k, 2.0 * 4096.0 * 1024.0 * 4.0);
        assert_eq!(g.flops_k, 8.0 * 4096.0 * 1024.0);
    }

    #[test]
    fn fc_includes_bias() {
        let k = describe_kernel(OpType::Fc, &[8, 16, 32], Dtype::Fp32).unwrap();
        assert_eq!(k.flops_k, 2.0 * 8.0 * 16.0 * 32.0 + 8.0 * 32.0);
        assert_eq!(k.mem_k, (8.0 * 16.0 + 16.0 * 32.0 + 32.0 + 8.0 * 32.0) * 4.0);
        assert_eq!(k.out_dims, vec![8, 32]);
    }

    #[test]
    fn fp16_halves_bytes() {
        let a = describe_kernel(OpType::Bmm, &[2, 64, 64, 64], Dtype::Fp32).unwrap();
        let b = describe_kernel(OpType::Bmm, &[2, 64, 64, 64], Dtype::Fp16).unwrap();
        assert_eq!(a.mem_k, 2.0 * b.mem_k);
        assert_eq!(a.flops_k, b.flops_k);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(matches!(
            describe_kernel(OpType::Bmm, &[1, 2, 3], Dtype::Fp32),
            Err(Error::RankMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            describe_kernel(OpType::Softmax, &[4, 0], Dtype::Fp32),
            Err(Error::NonPositiveDim { index: 1, .. })
        ));
    }

    #[test]
    fn op_names_round_trip() {
        for name in ["bmm", "fc", "add", "gelu", "softmax", "layernorm", "other:embedding"] {
            assert_eq!(name.parse::<OpType>().unwrap().name(), name);
        }
        assert!("conv2d".parse::<OpType>().is_err());
    }

    #[test]
    fn fig5_tiling() {
        let k = describe_kernel(OpType::Softmax, &[4, 4], Dtype::Fp32).unwrap();
        let plan = plan_tiles(&k, &TileShape(vec![2, 2]), &gpu("P4")).unwrap();
        assert_eq!(plan.num_tiles, 4);
        assert_eq!(plan.num_waves, 1);
    }

    #[test]
    fn waves_on_a100() {
        // 250 tiles over 108 SMs
        let k = describe_kernel(OpType::Softmax, &[250, 64], Dtype::Fp32).unwrap();
        let plan = plan_tiles(&k, &TileShape(vec![1, 64]), &gpu("A100-40GB")).unwrap();
        assert_eq!(plan.num_tiles, 250);
        assert_eq!(plan.num_waves, 3);
    }

    #[test]
    fn tile_rank_checked() {
        let k = describe_kernel(OpType::Bmm, &[1, 4, 4, 4], Dtype::Fp32).unwrap();
        assert!(matches!(
            plan_tiles(&k, &TileShape(vec![2, 2]), &gpu("V100")),
            Err(Error::RankMismatch { .. })
        ));
    }

    #[test]
    fn bmm_tile_traffic() {
        let k = describe_kernel(OpType::Bmm, &[2, 256, 64, 256], Dtype::Fp32).unwrap();
        let plan = plan_tiles(&k, &TileShape(vec![1, 128, 128]), &gpu("V100")).unwrap();
        assert_eq!(plan.num_tiles, 8);
        assert_eq!(plan.mem_tile, (128.0 * 64.0 + 64.0 * 128.0 + 128.0 * 128.0) * 4.0);
        assert_eq!(plan.flops_tile, k.flops_k / 8.0);
    }

    #[test]
    fn roofline_examples() {
        let v100 = gpu("V100");
        assert_eq!(roofline_bw(&fake_kernel(2e9, 1e8), &v100), 8.1e12);
        assert_eq!(roofline_bw(&fake_kernel(5e8, 5e8), &v100), 900e9);
        assert_eq!(roofline_bw(&fake_kernel(2e9, 1e8), &gpu("H100")), 66.9e12);
    }

    #[test]
    fn assemble_examples() {
        let plan = WavePlan {
            num_tiles: 400,
            num_waves: 4,
            flops_tile: 5e8,
            mem_tile: 1.0,
        };
        let lat = assemble_latency(&plan, 8.1e12, 0.5).unwrap();
        assert!((lat - 4.938e-4).abs() / 4.938e-4 < 1e-3);

        let one = WavePlan { num_waves: 1, ..plan };
        assert_eq!(assemble_latency(&one, 8.1e12, 1.0).unwrap(), 5e8 / 8.1e12);

        let eight = WavePlan { num_waves: 8, ..plan };
        assert_eq!(
            assemble_latency(&eight, 8.1e12, 0.5).unwrap(),
            2.0 * assemble_latency(&plan, 8.1e12, 0.5).unwrap()
        );

        assert!(matches!(assemble_latency(&plan, 1.0, 0.0), Err(Error::UtilizationOutOfRange(_))));
        assert!(matches!(assemble_latency(&plan, 1.0, 1.5), Err(Error::UtilizationOutOfRange(_))));
    }

    #[test]
    fn memory_bound_examples() {
        let a = gpu("A100-80GB");
        assert!((memory_bound_latency(&fake_kernel(0.0, 1.935e9), &a) - 1e-3).abs() < 1e-15);
        assert_eq!(memory_bound_latency(&fake_kernel(0.0, a.mem_bw), &a), 1.0);
    }
}
