//! Single-server data, tensor and pipeline parallel estimates.
//!
//! Strategies are applied one at a time. Communication uses a ring
//! all-reduce (`2(p-1)/p * bytes / bw_eff`) and point-to-point send/recv
//! (`bytes / bw_eff`), with `bw_eff = link_bw * link_utilization`.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::catalog::{GpuSpec, Quantity, UnitKind};
use crate::error::{Error, Result};
use crate::graph::{apply_fusion, FusionMode, GraphNode, Mode, OpGraph, Pass, TpSplit};
use crate::kernel::OpType;
use crate::numeric::{ceil_div, exact_sum};
use crate::predictor::LatencyModel;
use crate::report::predict_graph;

pub const DEFAULT_LINK_UTILIZATION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Data,
    Tensor,
    Pipeline,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Data => "data",
            Strategy::Tensor => "tensor",
            Strategy::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" | "dp" => Ok(Strategy::Data),
            "tensor" | "tp" => Ok(Strategy::Tensor),
            "pipeline" | "pp" => Ok(Strategy::Pipeline),
            other => Err(Error::InvalidPlan(format!(
                "unknown strategy `{other}` (expected data, tensor or pipeline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerSpec {
    pub gpu: GpuSpec,
    pub num_gpus: u32,
    /// Bidirectional bytes/s between a GPU pair.
    pub link_bw: f64,
    pub link_utilization: f64,
}

impl ServerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 {
            return Err(Error::InvalidPlan("num_gpus must be positive".into()));
        }
        check_link(self.link_bw, self.link_utilization)
    }

    pub fn effective_bw(&self) -> f64 {
        self.link_bw * self.link_utilization
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelPlan {
    pub strategy: Strategy,
    pub width: u32,
    pub microbatches: u32,
    /// Defaults to the graph's batch size.
    pub global_batch: Option<u64>,
}

fn check_link(link_bw: f64, link_utilization: f64) -> Result<()> {
    if !(link_bw > 0.0 && link_bw.is_finite()) {
        return Err(Error::InvalidPlan(format!("link_bw must be positive, got {link_bw}")));
    }
    if !(link_utilization > 0.0 && link_utilization <= 1.0) {
        return Err(Error::InvalidPlan(format!(
            "link_utilization must be in (0, 1], got {link_utilization}"
        )));
    }
    Ok(())
}

fn check_bytes(bytes: f64) -> Result<()> {
    if bytes > 0.0 && bytes.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidPlan(format!("transfer size must be positive, got {bytes} bytes")))
    }
}

/// Ring all-reduce over `p` GPUs.
pub fn allreduce_latency(bytes: f64, p: u32, server: &ServerSpec) -> Result<f64> {
    server.validate()?;
    ring_allreduce(bytes, p, server.link_bw, server.link_utilization)
}

/// Ring all-reduce over `p` GPUs given only the link figures.
pub fn ring_allreduce(bytes: f64, p: u32, link_bw: f64, link_utilization: f64) -> Result<f64> {
    if p < 2 {
        return Err(Error::InvalidPlan(format!("all-reduce needs at least 2 GPUs, got {p}")));
    }
    check_bytes(bytes)?;
    check_link(link_bw, link_utilization)?;
    let p = f64::from(p);
    Ok(2.0 * (p - 1.0) / p * bytes / (link_bw * link_utilization))
}

pub fn sendrecv_latency(bytes: f64, server: &ServerSpec) -> Result<f64> {
    check_bytes(bytes)?;
    server.validate()?;
    Ok(bytes / server.effective_bw())
}

pub const DIST_CSV_HEADER: &str = "kind,name,count,bytes,latency_s";

/// One line of a distributed estimate. `count` operations moved `bytes` in
/// total and took `latency` seconds in total.
#[derive(Debug, Clone, PartialEq)]
pub struct DistRow {
    pub kind: &'static str,
    pub name: String,
    pub count: u64,
    pub bytes: f64,
    pub latency: f64,
    /// Whether this row is a term of the iteration total (stage rows are
    /// informational).
    pub additive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedReport {
    pub strategy: Strategy,
    pub width: u32,
    pub gpu: String,
    pub rows: Vec<DistRow>,
    pub total: f64,
}

impl DistributedReport {
    fn new(strategy: Strategy, width: u32, gpu: &GpuSpec, rows: Vec<DistRow>) -> Self {
        let total = exact_sum(rows.iter().filter(|r| r.additive).map(|r| r.latency));
        DistributedReport {
            strategy,
            width,
            gpu: gpu.name.clone(),
            rows,
            total,
        }
    }

    pub fn row(&self, kind: &str) -> Option<&DistRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Latency by label: `kind:name` per row, plus `total`.
    pub fn labelled(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .rows
            .iter()
            .map(|r| (format!("{}:{}", r.kind, r.name), r.latency))
            .collect();
        out.push(("total".into(), self.total));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{DIST_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:e},{:e}", r.kind, r.name, r.count, r.bytes, r.latency);
        }
        let _ = writeln!(out, "total,{}x{},,,{:e}", self.strategy, self.width, self.total);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy {}  width {}  gpu {}", self.strategy, self.width, self.gpu);
        let _ = writeln!(out, "{:<10} {:<24} {:>6} {:>14} {:>12}", "kind", "name", "count", "bytes", "latency_ms");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:<24} {:>6} {:>14.4e} {:>12.4}{}",
                r.kind,
                r.name,
                r.count,
                r.bytes,
                r.latency * 1e3,
                if r.additive { "" } else { "  (not summed)" }
            );
        }
        let _ = writeln!(out, "{:<10} {:<24} {:>6} {:>14} {:>12.4}", "total", "", "", "", self.total * 1e3);
        out
    }
}

fn compute_row(name: &str, latency: f64) -> DistRow {
    DistRow {
        kind: "compute",
        name: name.into(),
        count: 1,
        bytes: 0.0,
        latency,
        additive: true,
    }
}

/// Estimate one training or inference iteration under `plan`.
pub fn estimate_parallel(
    g: &OpGraph,
    plan: &ParallelPlan,
    server: &ServerSpec,
    model: &dyn LatencyModel,
    fusion: FusionMode,
) -> Result<DistributedReport> {
    server.validate()?;
    if plan.width == 0 {
        return Err(Error::InvalidPlan("width must be at least 1".into()));
    }
    if plan.width > server.num_gpus {
        return Err(Error::InvalidPlan(format!(
            "width {} exceeds the server's {} GPUs",
            plan.width, server.num_gpus
        )));
    }
    if plan.microbatches == 0 {
        return Err(Error::InvalidPlan("microbatches must be at least 1".into()));
    }
    let global = plan.global_batch.unwrap_or(g.meta.batch_size);
    let full = g.with_batch(global)?;
    let device = |graph: &OpGraph| -> Result<f64> {
        Ok(predict_graph(&apply_fusion(graph, fusion)?, &server.gpu, model)?.total)
    };
    let width = plan.width;

    if width == 1 {
        let rows = vec![compute_row("device", device(&full)?)];
        return Ok(DistributedReport::new(plan.strategy, 1, &server.gpu, rows));
    }

    let rows = match plan.strategy {
        Strategy::Data => {
            let per_device = full.with_batch(ceil_div(global, u64::from(width)))?;
            let mut rows = vec![compute_row("device", device(&per_device)?)];
            if g.meta.mode == Mode::Training {
                let bytes = gradient_bytes(g);
                rows.push(DistRow {
                    kind: "allreduce",
                    name: "gradients".into(),
                    count: 1,
                    bytes,
                    latency: allreduce_latency(bytes, width, server)?,
                    additive: true,
                });
            }
            rows
        }
        Strategy::Tensor => {
            let layers = layer_ids(g);
            if layers.is_empty() {
                return Err(Error::InvalidPlan(
                    "tensor parallelism needs `layer` annotations marking the repeated blocks".into(),
                ));
            }
            let sharded = full.map_dims(|n| Ok(tensor_split(n, width)))?;
            let passes: u64 = if g.meta.mode == Mode::Training { 2 } else { 1 };
            let mut lat = Vec::new();
            let mut bytes = Vec::new();
            for &l in &layers {
                let b = last_forward_output(&full, |n| n.ann.layer == Some(l))
                    .ok_or_else(|| Error::InvalidPlan(format!("layer {l} has no forward nodes")))?;
                let t = allreduce_latency(b, width, server)?;
                for _ in 0..2 * passes {
                    lat.push(t);
                    bytes.push(b);
                }
            }
            vec![
                compute_row("device", device(&sharded)?),
                DistRow {
                    kind: "allreduce",
                    name: "activations".into(),
                    count: lat.len() as u64,
                    bytes: exact_sum(bytes),
                    latency: exact_sum(lat),
                    additive: true,
                },
            ]
        }
        Strategy::Pipeline => pipeline_rows(&full, global, plan, server, &device)?,
    };
    Ok(DistributedReport::new(plan.strategy, width, &server.gpu, rows))
}

fn pipeline_rows(
    full: &OpGraph,
    global: u64,
    plan: &ParallelPlan,
    server: &ServerSpec,
    device: &dyn Fn(&OpGraph) -> Result<f64>,
) -> Result<Vec<DistRow>> {
    let p = plan.width as usize;
    let m = u64::from(plan.microbatches);
    let stage_of = assign_stages(full, p)?;
    let micro = full.with_batch(ceil_div(global, m))?;
    let training = full.meta.mode == Mode::Training;
    let passes: &[Pass] = if training {
        &[Pass::Forward, Pass::Backward]
    } else {
        &[Pass::Forward]
    };

    let mut rows = Vec::new();
    for &pass in passes {
        let mut worst: f64 = 0.0;
        for s in 0..p {
            let sub = micro.filter(|i, n| stage_of[i] == s && n.ann.pass == pass);
            let t = device(&sub)?;
            worst = worst.max(t);
            rows.push(DistRow {
                kind: "stage",
                name: format!("{}-{s}", pass_name(pass)),
                count: 1,
                bytes: 0.0,
                latency: t,
                additive: false,
            });
        }
        let slots = m + p as u64 - 1;
        rows.push(DistRow {
            kind: "span",
            name: pass_name(pass).into(),
            count: slots,
            bytes: 0.0,
            latency: slots as f64 * worst,
            additive: true,
        });
    }

    // one activation (forward) or gradient (backward) transfer per
    // microbatch per stage boundary, not overlapped with compute
    let mut lat = Vec::new();
    let mut bytes = Vec::new();
    for s in 0..p - 1 {
        let b = last_forward_output(&micro, |n| stage_of[micro.index_of(&n.id).expect("own node")] == s)
            .ok_or_else(|| Error::InvalidPlan(format!("stage {s} has no forward nodes")))?;
        let t = sendrecv_latency(b, server)?;
        for _ in 0..m * passes.len() as u64 {
            lat.push(t);
            bytes.push(b);
        }
    }
    rows.push(DistRow {
        kind: "sendrecv",
        name: "stage-boundaries".into(),
        count: lat.len() as u64,
        bytes: exact_sum(bytes),
        latency: exact_sum(lat),
        additive: true,
    });
    Ok(rows)
}

fn pass_name(p: Pass) -> &'static str {
    match p {
        Pass::Forward => "forward",
        Pass::Backward => "backward",
    }
}

fn layer_ids(g: &OpGraph) -> Vec<u32> {
    g.nodes()
        .iter()
        .filter_map(|n| n.ann.layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Stage index per node. Layers are split into contiguous runs, the first
/// `layers % p` stages taking one extra. Unlayered nodes join the stage of
/// the closest layered node before them in graph order, or stage 0.
pub fn assign_stages(g: &OpGraph, p: usize) -> Result<Vec<usize>> {
    let layers = layer_ids(g);
    if layers.len() < p {
        return Err(Error::InvalidPlan(format!(
            "pipeline width {p} needs at least {p} `layer` annotations, graph has {}",
            layers.len()
        )));
    }
    let (base, extra) = (layers.len() / p, layers.len() % p);
    let mut stage_of_layer = std::collections::BTreeMap::new();
    let mut it = layers.iter();
    for s in 0..p {
        for _ in 0..base + usize::from(s < extra) {
            stage_of_layer.insert(*it.next().expect("enough layers"), s);
        }
    }
    let mut current = 0;
    Ok(g
        .nodes()
        .iter()
        .map(|n| {
            if let Some(l) = n.ann.layer {
                current = stage_of_layer[&l];
            }
            current
        })
        .collect())
}

/// Output bytes of the last forward node (graph order) matching `pred`.
fn last_forward_output(g: &OpGraph, pred: impl Fn(&GraphNode) -> bool) -> Option<f64> {
    g.nodes()
        .iter()
        .rev()
        .find(|n| n.ann.pass == Pass::Forward && pred(n))
        .map(|n| n.kernel.out_bytes())
}

/// Dims of one tensor-parallel shard. Indivisible dims round up.
fn tensor_split(n: &GraphNode, width: u32) -> Vec<u64> {
    let mut d = n.kernel.dims.clone();
    let w = u64::from(width);
    let split = n.ann.tp_split.unwrap_or(match n.kernel.op_type {
        OpType::Fc => TpSplit::Column,
        OpType::Bmm | OpType::Softmax => TpSplit::Batch,
        _ => TpSplit::None,
    });
    let axis = match (split, &n.kernel.op_type) {
        (TpSplit::None, _) | (_, OpType::Other(_)) => None,
        (TpSplit::Batch, _) => Some(0),
        (TpSplit::Column, OpType::Fc) => Some(2),
        (TpSplit::Row, OpType::Fc) => Some(1),
        (TpSplit::Column, OpType::Bmm) => Some(3),
        (TpSplit::Row, OpType::Bmm) => Some(2),
        (TpSplit::Column, _) => Some(1),
        (TpSplit::Row, _) => Some(0),
    };
    if let Some(a) = axis {
        d[a] = ceil_div(d[a], w);
    }
    d
}

/// Total gradient bytes: `param_bytes` annotations on forward nodes if any
/// exist, otherwise FC weights and biases plus layernorm scale and shift.
pub fn gradient_bytes(g: &OpGraph) -> f64 {
    let fwd = || g.nodes().iter().filter(|n| n.ann.pass == Pass::Forward);
    if fwd().any(|n| n.ann.param_bytes.is_some()) {
        return fwd().filter_map(|n| n.ann.param_bytes).map(|b| b as f64).sum();
    }
    fwd()
        .map(|n| {
            let d = &n.kernel.dims;
            let elems = match n.kernel.op_type {
                OpType::Fc => d[1] * d[2] + d[2],
                OpType::LayerNorm => 2 * d[1],
                _ => 0,
            };
            (elems * n.kernel.dtype.bytes()) as f64
        })
        .sum()
}

/// Plan file:
///
/// ```toml
/// strategy = "pipeline"     # data | tensor | pipeline
/// width = 4
/// microbatches = 4          # pipeline only, default 1
/// global_batch = 16         # default: the graph's batch size
/// num_gpus = 4              # default: width
/// link_bw = "900 GB/s"      # number in bytes/s or a string with units
/// link_utilization = 0.75   # default 0.75
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub strategy: Strategy,
    pub width: u32,
    #[serde(default = "one")]
    pub microbatches: u32,
    #[serde(default)]
    pub global_batch: Option<u64>,
    #[serde(default)]
    pub num_gpus: Option<u32>,
    pub link_bw: Quantity,
    #[serde(default = "default_link_util")]
    pub link_utilization: f64,
}

fn one() -> u32 {
    1
}

fn default_link_util() -> f64 {
    DEFAULT_LINK_UTILIZATION
}

impl PlanConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::parse(path, line, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn plan(&self) -> ParallelPlan {
        ParallelPlan {
            strategy: self.strategy,
            width: self.width,
            microbatches: self.microbatches,
            global_batch: self.global_batch,
        }
    }

    pub fn server(&self, gpu: GpuSpec) -> Result<ServerSpec> {
        let link_bw = self
            .link_bw
            .to_base(UnitKind::Bandwidth)
            .map_err(|m| Error::InvalidPlan(format!("link_bw: {m}")))?;
        let s = ServerSpec {
            gpu,
            num_gpus: self.num_gpus.unwrap_or(self.width),
            link_bw,
            link_utilization: self.link_utilization,
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;

    fn server(bw: f64, u: f64) -> ServerSpec {
        ServerSpec {
            gpu: Catalog::builtin().get("H100").unwrap().clone(),
            num_gpus: 8,
            link_bw: bw,
            link_utilization: u,
        }
    }

    #[test]
    fn allreduce_closed_form() {
        let s = server(300e9, 1.0);
        let t = allreduce_latency(4e8, 4, &s).unwrap();
        assert!((t - 2.0e-3).abs() < 1e-15);
        assert_eq!(allreduce_latency(4e8, 2, &s).unwrap(), 4e8 / 300e9);
        let half = allreduce_latency(4e8, 4, &server(300e9, 0.5)).unwrap();
        assert!((half - 2.0 * t).abs() < 1e-15);
        assert!(allreduce_latency(4e8, 1, &s).is_err());
    }

    #[test]
    fn sendrecv_closed_form() {
        assert_eq!(sendrecv_latency(9e11, &server(900e9, 1.0)).unwrap(), 1.0);
        assert_eq!(sendrecv_latency(9e11, &server(900e9, 0.5)).unwrap(), 2.0);
        assert!(sendrecv_latency(0.0, &server(1.0, 1.0)).is_err());
    }

    #[test]
    fn plan_file_parses_units() {
        let text = "strategy = \"data\"\nwidth = 4\nlink_bw = \"600 GB/s\"\n";
        let c = PlanConfig::parse(text, Path::new("p")).unwrap();
        let s = c.server(Catalog::builtin().get("A100-40GB").unwrap().clone()).unwrap();
        assert_eq!(s.link_bw, 600e9);
        assert_eq!(s.link_utilization, 0.75);
        assert_eq!(s.num_gpus, 4);
        assert_eq!(c.plan().microbatches, 1);
        let bad = "strategy = \"ring\"\nwidth = 4\nlink_bw = 1\n";
        assert!(matches!(PlanConfig::parse(bad, Path::new("p")), Err(Error::Parse { line: 1, .. })));
    }
}
