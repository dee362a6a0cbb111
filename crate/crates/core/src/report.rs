//! Per-device latency reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::catalog::GpuSpec;
use crate::error::Result;
use crate::graph::OpGraph;
use crate::kernel::{Dtype, OpType, TileShape};
use crate::numeric::exact_sum;
use crate::predictor::LatencyModel;
use crate::tiledb::dash_join;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyPath {
    Predictor,
    MemoryBound,
}

impl LatencyPath {
    pub fn as_str(self) -> &'static str {
        match self {
            LatencyPath::Predictor => "predictor",
            LatencyPath::MemoryBound => "memory-bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRow {
    pub node_id: String,
    pub op: OpType,
    pub dims: Vec<u64>,
    pub dtype: Dtype,
    pub fused_ops: usize,
    pub tile: Option<TileShape>,
    pub waves: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub utilization: Option<f64>,
    pub latency: f64,
    pub path: LatencyPath,
}

impl NodeRow {
    /// Rollup key: the predictor family, or `other`.
    pub fn group(&self) -> &'static str {
        self.op.family().map_or("other", |f| f.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollup {
    pub group: String,
    pub count: usize,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub model: String,
    pub gpu: String,
    pub rows: Vec<NodeRow>,
    pub total: f64,
}

/// Predict every node and sum. Kernels run back to back, so the device
/// latency is the plain sum; it is computed exactly, so node order does
/// not change a single bit of the total.
pub fn predict_graph(g: &OpGraph, gpu: &GpuSpec, model: &dyn LatencyModel) -> Result<LatencyReport> {
    let mut rows = Vec::with_capacity(g.len());
    for n in g.nodes() {
        let p = model.predict_kernel(&n.kernel, gpu)?;
        rows.push(NodeRow {
            node_id: n.id.clone(),
            op: n.kernel.op_type.clone(),
            dims: n.kernel.dims.clone(),
            dtype: n.kernel.dtype,
            fused_ops: n.kernel.fused_ops,
            tile: p.tile,
            waves: p.num_waves,
            alpha: p.coeffs.map(|c| c.alpha),
            beta: p.coeffs.map(|c| c.beta),
            utilization: p.utilization,
            latency: p.latency,
            path: if p.memory_bound {
                LatencyPath::MemoryBound
            } else {
                LatencyPath::Predictor
            },
        });
    }
    let total = exact_sum(rows.iter().map(|r| r.latency));
    Ok(LatencyReport {
        model: g.meta.model.clone(),
        gpu: gpu.name.clone(),
        rows,
        total,
    })
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |x| x.to_string())
}

fn opt_e(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

pub const REPORT_CSV_HEADER: &str =
    "kind,node_id,op,dims,dtype,fused_ops,tile,waves,alpha,beta,utilization,latency_s,path";

impl LatencyReport {
    pub fn rollup(&self) -> Vec<Rollup> {
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.group()).or_default().push(r.latency);
        }
        groups
            .into_iter()
            .map(|(g, v)| Rollup {
                group: g.to_string(),
                count: v.len(),
                latency: exact_sum(v),
            })
            .collect()
    }

    /// Predicted latency by label: node id, rollup group or `total`.
    pub fn labelled(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self.rows.iter().map(|r| (r.node_id.clone(), r.latency)).collect();
        out.extend(self.rollup().into_iter().map(|r| (r.group, r.latency)));
        out.push(("total".into(), self.total));
        out
    }

    /// Machine-readable report. Floats use the shortest exact form, so the
    /// `latency_s` column round-trips bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "node,{},{},{},{},{},{},{},{},{},{},{:e},{}",
                csv_field(&r.node_id),
                r.op,
                dash_join(&r.dims),
                r.dtype,
                r.fused_ops,
                opt(&r.tile),
                opt(&r.waves),
                opt_e(r.alpha),
                opt_e(r.beta),
                opt_e(r.utilization),
                r.latency,
                r.path.as_str()
            );
        }
        for g in self.rollup() {
            let _ = writeln!(out, "rollup,{},,,,{},,,,,,{:e},", g.group, g.count, g.latency);
        }
        let _ = writeln!(out, "total,,,,,{},,,,,,{:e},", self.rows.len(), self.total);
        out
    }

    /// Human-readable summary with times in milliseconds.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}  gpu {}  kernels {}", or_dash(&self.model), self.gpu, self.rows.len());
        let _ = writeln!(
            out,
            "{:<28} {:<10} {:<22} {:<12} {:>7} {:>6} {:>12}",
            "node", "op", "dims", "tile", "waves", "util", "latency_ms"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:<10} {:<22} {:<12} {:>7} {:>6} {:>12.4}",
                truncate(&r.node_id, 28),
                truncate(&r.op.to_string(), 10),
                truncate(&dash_join(&r.dims), 22),
                r.tile.as_ref().map_or("-".into(), |t| t.to_string()),
                r.waves.map_or("-".into(), |w| w.to_string()),
                r.utilization.map_or("-".into(), |u| format!("{u:.3}")),
                r.latency * 1e3
            );
        }
        let _ = writeln!(out);
        for g in self.rollup() {
            let share = if self.total > 0.0 { 100.0 * g.latency / self.total } else { 0.0 };
            let _ = writeln!(out, "{:<12} {:>5} kernels {:>12.4} ms {:>6.1}%", g.group, g.count, g.latency * 1e3, share);
        }
        let _ = writeln!(out, "{:<12} {:>5} kernels {:>12.4} ms", "total", self.rows.len(), self.total * 1e3);
        out
    }
}

fn or_dash(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn truncate(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(n - 1).collect();
        t.push('~');
        t
    }
}

/// Quote a CSV field if it needs it.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
