//! Operator graphs: parsing, validation and fusion.
//!
//! Graph files are JSON documents, format version 1:
//!
//! ```json
//! {
//!   "format": "tileperf-graph",
//!   "version": 1,
//!   "metadata": { "model": "gpt2-large", "batch_size": 4, "mode": "inference" },
//!   "nodes": [
//!     { "id": "h0.fc1", "op": "fc", "dims": [4096, 1280, 5120], "dtype": "fp32",
//!       "layer": 0, "fusion_group": "h0.mlp" },
//!     { "id": "h0.gelu", "op": "gelu", "dims": [4096, 5120], "layer": 0,
//!       "fusion_group": "h0.mlp" }
//!   ],
//!   "edges": [ { "src": "h0.fc1", "dst": "h0.gelu" } ]
//! }
//! ```
//!
//! Required node fields are `id`, `op` and `dims`. Optional ones:
//!
//! | field          | meaning                                                        |
//! |----------------|----------------------------------------------------------------|
//! | `dtype`        | `fp32` (default) or `fp16`                                     |
//! | `fusion_group` | nodes sharing a group are fused into one kernel                |
//! | `pass`         | `forward` (default) or `backward`                              |
//! | `layer`        | repeated-block index, needed for tensor and pipeline plans     |
//! | `batch_axis`   | index into `dims` that scales with batch; default 0, `null` = none |
//! | `tp_split`     | `column`, `row`, `batch` or `none` under tensor parallelism    |
//! | `param_bytes`  | bytes of parameters owned by the node (gradient all-reduce)    |
//!
//! Unknown fields are rejected. `op` names follow the tile database
//! (`bmm`, `fc`, `add`, `gelu`, `softmax`, `layernorm`, `other:<name>`, ...).
//! Training graphs list backward kernels explicitly as `pass: "backward"`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{describe_kernel, Dtype, KernelDesc, OpType};
use crate::numeric::ceil_div;

pub const GRAPH_FORMAT: &str = "tileperf-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    #[default]
    Forward,
    Backward,
}

/// Which dimension a node shards along under tensor parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TpSplit {
    /// FC output features; for vector ops, the column dimension.
    Column,
    /// FC input features.
    Row,
    /// The leading dimension (attention heads folded into batch).
    Batch,
    /// Replicated on every device.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphMeta {
    #[serde(default)]
    pub model: String,
    pub batch_size: u64,
    #[serde(default)]
    pub mode: Mode,
}

/// Node fields that only matter to fusion and distributed planning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAnnotations {
    pub pass: Pass,
    pub layer: Option<u32>,
    pub batch_axis: Option<usize>,
    pub tp_split: Option<TpSplit>,
    pub param_bytes: Option<u64>,
}

impl Default for NodeAnnotations {
    fn default() -> Self {
        NodeAnnotations {
            pass: Pass::Forward,
            layer: None,
            batch_axis: Some(0),
            tp_split: None,
            param_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kernel: KernelDesc,
    pub fusion_group: Option<String>,
    pub ann: NodeAnnotations,
    /// Ids of the original nodes folded into this one; just `[id]` if unfused.
    pub members: Vec<String>,
}

impl GraphNode {
    pub fn is_fused(&self) -> bool {
        self.members.len() > 1
    }
}

/// A validated, topologically ordered operator graph.
#[derive(Debug, Clone, PartialEq)]
pub struct OpGraph {
    pub meta: GraphMeta,
    nodes: Vec<GraphNode>,
    /// Edges as `(producer, consumer)` indices into `nodes`, sorted.
    edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    format: String,
    version: u32,
    metadata: GraphMeta,
    #[serde(default)]
    nodes: Vec<NodeFile>,
    #[serde(default)]
    edges: Vec<EdgeFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: String,
    op: String,
    dims: Vec<u64>,
    #[serde(default)]
    dtype: Option<String>,
    #[serde(default)]
    fusion_group: Option<String>,
    #[serde(default)]
    pass: Pass,
    #[serde(default)]
    layer: Option<u32>,
    #[serde(default = "default_batch_axis")]
    batch_axis: Option<usize>,
    #[serde(default)]
    tp_split: Option<TpSplit>,
    #[serde(default)]
    param_bytes: Option<u64>,
}

fn default_batch_axis() -> Option<usize> {
    Some(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeFile {
    src: String,
    dst: String,
}

impl OpGraph {
    /// Validate and topologically order a graph. Ties in the order are
    /// broken by position in `nodes`, so the result is deterministic.
    pub fn new(meta: GraphMeta, nodes: Vec<GraphNode>, edges: Vec<(String, String)>) -> Result<Self> {
        if meta.batch_size == 0 {
            return Err(Error::InvalidGraph("metadata.batch_size must be positive".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
            if let Some(axis) = n.ann.batch_axis {
                if axis >= n.kernel.dims.len() {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}`: batch_axis {axis} is out of range for {} dims",
                        n.id,
                        n.kernel.dims.len()
                    )));
                }
            }
        }
        let mut idx_edges = BTreeSet::new();
        for (src, dst) in &edges {
            let s = *index.get(src.as_str()).ok_or_else(|| Error::DanglingEdge(src.clone()))?;
            let d = *index.get(dst.as_str()).ok_or_else(|| Error::DanglingEdge(dst.clone()))?;
            if s == d {
                return Err(Error::Cycle(src.clone()));
            }
            idx_edges.insert((s, d));
        }
        let order = topo_order(nodes.len(), &idx_edges).map_err(|i| Error::Cycle(nodes[i].id.clone()))?;
        let mut pos = vec![0usize; nodes.len()];
        for (p, &i) in order.iter().enumerate() {
            pos[i] = p;
        }
        let mut slots: Vec<Option<GraphNode>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<GraphNode> = order.iter().map(|&i| slots[i].take().expect("each index once")).collect();
        let edges: Vec<(usize, usize)> = idx_edges.iter().map(|&(s, d)| (pos[s], pos[d])).collect::<BTreeSet<_>>().into_iter().collect();
        let g = OpGraph { meta, nodes, edges };
        Ok(g)
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if file.format != GRAPH_FORMAT {
            return Err(Error::InvalidGraph(format!(
                "format is `{}`, expected `{GRAPH_FORMAT}`",
                file.format
            )));
        }
        if file.version != GRAPH_VERSION {
            return Err(Error::InvalidGraph(format!(
                "graph version {} is not supported (expected {GRAPH_VERSION})",
                file.version
            )));
        }
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for n in file.nodes {
            let op: OpType = n.op.parse()?;
            let dtype = match n.dtype.as_deref() {
                Some(d) => d.parse()?,
                None => Dtype::Fp32,
            };
            let kernel = describe_kernel(op, &n.dims, dtype).map_err(|e| Error::InvalidGraph(format!("node `{}`: {e}", n.id)))?;
            nodes.push(GraphNode {
                members: vec![n.id.clone()],
                id: n.id,
                kernel,
                fusion_group: n.fusion_group,
                ann: NodeAnnotations {
                    pass: n.pass,
                    layer: n.layer,
                    batch_axis: n.batch_axis,
                    tp_split: n.tp_split,
                    param_bytes: n.param_bytes,
                },
            });
        }
        let edges = file.edges.into_iter().map(|e| (e.src, e.dst)).collect();
        let g = OpGraph::new(file.metadata, nodes, edges)?;
        // derived subgraphs may hold one pass only; files must be complete
        if g.meta.mode == Mode::Training && !g.nodes.iter().any(|n| n.ann.pass == Pass::Backward) {
            return Err(Error::InvalidGraph(
                "training graphs must list their backward kernels (no node has pass = \"backward\")".into(),
            ));
        }
        g.check_shapes()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn consumers(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == i).map(|e| e.1)
    }

    pub fn producers(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == i).map(|e| e.0)
    }

    /// Every producer's output must match one of its consumer's input
    /// tensors by element count. Edges touching OTHER nodes are exempt.
    pub fn check_shapes(&self) -> Result<()> {
        for &(s, d) in &self.edges {
            let (p, c) = (&self.nodes[s], &self.nodes[d]);
            if p.is_fused() || c.is_fused() {
                continue;
            }
            let (Some(inputs), false) = (input_elements(&c.kernel), matches!(p.kernel.op_type, OpType::Other(_))) else {
                continue;
            };
            let out = p.kernel.out_elements();
            if !inputs.contains(&out) {
                return Err(Error::ShapeInconsistent {
                    src: p.id.clone(),
                    dst: c.id.clone(),
                    detail: format!(
                        "{} produces {out} elements; {} reads tensors of {:?} elements",
                        p.kernel.op_type, c.kernel.op_type, inputs
                    ),
                });
            }
        }
        Ok(())
    }

    /// Same topology with each unfused node's dims replaced by `f(node)`.
    /// Kernels are re-described from scratch.
    pub fn map_dims(&self, mut f: impl FnMut(&GraphNode) -> Result<Vec<u64>>) -> Result<OpGraph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            if n.is_fused() {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` is already fused; reshape before fusing",
                    n.id
                )));
            }
            let dims = f(n)?;
            let kernel = if dims == n.kernel.dims {
                n.kernel.clone()
            } else {
                describe_kernel(n.kernel.op_type.clone(), &dims, n.kernel.dtype)?
            };
            nodes.push(GraphNode { kernel, ..n.clone() });
        }
        Ok(OpGraph {
            meta: self.meta.clone(),
            nodes,
            edges: self.edges.clone(),
        })
    }

    /// Rescale every node's batch axis from `meta.batch_size` to `batch`,
    /// rounding up (`ceil(d * batch / batch_size)`).
    pub fn with_batch(&self, batch: u64) -> Result<OpGraph> {
        if batch == 0 {
            return Err(Error::InvalidPlan("batch size must be positive".into()));
        }
        let from = self.meta.batch_size;
        if batch == from {
            return Ok(self.clone());
        }
        let mut g = self.map_dims(|n| {
            let mut d = n.kernel.dims.clone();
            if let Some(axis) = n.ann.batch_axis {
                d[axis] = ceil_div(d[axis] * batch, from).max(1);
            }
            Ok(d)
        })?;
        g.meta.batch_size = batch;
        Ok(g)
    }

    /// Subgraph of the nodes for which `keep` holds, with the edges between them.
    pub fn filter(&self, mut keep: impl FnMut(usize, &GraphNode) -> bool) -> OpGraph {
        let mut new_index = vec![None; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if keep(i, n) {
                new_index[i] = Some(nodes.len());
                nodes.push(n.clone());
            }
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(s, d)| Some((new_index[s]?, new_index[d]?)))
            .collect();
        OpGraph {
            meta: self.meta.clone(),
            nodes,
            edges,
        }
    }
}

/// Kahn's algorithm, always taking the lowest ready index. `Err` carries a
/// node on a cycle.
fn topo_order(n: usize, edges: &BTreeSet<(usize, usize)>) -> std::result::Result<Vec<usize>, usize> {
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in edges {
        indeg[d] += 1;
        out[s].push(d);
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &d in &out[i] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.insert(d);
            }
        }
    }
    if order.len() < n {
        return Err((0..n).find(|&i| indeg[i] > 0).expect("some node left"));
    }
    Ok(order)
}

/// Element counts of the activation tensors a kernel reads.
fn input_elements(k: &KernelDesc) -> Option<Vec<u64>> {
    let d = &k.dims;
    match k.op_type {
        OpType::Bmm => Some(vec![d[0] * d[1] * d[2], d[0] * d[2] * d[3]]),
        OpType::Fc => Some(vec![d[0] * d[1]]),
        OpType::Elementwise(_) | OpType::Softmax | OpType::LayerNorm => Some(vec![d[0] * d[1]]),
        OpType::Other(_) => None,
    }
}

/// Which groups to fuse before prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Predict every node separately.
    None,
    /// Fuse the `fusion_group` annotations in the file.
    #[default]
    Annotated,
    /// Ignore annotations and fuse greedily.
    Greedy,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "annotated" => Ok(FusionMode::Annotated),
            "greedy" => Ok(FusionMode::Greedy),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion mode `{other}` (expected none, annotated or greedy)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Annotated => "annotated",
            FusionMode::Greedy => "greedy",
        })
    }
}

pub fn apply_fusion(g: &OpGraph, mode: FusionMode) -> Result<OpGraph> {
    match mode {
        FusionMode::None => Ok(g.clone()),
        FusionMode::Annotated => fuse(g, &annotated_groups(g)),
        FusionMode::Greedy => fuse(g, &greedy_groups(g)),
    }
}

/// Groups named by `fusion_group` annotations, members in graph order.
pub fn annotated_groups(g: &OpGraph) -> Vec<Vec<String>> {
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for n in &g.nodes {
        if let Some(tag) = n.fusion_group.as_deref() {
            let e = groups.entry(tag).or_default();
            if e.is_empty() {
                first_seen.push(tag);
            }
            e.push(n.id.clone());
        }
    }
    first_seen.into_iter().map(|t| groups.remove(t).expect("seen tag")).collect()
}

/// Maximal single-consumer chains of elementwise ops, and a GEMM whose only
/// consumer is an activation.
pub fn greedy_groups(g: &OpGraph) -> Vec<Vec<String>> {
    let n = g.nodes.len();
    let mut taken = vec![false; n];
    let mut groups = Vec::new();
    let sole_consumer = |i: usize| {
        let mut it = g.consumers(i);
        match (it.next(), it.next()) {
            (Some(c), None) => Some(c),
            _ => None,
        }
    };
    let same_pass = |a: usize, b: usize| g.nodes[a].ann.pass == g.nodes[b].ann.pass;
    for i in 0..n {
        if taken[i] {
            continue;
        }
        let op = &g.nodes[i].kernel.op_type;
        if op.is_gemm() {
            if let Some(c) = sole_consumer(i) {
                let act = matches!(g.nodes[c].kernel.op_type, OpType::Elementwise(k) if k.is_activation());
                if act && !taken[c] && same_pass(i, c) && g.nodes[c].kernel.dtype == g.nodes[i].kernel.dtype {
                    taken[i] = true;
                    taken[c] = true;
                    groups.push(vec![g.nodes[i].id.clone(), g.nodes[c].id.clone()]);
                }
            }
        } else if matches!(op, OpType::Elementwise(_)) {
            let mut chain = vec![i];
            let mut cur = i;
            while let Some(c) = sole_consumer(cur) {
                let ok = matches!(g.nodes[c].kernel.op_type, OpType::Elementwise(_))
                    && !taken[c]
                    && same_pass(cur, c)
                    && g.nodes[c].kernel.dtype == g.nodes[i].kernel.dtype;
                if !ok {
                    break;
                }
                chain.push(c);
                cur = c;
            }
            if chain.len() > 1 {
                for &c in &chain {
                    taken[c] = true;
                }
                groups.push(chain.into_iter().map(|c| g.nodes[c].id.clone()).collect());
            }
        }
    }
    groups
}

/// Replace each group by a single kernel.
///
/// A group must be a path through the graph: all vector ops, or one GEMM
/// followed by elementwise ops. The fused kernel keeps the first member's
/// op type, dims and tiling; FLOPs add up; each intermediate tensor saves
/// its write and its read, or only the read if something outside the group
/// also consumes it.
pub fn fuse(g: &OpGraph, groups: &[Vec<String>]) -> Result<OpGraph> {
    let mut owner: Vec<Option<usize>> = vec![None; g.nodes.len()];
    let mut resolved: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let label = group.join(",");
        let bad = |reason: String| Error::InvalidFusion {
            group: label.clone(),
            reason,
        };
        if group.is_empty() {
            return Err(bad("empty group".into()));
        }
        let mut idx = Vec::with_capacity(group.len());
        for id in group {
            let i = g.index_of(id).ok_or_else(|| bad(format!("no node `{id}`")))?;
            if owner[i].is_some() {
                return Err(bad(format!("node `{id}` is in more than one group")));
            }
            owner[i] = Some(gi);
            idx.push(i);
        }
        idx.sort_unstable();
        check_fusible(g, &idx).map_err(bad)?;
        resolved.push(idx);
    }

    // new node per group (at its first member) or per ungrouped node
    let mut new_of = vec![usize::MAX; g.nodes.len()];
    let mut nodes = Vec::new();
    for i in 0..g.nodes.len() {
        match owner[i] {
            Some(gi) if resolved[gi][0] != i => continue,
            Some(gi) => {
                let members = &resolved[gi];
                for &m in members {
                    new_of[m] = nodes.len();
                }
                nodes.push(fused_node(g, members));
            }
            None => {
                new_of[i] = nodes.len();
                nodes.push(g.nodes[i].clone());
            }
        }
    }
    let edges: BTreeSet<(usize, usize)> = g
        .edges
        .iter()
        .map(|&(s, d)| (new_of[s], new_of[d]))
        .filter(|(s, d)| s != d)
        .collect();
    let ids = |i: usize| nodes[i].id.clone();
    let edge_ids: Vec<(String, String)> = edges.iter().map(|&(s, d)| (ids(s), ids(d))).collect();
    // a fused group can only create a cycle if it was not a path; keep the
    // check anyway so the result is always a DAG
    OpGraph::new(g.meta.clone(), nodes, edge_ids)
}

fn check_fusible(g: &OpGraph, idx: &[usize]) -> std::result::Result<(), String> {
    if idx.len() == 1 {
        return Ok(());
    }
    let first = &g.nodes[idx[0]].kernel;
    for (p, &i) in idx.iter().enumerate() {
        let k = &g.nodes[i].kernel;
        let ok = match &k.op_type {
            OpType::Other(_) => false,
            op if op.is_gemm() => p == 0,
            OpType::Elementwise(_) => true,
            _ => !first.op_type.is_gemm(),
        };
        if !ok {
            return Err(format!(
                "`{}` ({}) cannot be fused here; groups are vector-op chains or a GEMM followed by elementwise ops",
                g.nodes[i].id, k.op_type
            ));
        }
        if k.dtype != first.dtype {
            return Err("members have different dtypes".into());
        }
        if g.nodes[i].ann.pass != g.nodes[idx[0]].ann.pass {
            return Err("members mix forward and backward passes".into());
        }
    }
    for w in idx.windows(2) {
        if !g.edges.binary_search(&(w[0], w[1])).is_ok() {
            return Err(format!(
                "not a path: no edge `{}` -> `{}`",
                g.nodes[w[0]].id, g.nodes[w[1]].id
            ));
        }
    }
    Ok(())
}

fn fused_node(g: &OpGraph, idx: &[usize]) -> GraphNode {
    let first = &g.nodes[idx[0]];
    if idx.len() == 1 {
        return first.clone();
    }
    let in_group: BTreeSet<usize> = idx.iter().copied().collect();
    let mut flops = 0.0;
    let mut mem = 0.0;
    for &i in idx {
        flops += g.nodes[i].kernel.flops_k;
        mem += g.nodes[i].kernel.mem_k;
    }
    for &i in &idx[..idx.len() - 1] {
        let bytes = g.nodes[i].kernel.out_bytes();
        let escapes = g.consumers(i).any(|c| !in_group.contains(&c));
        mem -= if escapes { bytes } else { 2.0 * bytes };
    }
    let kernel = KernelDesc {
        flops_k: flops,
        mem_k: mem,
        fused_ops: idx.len(),
        ..first.kernel.clone()
    };
    let members: Vec<String> = idx.iter().map(|&i| g.nodes[i].id.clone()).collect();
    let param_bytes = idx
        .iter()
        .filter_map(|&i| g.nodes[i].ann.param_bytes)
        .reduce(|a, b| a + b);
    GraphNode {
        id: members.join("+"),
        kernel,
        fusion_group: first.fusion_group.clone(),
        ann: NodeAnnotations {
            param_bytes,
            ..first.ann.clone()
        },
        members,
    }
}
