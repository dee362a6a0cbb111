use std::path::Path;

use proptest::prelude::*;

use tileperf::distributed::{estimate_parallel, gradient_bytes, ring_allreduce, ParallelPlan, ServerSpec, Strategy};
use tileperf::graph::{fuse, FusionMode};
use tileperf::kernel::{count_tiles, memory_bound_latency, roofline_bw};
use tileperf::oracle::{OracleModel, OracleSpec};
use tileperf::predictor::LatencyModel;
use tileperf::report::predict_graph;
use tileperf::{describe_kernel, Catalog, Dtype, OpGraph, OpType, TileDb};

fn parse(nodes: &[String], edges: &[String], mode: &str) -> OpGraph {
    let text = format!(
        r#"{{"format":"tileperf-graph","version":1,"metadata":{{"batch_size":8,"mode":"{mode}"}},"nodes":[{}],"edges":[{}]}}"#,
        nodes.join(","),
        edges.join(",")
    );
    OpGraph::parse_str(&text, Path::new("inline")).unwrap()
}

fn oracle_total(g: &OpGraph, gpu: &str) -> f64 {
    let cat = Catalog::builtin();
    let spec = OracleSpec::default();
    let db = TileDb::new();
    predict_graph(g, cat.get(gpu).unwrap(), &OracleModel { spec: &spec, tiledb: &db })
        .unwrap()
        .total
}

fn server(gpu: &str) -> ServerSpec {
    ServerSpec {
        gpu: Catalog::builtin().get(gpu).unwrap().clone(),
        num_gpus: 8,
        link_bw: 600e9,
        link_utilization: 0.75,
    }
}

const OPS: [&str; 6] = ["fc", "bmm", "softmax", "layernorm", "gelu", "add"];

fn node_json(id: &str, op: &str, a: u64, b: u64, c: u64) -> String {
    let dims = match op {
        "fc" => format!("[{a},{b},{c}]"),
        "bmm" => format!("[4,{a},{b},{c}]"),
        _ => format!("[{a},{b}]"),
    };
    format!(r#"{{"id":"{id}","op":"{op}","dims":{dims}}}"#)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_cover_the_output_without_a_spare_slab(
        dims in prop::collection::vec(1u64..5000, 1..=4),
        tile_seed in prop::collection::vec(1u64..300, 4),
    ) {
        let tile: Vec<u64> = dims.iter().zip(&tile_seed).map(|(_, t)| *t).collect();
        let n = count_tiles(&dims, &tile);
        let covered: u128 = u128::from(n) * tile.iter().map(|&t| u128::from(t)).product::<u128>();
        let out: u128 = dims.iter().map(|&d| u128::from(d)).product();
        prop_assert!(covered >= out);
        // dropping the last slab along any axis must leave elements uncovered
        for ax in 0..dims.len() {
            let per_axis = dims[ax].div_ceil(tile[ax]);
            prop_assert!((per_axis - 1) * tile[ax] < dims[ax]);
        }
    }

    #[test]
    fn tile_count_is_monotone_in_dims(
        dims in prop::collection::vec(1u64..2000, 1..=4),
        tile in prop::collection::vec(1u64..100, 4),
        ax in 0usize..4,
        grow in 1u64..500,
    ) {
        let tile = &tile[..dims.len()];
        let ax = ax % dims.len();
        let mut bigger = dims.clone();
        bigger[ax] += grow;
        prop_assert!(count_tiles(&bigger, tile) >= count_tiles(&dims, tile));
    }

    #[test]
    fn oracle_latency_respects_both_roofline_limbs(
        op in 0usize..OPS.len(),
        a in 1u64..4096, b in 1u64..4096, c in 1u64..4096,
        gpu in 0usize..11,
    ) {
        let cat = Catalog::builtin();
        let gpu = &cat.gpus()[gpu % cat.len()];
        let g = parse(&[node_json("n", OPS[op], a, b, c)], &[], "inference");
        let k = &g.nodes()[0].kernel;
        let spec = OracleSpec::default();
        let db = TileDb::new();
        let p = OracleModel { spec: &spec, tiledb: &db }.predict_kernel(k, gpu).unwrap();
        prop_assert!(roofline_bw(k, gpu) <= k.peak_flops(gpu));
        prop_assert!(p.latency >= k.flops_k / k.peak_flops(gpu) * (1.0 - 1e-12));
        prop_assert!(p.latency >= k.mem_k / gpu.mem_bw * (1.0 - 1e-12));
        prop_assert!(memory_bound_latency(k, gpu) >= k.mem_k / gpu.mem_bw * (1.0 - 1e-12));
    }

    #[test]
    fn graph_total_ignores_node_order(
        specs in prop::collection::vec((0usize..OPS.len(), 1u64..2048, 1u64..2048, 1u64..2048), 2..12),
        rotate in 0usize..12,
    ) {
        let nodes: Vec<String> = specs
            .iter()
            .enumerate()
            .map(|(i, &(op, a, b, c))| node_json(&format!("n{i}"), OPS[op], a, b, c))
            .collect();
        let mut shuffled = nodes.clone();
        shuffled.rotate_left(rotate % nodes.len());
        shuffled.reverse();
        let x = oracle_total(&parse(&nodes, &[], "inference"), "A100-40GB");
        let y = oracle_total(&parse(&shuffled, &[], "inference"), "A100-40GB");
        prop_assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn fusion_conserves_flops_and_drops_only_intermediates(
        chain in prop::collection::vec(2usize..OPS.len(), 2..5),
        rows in 1u64..8192,
        cols in 1u64..8192,
    ) {
        let ids: Vec<String> = (0..chain.len()).map(|i| format!("v{i}")).collect();
        let nodes: Vec<String> = chain.iter().zip(&ids).map(|(&op, id)| node_json(id, OPS[op], rows, cols, 1)).collect();
        let edges: Vec<String> = ids.windows(2).map(|w| format!(r#"{{"src":"{}","dst":"{}"}}"#, w[0], w[1])).collect();
        let g = parse(&nodes, &edges, "inference");
        let fused = fuse(&g, std::slice::from_ref(&ids)).unwrap();
        prop_assert_eq!(fused.len(), 1);
        let f = &fused.nodes()[0].kernel;
        let ks: Vec<_> = g.nodes().iter().map(|n| &n.kernel).collect();
        let flops: f64 = ks.iter().map(|k| k.flops_k).sum();
        let inter: f64 = ks[..ks.len() - 1].iter().map(|k| k.out_bytes()).sum();
        prop_assert_eq!(f.flops_k, flops);
        prop_assert_eq!(f.mem_k, ks.iter().map(|k| k.mem_k).sum::<f64>() - 2.0 * inter);
        prop_assert!(f.mem_k > 0.0);
    }

    #[test]
    fn allreduce_is_linear_in_bytes_and_grows_with_ring_size(
        bytes in 1.0f64..1e11,
        scale in 0.01f64..100.0,
        p in 2u32..64,
    ) {
        let t = ring_allreduce(bytes, p, 300e9, 0.8).unwrap();
        let scaled = ring_allreduce(bytes * scale, p, 300e9, 0.8).unwrap();
        prop_assert!((scaled - scale * t).abs() <= 1e-12 * scaled);
        prop_assert!(ring_allreduce(bytes, p + 1, 300e9, 0.8).unwrap() > t);
        prop_assert!(ring_allreduce(bytes, 1, 300e9, 0.8).is_err());
    }
}

fn layer_graph(layers: usize, training: bool) -> OpGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for l in 0..layers {
        nodes.push(format!(r#"{{"id":"l{l}.fc","op":"fc","dims":[1024,512,512],"layer":{l}}}"#));
        nodes.push(format!(r#"{{"id":"l{l}.act","op":"relu","dims":[1024,512],"layer":{l}}}"#));
        edges.push(format!(r#"{{"src":"l{l}.fc","dst":"l{l}.act"}}"#));
        if l > 0 {
            edges.push(format!(r#"{{"src":"l{}.act","dst":"l{l}.fc"}}"#, l - 1));
        }
        if training {
            nodes.push(format!(
                r#"{{"id":"l{l}.bw","op":"fc","dims":[1024,512,512],"layer":{l},"pass":"backward"}}"#
            ));
        }
    }
    parse(&nodes, &edges, if training { "training" } else { "inference" })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn data_parallel_adds_exactly_one_gradient_allreduce(width in 2u32..8, layers in 1usize..5) {
        let g = layer_graph(layers, true);
        let s = server("H100");
        let spec = OracleSpec::default();
        let db = TileDb::new();
        let model = OracleModel { spec: &spec, tiledb: &db };
        let plan = ParallelPlan { strategy: Strategy::Data, width, microbatches: 1, global_batch: None };
        let r = estimate_parallel(&g, &plan, &s, &model, FusionMode::None).unwrap();
        let ar = r.row("allreduce").unwrap().latency;
        prop_assert_eq!(ar, ring_allreduce(gradient_bytes(&g), width, s.link_bw, s.link_utilization).unwrap());
        prop_assert_eq!(r.total, r.row("compute").unwrap().latency + ar);
        // a wider ring never makes the gradient exchange cheaper
        let wider = ParallelPlan { width: width + 1, ..plan };
        let r2 = estimate_parallel(&g, &wider, &s, &model, FusionMode::None).unwrap();
        prop_assert!(r2.row("allreduce").unwrap().latency > ar);
    }

    #[test]
    fn pipeline_span_bounds(p in 2u32..=4, m in 1u32..=8, extra in 0usize..3) {
        let g = layer_graph(p as usize + extra, false);
        let s = server("A100-40GB");
        let spec = OracleSpec::default();
        let db = TileDb::new();
        let model = OracleModel { spec: &spec, tiledb: &db };
        let plan = ParallelPlan { strategy: Strategy::Pipeline, width: p, microbatches: m, global_batch: None };
        let r = estimate_parallel(&g, &plan, &s, &model, FusionMode::Annotated).unwrap();
        let stages: Vec<f64> = r.rows.iter().filter(|x| x.kind == "stage").map(|x| x.latency).collect();
        prop_assert_eq!(stages.len(), p as usize);
        let span = r.row("span").unwrap().latency;
        let max = stages.iter().copied().fold(0.0, f64::max);
        let sum: f64 = stages.iter().sum();
        // every microbatch visits every stage once; the bubble adds p-1 slots
        prop_assert!(span >= f64::from(m) * max);
        prop_assert!(span >= sum * (1.0 - 1e-12));
        prop_assert!(r.total >= span);
    }
}

#[test]
fn describe_rejects_zero_dims() {
    assert!(describe_kernel(OpType::Fc, &[0, 4, 4], Dtype::Fp32).is_err());
}
