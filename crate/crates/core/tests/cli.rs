//! Command-line behaviour: help text, exit codes and output determinism.
//! Set `TILEPERF_BLESS=1` to rewrite the golden help files.

use std::path::{Path, PathBuf};

use tileperf::cli::run_with;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<&str> = std::iter::once("tileperf").chain(args.iter().copied()).collect();
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).to_str().unwrap().to_string()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

const HELP_PATHS: [&[&str]; 12] = [
    &[],
    &["catalog"],
    &["catalog", "list"],
    &["catalog", "show"],
    &["tiledb"],
    &["tiledb", "ingest"],
    &["tiledb", "query"],
    &["gen-data"],
    &["train"],
    &["predict"],
    &["distributed"],
    &["compare"],
];

#[test]
fn help_text_matches_golden_files() {
    let bless = std::env::var_os("TILEPERF_BLESS").is_some();
    let mut stale = Vec::new();
    for path in HELP_PATHS {
        let mut args = path.to_vec();
        args.push("--help");
        let (code, out, err) = run(&args);
        assert_eq!(code, 0, "{args:?}: {err}");
        let name = if path.is_empty() { "tileperf".to_string() } else { path.join("-") };
        let file = golden_dir().join(format!("{name}.txt"));
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&file, &out).unwrap();
        } else if std::fs::read_to_string(&file).ok().as_deref() != Some(out.as_str()) {
            stale.push(name);
        }
    }
    assert!(stale.is_empty(), "help text changed for {stale:?}; rerun with TILEPERF_BLESS=1 if intended");
}

#[test]
fn version_goes_to_stdout() {
    let (code, out, _) = run(&["--version"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("tileperf "));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["frobnicate"][..],
        &["predict", "--gpu", "H100"],
        &["predict", "--gpu", "H100", "--graph", "g.json", "--oracle", "--weights", "w"],
        &["gen-data", "--op", "bmm", "--n", "many"],
        &["predict", "--gpu", "H100", "--graph", "g.json", "--oracle", "--fuse", "sometimes"],
    ] {
        let (code, out, err) = run(args);
        assert_eq!(code, 2, "{args:?}");
        assert!(out.is_empty());
        assert!(!err.is_empty());
    }
}

#[test]
fn domain_errors_exit_one_with_a_message() {
    let graph = data("toy_transformer.json");
    let cases: [(&[&str], &str); 4] = [
        (&["predict", "--gpu", "NoSuchGPU", "--graph", &graph, "--oracle"], "unknown GPU"),
        (&["predict", "--gpu", "H100", "--graph", "/nonexistent/graph.json", "--oracle"], "error:"),
        (&["catalog", "show", "NoSuchGPU"], "unknown GPU"),
        (&["gen-data", "--op", "bmm", "--n", "3", "--gpus", "H100,Nope"], "unknown GPU"),
    ];
    for (args, needle) in cases {
        let (code, _, err) = run(args);
        assert_eq!(code, 1, "{args:?}");
        assert!(err.starts_with("error: "), "{err}");
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn gen_data_is_deterministic_for_a_seed() {
    let args = ["gen-data", "--op", "bmm", "--n", "2000", "--seed", "7"];
    let (c1, a, _) = run(&args);
    let (c2, b, _) = run(&args);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 2001);
    let (_, other, _) = run(&["gen-data", "--op", "bmm", "--n", "2000", "--seed", "8"]);
    assert_ne!(a, other);
}

#[test]
fn predict_with_the_oracle_reports_a_total() {
    let graph = data("toy_transformer.json");
    let (code, out, err) = run(&["predict", "--gpu", "H100", "--graph", &graph, "--oracle", "--csv"]);
    assert_eq!(code, 0, "{err}");
    let total = out.lines().find(|l| l.starts_with("total")).expect("total row");
    assert!(total.split(',').any(|f| f.parse::<f64>().is_ok_and(|v| v > 0.0)));
    let (_, again, _) = run(&["predict", "--gpu", "H100", "--graph", &graph, "--oracle", "--csv"]);
    assert_eq!(out, again);
}

#[test]
fn fusion_never_slows_the_toy_graph_down_in_memory_traffic() {
    let graph = data("toy_transformer.json");
    let (c1, none, _) = run(&["predict", "--gpu", "A100-40GB", "--graph", &graph, "--oracle", "--fuse", "none", "--csv"]);
    let (c2, fused, _) = run(&["predict", "--gpu", "A100-40GB", "--graph", &graph, "--oracle", "--fuse", "greedy", "--csv"]);
    assert_eq!((c1, c2), (0, 0));
    assert!(fused.lines().count() < none.lines().count());
}

#[test]
fn distributed_plans_run_end_to_end() {
    let graph = data("toy_transformer_train.json");
    for plan in ["plan_dp.toml", "plan_tp.toml", "plan_pp.toml"] {
        let plan = data(plan);
        let (code, out, err) = run(&["distributed", "--gpu", "H100", "--graph", &graph, "--plan", &plan, "--oracle"]);
        assert_eq!(code, 0, "{plan}: {err}");
        assert!(out.contains("total"), "{out}");
    }
}

#[test]
fn expected_latencies_produce_an_error_table() {
    let dir = tempfile::tempdir().unwrap();
    let graph = data("toy_transformer.json");
    let report = dir.path().join("report.csv");
    let (code, _, err) = run(&[
        "predict", "--gpu", "H100", "--graph", &graph, "--oracle", "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let expected = dir.path().join("expected.csv");
    std::fs::write(&expected, "label,measured_ms\ntotal,1.0\n").unwrap();
    let (code, out, err) = run(&[
        "compare", "--expected", expected.to_str().unwrap(), "--predicted", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().any(|l| l.starts_with("total")));
    assert!(out.lines().any(|l| l.starts_with("mean")));

    std::fs::write(&expected, "label,measured_ms\nnot-a-node,1.0\n").unwrap();
    let (code, _, err) = run(&[
        "compare", "--expected", expected.to_str().unwrap(), "--predicted", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("not-a-node"));
}
