//! Command-line entry point.
//!
//! Every subcommand prints a human-readable summary on standard output and
//! writes its machine-readable CSV to `--out`. Passing `--csv` prints the
//! CSV on standard output instead of the summary. Exit status is 0 on
//! success, 1 on a domain error and 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::catalog::{Catalog, GpuSpec};
use crate::compare::{self, Comparison};
use crate::distributed::{estimate_parallel, PlanConfig};
use crate::error::{Error, Result};
use crate::graph::{apply_fusion, FusionMode, OpGraph};
use crate::kernel::{Dtype, OpFamily, OpType};
use crate::oracle::{generate_dataset, OpRanges, OracleModel, OracleSpec};
use crate::predictor::dataset::{dataset_to_string, load_dataset, TrainSample};
use crate::predictor::io::save_weights;
use crate::predictor::train::history_csv;
use crate::predictor::{train, LatencyModel, PredictorSet, TilePredictor, TrainConfig, WEIGHTS_EXTENSION};
use crate::report::predict_graph;
use crate::tiledb::{dash_join, parse_dashed, TileDb};

#[derive(Debug, Parser)]
#[command(name = "tileperf", version, about = "Forecast GPU latency of deep-learning operator graphs")]
pub struct Cli {
    /// GPU catalog file (default: $TILEPERF_CATALOG, else the builtin catalog)
    #[arg(long, global = true, value_name = "PATH")]
    pub catalog: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect the GPU catalog
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Maintain and query the tile database
    #[command(subcommand)]
    Tiledb(TiledbCmd),
    /// Generate a training dataset labelled by the synthetic oracle
    GenData(GenDataArgs),
    /// Train utilization predictors
    Train(TrainArgs),
    /// Predict the per-device latency of an operator graph
    Predict(PredictArgs),
    /// Estimate a data, tensor or pipeline parallel iteration
    Distributed(DistributedArgs),
    /// Percentage error of predicted against measured latencies
    Compare(CompareArgs),
}

#[derive(Debug, Subcommand)]
pub enum CatalogCmd {
    /// List every GPU with its headline figures
    List(OutputArgs),
    /// Print every normalized field of one GPU
    Show {
        /// GPU name (case-insensitive)
        name: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum TiledbCmd {
    /// Append record files to a database, creating it if needed
    Ingest {
        /// Database file
        #[arg(long, value_name = "PATH")]
        db: PathBuf,
        /// Record files (`op,dims,gpu,tile[,source]` per line)
        #[arg(required = true, value_name = "RECORDS")]
        files: Vec<PathBuf>,
    },
    /// Look up the tile used for one kernel
    Query {
        /// Database file (omit to use the heuristic only)
        #[arg(long, value_name = "PATH")]
        db: Option<PathBuf>,
        /// Operator name, e.g. `bmm` or `elementwise:add`
        #[arg(long)]
        op: String,
        /// Dash-separated dims, e.g. `8-512-64-512`
        #[arg(long)]
        dims: String,
        /// GPU name
        #[arg(long)]
        gpu: String,
    },
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write the CSV output here
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Print the CSV on standard output instead of the summary
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Oracle coefficient file (default: builtin coefficients)
    #[arg(long, value_name = "PATH")]
    pub oracle_config: Option<PathBuf>,
}

impl OracleArgs {
    fn load(&self) -> Result<OracleSpec> {
        match &self.oracle_config {
            Some(p) => OracleSpec::load(p),
            None => Ok(OracleSpec::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Operator family: bmm, fc, elementwise, softmax or layernorm
    #[arg(long)]
    pub op: String,
    /// Number of samples
    #[arg(long)]
    pub n: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated GPU names, assigned round-robin (default: whole catalog)
    #[arg(long, value_delimiter = ',')]
    pub gpus: Vec<String>,
    /// Lognormal noise sigma (default: the oracle file's value)
    #[arg(long)]
    pub noise: Option<f64>,
    /// Element type
    #[arg(long, default_value = "fp32")]
    pub dtype: String,
    /// Tile database (default: heuristic tiles)
    #[arg(long, value_name = "PATH")]
    pub tiledb: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Write the dataset here instead of standard output
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file (`op,dims,gpu,latency_seconds[,dtype]` per line)
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Weight directory; one `<family>.tpw` file per trained family
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Training config (TOML)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs (overrides the config)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden width (overrides the config)
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hidden layers (overrides the config)
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    /// Tile database (default: heuristic tiles)
    #[arg(long, value_name = "PATH")]
    pub tiledb: Option<PathBuf>,
    /// Per-epoch loss CSV (default: `<out>/<family>-history.csv`)
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// GPU name
    #[arg(long)]
    pub gpu: String,
    /// Weight directory or single weight file
    #[arg(long, value_name = "PATH", required_unless_present = "oracle", conflicts_with = "oracle")]
    pub weights: Option<PathBuf>,
    /// Use the noise-free synthetic oracle instead of trained weights
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub oracle_args: OracleArgs,
    /// Tile database (default: heuristic tiles)
    #[arg(long, value_name = "PATH")]
    pub tiledb: Option<PathBuf>,
    /// Fusion: none, annotated or greedy
    #[arg(long, value_name = "MODE", default_value = "annotated")]
    pub fuse: FusionMode,
    /// Measured latencies (`label,measured_{s,ms,us}`) to compute errors against
    #[arg(long, value_name = "PATH")]
    pub expected: Option<PathBuf>,
    /// Write the error CSV here (requires --expected)
    #[arg(long, value_name = "PATH", requires = "expected")]
    pub errors_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Graph file
    #[arg(long, value_name = "PATH")]
    pub graph: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DistributedArgs {
    /// Graph file
    #[arg(long, value_name = "PATH")]
    pub graph: PathBuf,
    /// Plan config (TOML)
    #[arg(long, value_name = "PATH")]
    pub plan: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Measured latencies (`label,measured_{s,ms,us}`)
    #[arg(long, value_name = "PATH")]
    pub expected: PathBuf,
    /// Predicted latencies (`label,predicted_{s,ms,us}`) or a report CSV
    #[arg(long, value_name = "PATH")]
    pub predicted: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Parse `args` (including the program name) and run, writing to the
/// process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// As [`run`], with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(&cli) {
        Ok(text) => match out.write_all(text.as_bytes()) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(err, "error: writing output: {e}");
                1
            }
        },
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_catalog(cli: &Cli) -> Result<Catalog> {
    match &cli.catalog {
        Some(p) => Catalog::load(p),
        None => Catalog::from_env(),
    }
}

fn load_tiledb(path: Option<&Path>) -> Result<TileDb> {
    path.map_or_else(|| Ok(TileDb::new()), TileDb::open)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The summary to print, after writing `csv` to `--out` if requested.
fn emit(o: &OutputArgs, csv: String, summary: String) -> Result<String> {
    if let Some(p) = &o.out {
        write_file(p, &csv)?;
    }
    Ok(if o.csv { csv } else { summary })
}

fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Catalog(c) => catalog_cmd(&load_catalog(cli)?, c),
        Command::Tiledb(c) => tiledb_cmd(&load_catalog(cli)?, c),
        Command::GenData(a) => gen_data(&load_catalog(cli)?, a),
        Command::Train(a) => train_cmd(&load_catalog(cli)?, a),
        Command::Predict(a) => predict_cmd(&load_catalog(cli)?, a),
        Command::Distributed(a) => distributed_cmd(&load_catalog(cli)?, a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn catalog_cmd(cat: &Catalog, c: &CatalogCmd) -> Result<String> {
    match c {
        CatalogCmd::List(o) => {
            let mut csv = String::from("name,vendor,year,fp32_flops,mem_size_bytes,mem_bw_bytes_per_s,num_sm,l2_size_bytes\n");
            let mut table = format!(
                "{:<12} {:<7} {:>5} {:>10} {:>8} {:>9} {:>5} {:>7}\n",
                "name", "vendor", "year", "fp32_TF/s", "mem_GB", "bw_GB/s", "SMs", "L2_MB"
            );
            for g in cat.gpus() {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:e},{:e},{:e},{},{:e}",
                    g.name,
                    g.vendor,
                    g.year,
                    g.fp32_peak(),
                    g.mem_size,
                    g.mem_bw,
                    g.num_sm,
                    g.l2_size
                );
                let _ = writeln!(
                    table,
                    "{:<12} {:<7} {:>5} {:>10.1} {:>8.0} {:>9.0} {:>5} {:>7.1}",
                    g.name,
                    g.vendor,
                    g.year,
                    g.fp32_peak() / 1e12,
                    g.mem_size / 1e9,
                    g.mem_bw / 1e9,
                    g.num_sm,
                    g.l2_size / 1e6
                );
            }
            emit(o, csv, table)
        }
        CatalogCmd::Show { name } => Ok(show_gpu(cat.get(name)?)),
    }
}

fn show_gpu(g: &GpuSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name      {}", g.name);
    let _ = writeln!(out, "vendor    {}", g.vendor);
    let _ = writeln!(out, "year      {}", g.year);
    let _ = writeln!(out, "num_sm    {}", g.num_sm);
    let _ = writeln!(out, "mem_size  {:e} B", g.mem_size);
    let _ = writeln!(out, "mem_bw    {:e} B/s", g.mem_bw);
    let _ = writeln!(out, "l2_size   {:e} B", g.l2_size);
    for (k, v) in &g.peak_flops {
        let _ = writeln!(out, "peak_flops.{k}  {v:e} FLOP/s");
    }
    let s = g.per_sm();
    let _ = writeln!(out, "per_sm.peak_flops  {:e} FLOP/s", s.peak_flops_per_sm);
    let _ = writeln!(out, "per_sm.mem_bw      {:e} B/s", s.mem_bw_per_sm);
    let _ = writeln!(out, "per_sm.l2          {:e} B", s.l2_per_sm);
    let _ = writeln!(out, "per_sm.mem         {:e} B", s.mem_per_sm);
    out
}

fn tiledb_cmd(cat: &Catalog, c: &TiledbCmd) -> Result<String> {
    match c {
        TiledbCmd::Ingest { db, files } => {
            let mut d = if db.exists() { TileDb::open(db)? } else { TileDb::new() };
            let mut added = 0;
            for f in files {
                added += d.ingest_records(f)?;
            }
            d.save(db)?;
            Ok(format!("ingested {added} records; {} now holds {}\n", db.display(), d.len()))
        }
        TiledbCmd::Query { db, op, dims, gpu } => {
            let d = load_tiledb(db.as_deref())?;
            let op_type: OpType = op.parse()?;
            let dims = parse_dashed(dims).map_err(|m| Error::InvalidConfig(format!("dims: {m}")))?;
            let gpu = cat.get(gpu)?;
            let (tile, source) = d.lookup_detailed(&op_type, &dims, gpu);
            Ok(format!(
                "{},{},{},{},{}\n",
                op_type.name(),
                dash_join(&dims),
                gpu.name,
                tile,
                source.as_str()
            ))
        }
    }
}

fn gen_data(cat: &Catalog, a: &GenDataArgs) -> Result<String> {
    let family: OpFamily = a.op.parse()?;
    let dtype: Dtype = a.dtype.parse()?;
    let mut oracle = a.oracle.load()?;
    if let Some(s) = a.noise {
        oracle = oracle.with_noise(s);
    }
    let gpus: Vec<GpuSpec> = if a.gpus.is_empty() {
        cat.gpus().to_vec()
    } else {
        a.gpus.iter().map(|n| cat.get(n).cloned()).collect::<Result<_>>()?
    };
    let db = load_tiledb(a.tiledb.as_deref())?;
    let samples = generate_dataset(&OpRanges::default_for(family), &oracle, &gpus, &db, dtype, a.n, a.seed)?;
    let text = dataset_to_string(&samples);
    match &a.out {
        Some(p) => {
            write_file(p, &text)?;
            Ok(format!("wrote {} {family} samples to {}\n", samples.len(), p.display()))
        }
        None => Ok(text),
    }
}

fn train_cmd(cat: &Catalog, a: &TrainArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    if let Some(l) = a.hidden_layers {
        cfg.hidden_layers = l;
    }
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_family: BTreeMap<OpFamily, Vec<TrainSample>> = BTreeMap::new();
    for s in samples {
        let f = s
            .op_type
            .family()
            .ok_or_else(|| Error::InvalidConfig(format!("`{}` has no predictor", s.op_type)))?;
        by_family.entry(f).or_default().push(s);
    }
    if a.history.is_some() && by_family.len() > 1 {
        return Err(Error::InvalidConfig(
            "--history needs a single-family dataset; omit it to write one file per family".into(),
        ));
    }
    let db = load_tiledb(a.tiledb.as_deref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut summary = String::new();
    for (family, data) in &by_family {
        let o = train(data, &cfg, cat, &db)?;
        let name = family.as_str();
        save_weights(&o.weights, &a.out.join(format!("{name}.{WEIGHTS_EXTENSION}")))?;
        let hist = a.history.clone().unwrap_or_else(|| a.out.join(format!("{name}-history.csv")));
        write_file(&hist, &history_csv(&o.history))?;
        let best = o
            .history
            .get(o.best_epoch.wrapping_sub(1))
            .map_or("-".to_string(), |h| format!("{:.3}%", h.val_smape));
        let _ = writeln!(
            summary,
            "{name}: {} samples, {} epochs, kept epoch {} (validation SMAPE {best})",
            data.len(),
            cfg.epochs,
            o.best_epoch
        );
    }
    Ok(summary)
}

/// Either the oracle or trained weights; owns what the model borrows.
struct ModelParts {
    oracle: Option<OracleSpec>,
    predictors: PredictorSet,
    tiledb: TileDb,
}

impl ModelParts {
    fn load(m: &ModelArgs) -> Result<Self> {
        let tiledb = load_tiledb(m.tiledb.as_deref())?;
        if m.oracle {
            Ok(ModelParts {
                oracle: Some(m.oracle_args.load()?),
                predictors: PredictorSet::new(),
                tiledb,
            })
        } else {
            let path = m.weights.as_deref().expect("clap requires --weights without --oracle");
            Ok(ModelParts {
                oracle: None,
                predictors: PredictorSet::load(path)?,
                tiledb,
            })
        }
    }

    fn model(&self) -> Box<dyn LatencyModel + '_> {
        match &self.oracle {
            Some(spec) => Box::new(OracleModel {
                spec,
                tiledb: &self.tiledb,
            }),
            None => Box::new(TilePredictor {
                predictors: &self.predictors,
                tiledb: &self.tiledb,
            }),
        }
    }
}

/// Error table appended to the summary, and the error CSV if requested.
fn expected_errors(m: &ModelArgs, labelled: &[(String, f64)]) -> Result<String> {
    let Some(path) = &m.expected else {
        return Ok(String::new());
    };
    let rows: Vec<Comparison> = compare::compare(&compare::load_expected(path)?, labelled)?;
    if let Some(p) = &m.errors_out {
        write_file(p, &compare::comparison_csv(&rows))?;
    }
    Ok(format!("\n{}", compare::comparison_table(&rows)))
}

fn predict_cmd(cat: &Catalog, a: &PredictArgs) -> Result<String> {
    let gpu = cat.get(&a.model.gpu)?;
    let fusion = a.model.fuse;
    let g = apply_fusion(&OpGraph::load(&a.graph)?, fusion)?;
    let parts = ModelParts::load(&a.model)?;
    let report = predict_graph(&g, gpu, parts.model().as_ref())?;
    let mut summary = report.to_table();
    summary.push_str(&expected_errors(&a.model, &report.labelled())?);
    emit(&a.output, report.to_csv(), summary)
}

fn distributed_cmd(cat: &Catalog, a: &DistributedArgs) -> Result<String> {
    let gpu = cat.get(&a.model.gpu)?;
    let fusion = a.model.fuse;
    let cfg = PlanConfig::load(&a.plan)?;
    let server = cfg.server(gpu.clone())?;
    let g = OpGraph::load(&a.graph)?;
    let parts = ModelParts::load(&a.model)?;
    let report = estimate_parallel(&g, &cfg.plan(), &server, parts.model().as_ref(), fusion)?;
    let mut summary = report.to_table();
    summary.push_str(&expected_errors(&a.model, &report.labelled())?);
    emit(&a.output, report.to_csv(), summary)
}

fn compare_cmd(a: &CompareArgs) -> Result<String> {
    let expected = compare::load_expected(&a.expected)?;
    let predicted = compare::load_predicted(&a.predicted)?;
    let rows = compare::compare(&expected, &predicted)?;
    emit(&a.output, compare::comparison_csv(&rows), compare::comparison_table(&rows))
}

