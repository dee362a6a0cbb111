//! C ABI over the `tileperf` latency forecaster.
//!
//! Handles are opaque and owned by the caller: every `*_open`/`*_load`
//! pairs with a `*_free`. Functions return a [`TpStatus`]; results come
//! back through out-pointers, which are written only on `TP_STATUS_OK`
//! unless a function documents otherwise.
//! On failure [`tp_last_error`] describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tileperf::distributed::{estimate_parallel, ring_allreduce, PlanConfig};
use tileperf::graph::{apply_fusion, FusionMode};
use tileperf::oracle::{OracleModel, OracleSpec};
use tileperf::predictor::{LatencyModel, TilePredictor};
use tileperf::report::predict_graph;
use tileperf::{describe_kernel, Catalog, Dtype, Error, OpGraph, OpType, PredictorSet, TileDb};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    UnknownGpu = 5,
    UnknownOperator = 6,
    UntrainedOperator = 7,
    InvalidInput = 8,
    Panic = 9,
}

/// Fusion applied before graph prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpFusion {
    None = 0,
    Annotated = 1,
    Greedy = 2,
}

impl From<TpFusion> for FusionMode {
    fn from(f: TpFusion) -> Self {
        match f {
            TpFusion::None => FusionMode::None,
            TpFusion::Annotated => FusionMode::Annotated,
            TpFusion::Greedy => FusionMode::Greedy,
        }
    }
}

/// A GPU catalog.
pub struct TpCatalog {
    inner: Catalog,
}

/// Catalog, tile database and latency model bundled for prediction.
pub struct TpEngine {
    catalog: Catalog,
    tiledb: TileDb,
    /// `None` means trained predictors are used.
    oracle: Option<OracleSpec>,
    predictors: PredictorSet,
}

impl TpEngine {
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

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TpStatus {
    match e {
        Error::Io { .. } => TpStatus::Io,
        Error::Parse { .. } | Error::VersionMismatch { .. } | Error::CorruptWeights { .. } => TpStatus::Parse,
        Error::UnknownGpu(_) => TpStatus::UnknownGpu,
        Error::UnknownOperator(_) => TpStatus::UnknownOperator,
        Error::UntrainedOperator(_) => TpStatus::UntrainedOperator,
        _ => TpStatus::InvalidInput,
    }
}

struct Fail(TpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Run `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TpStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(TpStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TpStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

/// # Safety
/// As [`str_arg`]; null maps to `None`.
unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

/// Message for the last failed call on this thread; empty after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The builtin catalog.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn tp_catalog_builtin(out: *mut *mut TpCatalog) -> TpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(TpCatalog {
            inner: Catalog::builtin(),
        }));
        Ok(())
    })
}

/// Load a catalog file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn tp_catalog_load(path: *const c_char, out: *mut *mut TpCatalog) -> TpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        non_null(out, "out")?;
        let inner = Catalog::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(TpCatalog { inner }));
        Ok(())
    })
}

/// Number of GPUs; 0 for a null handle.
///
/// # Safety
/// `cat` is null or a live catalog handle.
#[no_mangle]
pub unsafe extern "C" fn tp_catalog_len(cat: *const TpCatalog) -> usize {
    cat.as_ref().map_or(0, |c| c.inner.len())
}

/// Copy the name of GPU `index` into `buf` (capacity `cap`, NUL
/// included). `*needed` receives the required capacity; a short buffer
/// is left untouched and reported as `TP_STATUS_INVALID_INPUT`.
///
/// # Safety
/// `cat` is a live handle, `buf` is valid for `cap` bytes (or null when
/// `cap` is 0) and `needed` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tp_catalog_gpu_name(
    cat: *const TpCatalog,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> TpStatus {
    guard(|| {
        non_null(cat, "cat")?;
        non_null(needed, "needed")?;
        let gpus = (*cat).inner.gpus();
        let g = gpus.get(index).ok_or_else(|| {
            Fail(
                TpStatus::InvalidInput,
                format!("index {index} is out of range for {} GPUs", gpus.len()),
            )
        })?;
        let bytes = g.name.as_bytes();
        *needed = bytes.len() + 1;
        if cap < bytes.len() + 1 {
            return Err(Fail(TpStatus::InvalidInput, format!("buffer needs {} bytes", bytes.len() + 1)));
        }
        non_null(buf, "buf")?;
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cat` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_catalog_free(cat: *mut TpCatalog) {
    if !cat.is_null() {
        drop(Box::from_raw(cat));
    }
}

/// Build an engine. `weights` names a weight directory or file; null
/// selects the noise-free synthetic oracle. `tiledb` may be null for
/// heuristic tiles. The catalog is copied, so it may be freed afterwards.
///
/// # Safety
/// `cat` is a live handle; string arguments are null or NUL-terminated;
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_open(
    cat: *const TpCatalog,
    weights: *const c_char,
    tiledb: *const c_char,
    out: *mut *mut TpEngine,
) -> TpStatus {
    guard(|| {
        non_null(cat, "cat")?;
        non_null(out, "out")?;
        let weights = opt_str_arg(weights, "weights")?;
        let tiledb = match opt_str_arg(tiledb, "tiledb")? {
            Some(p) => TileDb::open(Path::new(p))?,
            None => TileDb::new(),
        };
        let (oracle, predictors) = match weights {
            Some(p) => (None, PredictorSet::load(Path::new(p))?),
            None => (Some(OracleSpec::default()), PredictorSet::new()),
        };
        *out = Box::into_raw(Box::new(TpEngine {
            catalog: (*cat).inner.clone(),
            tiledb,
            oracle,
            predictors,
        }));
        Ok(())
    })
}

/// # Safety
/// `engine` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_free(engine: *mut TpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Latency in seconds of one kernel. `op` uses graph-file names (`bmm`,
/// `fc`, `add`, `softmax`, ...); `dtype` is `fp32`, `fp16` or null for fp32.
///
/// # Safety
/// `engine` is a live handle; strings are NUL-terminated (`dtype` may be
/// null); `dims` is valid for `rank` reads; `latency_s` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_predict_kernel(
    engine: *const TpEngine,
    gpu: *const c_char,
    op: *const c_char,
    dims: *const u64,
    rank: usize,
    dtype: *const c_char,
    latency_s: *mut f64,
) -> TpStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(latency_s, "latency_s")?;
        let e = &*engine;
        let gpu = e.catalog.get(str_arg(gpu, "gpu")?)?;
        let op: OpType = str_arg(op, "op")?.parse()?;
        let dims: &[u64] = if rank == 0 {
            &[]
        } else {
            non_null(dims, "dims")?;
            std::slice::from_raw_parts(dims, rank)
        };
        let dtype: Dtype = opt_str_arg(dtype, "dtype")?.unwrap_or("fp32").parse()?;
        let k = describe_kernel(op, dims, dtype)?;
        *latency_s = e.model().predict_kernel(&k, gpu)?.latency;
        Ok(())
    })
}

/// Per-device latency in seconds of a graph file.
///
/// # Safety
/// `engine` is a live handle; strings are NUL-terminated; `total_s` is
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_predict_graph(
    engine: *const TpEngine,
    gpu: *const c_char,
    graph_path: *const c_char,
    fusion: TpFusion,
    total_s: *mut f64,
) -> TpStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(total_s, "total_s")?;
        let e = &*engine;
        let gpu = e.catalog.get(str_arg(gpu, "gpu")?)?;
        let g = OpGraph::load(Path::new(str_arg(graph_path, "graph_path")?))?;
        let g = apply_fusion(&g, fusion.into())?;
        *total_s = predict_graph(&g, gpu, e.model().as_ref())?.total;
        Ok(())
    })
}

/// Iteration latency in seconds of a graph under a plan file.
///
/// # Safety
/// `engine` is a live handle; strings are NUL-terminated; `total_s` is
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tp_engine_estimate_parallel(
    engine: *const TpEngine,
    gpu: *const c_char,
    graph_path: *const c_char,
    plan_path: *const c_char,
    fusion: TpFusion,
    total_s: *mut f64,
) -> TpStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(total_s, "total_s")?;
        let e = &*engine;
        let gpu = e.catalog.get(str_arg(gpu, "gpu")?)?;
        let g = OpGraph::load(Path::new(str_arg(graph_path, "graph_path")?))?;
        let cfg = PlanConfig::load(Path::new(str_arg(plan_path, "plan_path")?))?;
        let server = cfg.server(gpu.clone())?;
        *total_s = estimate_parallel(&g, &cfg.plan(), &server, e.model().as_ref(), fusion.into())?.total;
        Ok(())
    })
}

/// Ring all-reduce time in seconds for `bytes` over `p` GPUs joined by
/// links of `link_bw` bytes/s used at `link_utilization`.
///
/// # Safety
/// `seconds` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tp_allreduce_latency(
    bytes: f64,
    p: u32,
    link_bw: f64,
    link_utilization: f64,
    seconds: *mut f64,
) -> TpStatus {
    guard(|| {
        non_null(seconds, "seconds")?;
        *seconds = ring_allreduce(bytes, p, link_bw, link_utilization)?;
        Ok(())
    })
}
