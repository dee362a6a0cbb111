//! Tile-size database.
//!
//! Records map `(op, dims, gpu)` to the tile a vendor library picked. The
//! file format is one record per line:
//!
//! ```text
//! # op,dims,gpu,tile[,source]
//! bmm,1-4-4-4,V100,2-2,measured
//! softmax,4096-1024,H100,1-1024
//! ```
//!
//! `tile` either has the rank of the operator's output or, for GEMM-family
//! operators, just the two trailing matrix dimensions (leading batch
//! dimensions are then tiled at 1). `source` is `measured` (default) or
//! `heuristic`. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::catalog::GpuSpec;
use crate::error::{Error, Result};
use crate::kernel::{describe_kernel, Dtype, OpType, TileShape};
use crate::numeric::next_pow2;

const GEMM_DEFAULT_TILE: u64 = 128;
const VECTOR_MAX_TILE: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileSource {
    Measured,
    Heuristic,
}

impl TileSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TileSource::Measured => "measured",
            TileSource::Heuristic => "heuristic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub op_type: OpType,
    pub dims: Vec<u64>,
    pub gpu_name: String,
    pub tile: TileShape,
    pub source: TileSource,
}

impl fmt::Display for TileRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.op_type.name(),
            dash_join(&self.dims),
            self.gpu_name,
            dash_join(self.tile.dims()),
            self.source.as_str()
        )
    }
}

type Key = (String, Vec<u64>, String);

/// In-memory tile database. Iteration order is the sorted key order, which
/// makes nearest-match tie-breaking deterministic.
#[derive(Debug, Clone, Default)]
pub struct TileDb {
    records: BTreeMap<Key, TileRecord>,
}

impl TileDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut db = Self::new();
        db.ingest_records(path)?;
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TileRecord> {
        self.records.values()
    }

    /// Insert or replace a record. The tile is normalized to the output rank.
    pub fn insert(&mut self, record: TileRecord) -> Result<()> {
        let tile = normalize_tile(&record.op_type, &record.dims, &record.tile)?;
        let key = (record.op_type.name(), record.dims.clone(), record.gpu_name.clone());
        self.records.insert(key, TileRecord { tile, ..record });
        Ok(())
    }

    /// Merge records from a file; later duplicates replace earlier ones.
    /// Returns the number of records read.
    pub fn ingest_records(&mut self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.ingest_str(&text, path)
    }

    pub fn ingest_str(&mut self, text: &str, path: &Path) -> Result<usize> {
        let mut parsed = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let record = parse_record(line).map_err(|m| Error::parse(path, i + 1, m))?;
            let tile = normalize_tile(&record.op_type, &record.dims, &record.tile)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            parsed.push(TileRecord { tile, ..record });
        }
        // all-or-nothing: a bad line leaves the db untouched
        let n = parsed.len();
        for r in parsed {
            self.insert(r)?;
        }
        Ok(n)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# op,dims,gpu,tile,source\n");
        for r in self.records.values() {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Tile for a kernel: exact record, else the nearest record of the same
    /// op on the same GPU, else on any GPU, else the heuristic default.
    pub fn lookup_tile(&self, op_type: &OpType, dims: &[u64], gpu: &GpuSpec) -> TileShape {
        self.lookup_detailed(op_type, dims, gpu).0
    }

    pub fn lookup_detailed(&self, op_type: &OpType, dims: &[u64], gpu: &GpuSpec) -> (TileShape, TileSource) {
        let Ok(out_dims) = output_dims(op_type, dims) else {
            return (TileShape(vec![1; dims.len().max(1)]), TileSource::Heuristic);
        };
        let name = op_type.name();
        if let Some(r) = self.records.get(&(name.clone(), dims.to_vec(), gpu.name.clone())) {
            return (r.tile.clone(), r.source);
        }
        let candidates = || {
            self.records
                .values()
                .filter(|r| r.op_type.name() == name && r.dims.len() == dims.len())
        };
        let nearest = nearest(candidates().filter(|r| r.gpu_name == gpu.name), dims)
            .or_else(|| nearest(candidates(), dims));
        match nearest {
            Some(r) => (clamp_tile(&r.tile, &out_dims), r.source),
            None => (heuristic_tile(op_type, &out_dims), TileSource::Heuristic),
        }
    }
}

/// Distance between dims vectors, represented as the exact ratio
/// `prod(max) / prod(min)`, i.e. `2^(L1 distance of the log2 dims)`.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn between(a: &[u64], b: &[u64]) -> Option<Ratio> {
        let mut num: u128 = 1;
        let mut den: u128 = 1;
        for (&x, &y) in a.iter().zip(b) {
            num = num.checked_mul(u128::from(x.max(y)))?;
            den = den.checked_mul(u128::from(x.min(y)))?;
        }
        Some(Ratio { num, den })
    }

    fn log2(a: &[u64], b: &[u64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| ((x as f64).log2() - (y as f64).log2()).abs())
            .sum()
    }

    /// `Some(ordering)` when the comparison fits in u128.
    fn cmp(self, other: Ratio) -> Option<std::cmp::Ordering> {
        let l = self.num.checked_mul(other.den)?;
        let r = other.num.checked_mul(self.den)?;
        Some(l.cmp(&r))
    }
}

fn nearest<'a>(records: impl Iterator<Item = &'a TileRecord>, dims: &[u64]) -> Option<&'a TileRecord> {
    let mut best: Option<&TileRecord> = None;
    for r in records {
        let closer = match best {
            None => true,
            Some(b) => {
                let exact = Ratio::between(&r.dims, dims)
                    .zip(Ratio::between(&b.dims, dims))
                    .and_then(|(x, y)| x.cmp(y));
                match exact {
                    Some(ord) => ord == std::cmp::Ordering::Less,
                    None => Ratio::log2(&r.dims, dims) < Ratio::log2(&b.dims, dims),
                }
            }
        };
        if closer {
            best = Some(r);
        }
    }
    best
}

fn output_dims(op_type: &OpType, dims: &[u64]) -> Result<Vec<u64>> {
    Ok(describe_kernel(op_type.clone(), dims, Dtype::Fp32)?.out_dims)
}

/// Library-style default: 128x128 GEMM tiles (clamped to the padded
/// output, batch dims at 1); vector kernels take up to 1024 columns per row.
pub fn heuristic_tile(op_type: &OpType, out_dims: &[u64]) -> TileShape {
    let rank = out_dims.len();
    let mut t = vec![1u64; rank];
    if op_type.is_gemm() {
        for i in rank.saturating_sub(2)..rank {
            t[i] = GEMM_DEFAULT_TILE.min(next_pow2(out_dims[i]));
        }
    } else if let Some(&cols) = out_dims.last() {
        t[rank - 1] = cols.min(VECTOR_MAX_TILE);
    }
    TileShape(t)
}

fn clamp_tile(tile: &TileShape, out_dims: &[u64]) -> TileShape {
    TileShape(
        tile.0
            .iter()
            .zip(out_dims)
            .map(|(&t, &x)| t.min(next_pow2(x)).max(1))
            .collect(),
    )
}

fn normalize_tile(op_type: &OpType, dims: &[u64], tile: &TileShape) -> Result<TileShape> {
    let out = output_dims(op_type, dims)?;
    let rank = out.len();
    let mut t = tile.0.clone();
    if t.len() == 2 && rank > 2 && op_type.is_gemm() {
        let mut full = vec![1; rank - 2];
        full.extend_from_slice(&t);
        t = full;
    }
    if t.len() != rank {
        return Err(Error::RankMismatch {
            what: format!("tile for {} output {}", op_type, dash_join(&out)),
            expected: rank,
            actual: tile.rank(),
        });
    }
    if t.contains(&0) {
        return Err(Error::InvalidConfig("tile dimensions must be positive".into()));
    }
    if let Some((i, _)) = t.iter().zip(&out).enumerate().find(|(_, (&ti, &xi))| ti > next_pow2(xi)) {
        return Err(Error::InvalidConfig(format!(
            "tile dim {i} ({}) exceeds padded output dim {}",
            t[i],
            next_pow2(out[i])
        )));
    }
    Ok(TileShape(t))
}

fn parse_record(line: &str) -> std::result::Result<TileRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if !(4..=5).contains(&fields.len()) {
        return Err(format!("expected 4 or 5 comma-separated fields, found {}", fields.len()));
    }
    let op_type: OpType = fields[0].parse().map_err(|e: Error| e.to_string())?;
    let dims = parse_dashed(fields[1]).map_err(|e| format!("dims: {e}"))?;
    if fields[2].is_empty() {
        return Err("empty GPU name".into());
    }
    let tile = parse_dashed(fields[3]).map_err(|e| format!("tile: {e}"))?;
    let source = match fields.get(4).copied() {
        None | Some("") | Some("measured") => TileSource::Measured,
        Some("heuristic") => TileSource::Heuristic,
        Some(s) => return Err(format!("unknown source `{s}`")),
    };
    Ok(TileRecord {
        op_type,
        dims,
        gpu_name: fields[2].to_string(),
        tile: TileShape(tile),
        source,
    })
}

/// Parse `4-512-64` style integer lists.
pub fn parse_dashed(s: &str) -> std::result::Result<Vec<u64>, String> {
    if s.is_empty() {
        return Err("empty list".into());
    }
    s.split(['-', 'x'])
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("`{p}` is not a non-negative integer")))
        .collect()
}

pub fn dash_join(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join("-")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::kernel::ElementwiseKind;

    fn gpu(name: &str) -> GpuSpec {
        Catalog::builtin().get(name).unwrap().clone()
    }

    fn db(text: &str) -> TileDb {
        let mut db = TileDb::new();
        db.ingest_str(text, Path::new("t.db")).unwrap();
        db
    }

    #[test]
    fn exact_match() {
        let db = db("bmm,1-4-4-4,V100,2-2,measured\n");
        assert_eq!(db.lookup_tile(&OpType::Bmm, &[1, 4, 4, 4], &gpu("V100")), TileShape(vec![1, 2, 2]));
    }

    #[test]
    fn empty_db_heuristic() {
        let t = TileDb::new().lookup_tile(&OpType::Bmm, &[1, 4096, 64, 4096], &gpu("V100"));
        assert_eq!(t, TileShape(vec![1, 128, 128]));
        let small = TileDb::new().lookup_tile(&OpType::Bmm, &[3, 5, 7, 20], &gpu("V100"));
        assert_eq!(small, TileShape(vec![1, 8, 32]));
        let v = TileDb::new().lookup_tile(&OpType::Softmax, &[4096, 2048], &gpu("V100"));
        assert_eq!(v, TileShape(vec![1, 1024]));
        let e = TileDb::new().lookup_tile(&OpType::Elementwise(ElementwiseKind::Add), &[8, 100], &gpu("V100"));
        assert_eq!(e, TileShape(vec![1, 100]));
    }

    #[test]
    fn equidistant_tie_prefers_smaller_key() {
        // query 1-64-64-64 is one doubling away from both records
        let db = db("bmm,1-64-64-128,V100,64-64\nbmm,1-64-64-32,V100,32-32\n");
        let t = db.lookup_tile(&OpType::Bmm, &[1, 64, 64, 64], &gpu("V100"));
        // dims compare as integer vectors: [1,64,64,32] < [1,64,64,128]
        assert_eq!(t, TileShape(vec![1, 32, 32]));
    }

    #[test]
    fn same_gpu_preferred_over_other_gpu() {
        let db = db("bmm,1-256-64-256,H100,64-64\nbmm,1-1024-64-1024,V100,128-128\n");
        let t = db.lookup_tile(&OpType::Bmm, &[1, 256, 64, 256], &gpu("V100"));
        assert_eq!(t, TileShape(vec![1, 128, 128]));
        let t = db.lookup_tile(&OpType::Bmm, &[1, 256, 64, 256], &gpu("T4"));
        assert_eq!(t, TileShape(vec![1, 64, 64]));
    }

    #[test]
    fn nearest_tile_clamped_to_output() {
        let db = db("bmm,1-1024-64-1024,V100,128-128\n");
        let t = db.lookup_tile(&OpType::Bmm, &[1, 4, 64, 4], &gpu("V100"));
        assert_eq!(t, TileShape(vec![1, 4, 4]));
    }

    #[test]
    fn ingest_counts_and_replaces() {
        let mut d = TileDb::new();
        let n = d
            .ingest_str(
                "# comment\nbmm,1-4-4-4,V100,2-2\nsoftmax,8-8,V100,1-8\nfc,4-8-16,V100,4-16\n",
                Path::new("a"),
            )
            .unwrap();
        assert_eq!(n, 3);
        assert_eq!(d.len(), 3);
        d.ingest_str("bmm,1-4-4-4,V100,4-4\n", Path::new("b")).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.lookup_tile(&OpType::Bmm, &[1, 4, 4, 4], &gpu("V100")), TileShape(vec![1, 4, 4]));
    }

    #[test]
    fn malformed_tile_rank_names_line() {
        let mut d = TileDb::new();
        let err = d
            .ingest_str("bmm,1-4-4-4,V100,2-2\nsoftmax,8-8,V100,1-2-4\n", Path::new("t.db"))
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(d.is_empty());
    }

    #[test]
    fn text_round_trip() {
        let d = db("bmm,1-4-4-4,V100,2-2\nsoftmax,8-8,T4,1-8,heuristic\n");
        let again = db(&d.to_text());
        assert_eq!(d.records().collect::<Vec<_>>(), again.records().collect::<Vec<_>>());
    }
}
