//! GPU hardware catalog.
//!
//! Every hardware number the engine uses comes from a [`GpuSpec`] loaded
//! here. The on-disk format is TOML with explicit units (see
//! `catalog/gpus.toml` for the shipped catalog and a description of the
//! accepted units).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::kernel::Dtype;

/// The catalog compiled into the binary.
pub const BUILTIN_CATALOG: &str = include_str!("../catalog/gpus.toml");

/// Environment variable naming a catalog file to use instead of the builtin one.
pub const CATALOG_ENV: &str = "TILEPERF_CATALOG";

pub const CATALOG_FORMAT_VERSION: i64 = 1;

/// Published features of one GPU, normalized to bytes, bytes/s and FLOP/s.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuSpec {
    pub name: String,
    pub vendor: String,
    /// Peak throughput keyed by datapath (`fp32`, `fp16`, `fp32-matrix`, `fp16-matrix`, ...).
    pub peak_flops: BTreeMap<String, f64>,
    pub mem_size: f64,
    pub mem_bw: f64,
    pub num_sm: u32,
    pub l2_size: f64,
    pub year: i32,
}

/// Device resources divided evenly across SMs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerSmSpec {
    pub peak_flops_per_sm: f64,
    pub mem_bw_per_sm: f64,
    pub l2_per_sm: f64,
    pub mem_per_sm: f64,
}

impl GpuSpec {
    /// Peak FLOP/s for a kernel of `dtype`. GEMM-family kernels prefer a
    /// dedicated matrix datapath when the catalog lists one; missing
    /// reduced-precision entries fall back to fp32.
    pub fn peak_flops_for(&self, dtype: Dtype, matrix: bool) -> f64 {
        let d = dtype.as_str();
        let mut keys: Vec<String> = Vec::with_capacity(4);
        if matrix {
            keys.push(format!("{d}-matrix"));
        }
        keys.push(d.to_string());
        if matrix {
            keys.push("fp32-matrix".to_string());
        }
        keys.push("fp32".to_string());
        keys.iter()
            .find_map(|k| self.peak_flops.get(k).copied())
            .expect("catalog invariant: fp32 peak present")
    }

    pub fn fp32_peak(&self) -> f64 {
        self.peak_flops["fp32"]
    }

    pub fn per_sm(&self) -> PerSmSpec {
        per_sm(self, self.fp32_peak())
    }

    fn validate(&self) -> Result<()> {
        let positive = |field: &str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(Error::NonPositiveField {
                    gpu: self.name.clone(),
                    field: field.to_string(),
                    value,
                })
            }
        };
        positive("mem_size", self.mem_size)?;
        positive("mem_bw", self.mem_bw)?;
        positive("num_sm", f64::from(self.num_sm))?;
        positive("l2_size", self.l2_size)?;
        positive("year", f64::from(self.year))?;
        for (k, v) in &self.peak_flops {
            positive(&format!("peak_flops.{k}"), *v)?;
        }
        if !self.peak_flops.contains_key("fp32") {
            return Err(Error::InvalidConfig(format!(
                "GPU `{}` has no fp32 entry in peak_flops",
                self.name
            )));
        }
        Ok(())
    }
}

/// Per-SM share of the device resources, using `peak_flops` as the device peak.
pub fn per_sm(spec: &GpuSpec, peak_flops: f64) -> PerSmSpec {
    let n = f64::from(spec.num_sm);
    PerSmSpec {
        peak_flops_per_sm: peak_flops / n,
        mem_bw_per_sm: spec.mem_bw / n,
        l2_per_sm: spec.l2_size / n,
        mem_per_sm: spec.mem_size / n,
    }
}

/// Immutable, name-indexed set of GPU specs.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    gpus: Vec<GpuSpec>,
}

impl Catalog {
    pub fn builtin() -> Self {
        let gpus = parse_catalog(BUILTIN_CATALOG, Path::new("<builtin>"))
            .expect("builtin catalog is valid");
        Catalog { gpus }
    }

    /// Catalog named by `TILEPERF_CATALOG`, or the builtin one.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CATALOG_ENV) {
            Some(path) if !path.is_empty() => Self::load(Path::new(&path)),
            _ => Ok(Self::builtin()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Catalog {
            gpus: load_catalog(path)?,
        })
    }

    pub fn from_specs(gpus: Vec<GpuSpec>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &gpus {
            g.validate()?;
            if !seen.insert(g.name.clone()) {
                return Err(Error::DuplicateGpu(g.name.clone()));
            }
        }
        Ok(Catalog { gpus })
    }

    pub fn gpus(&self) -> &[GpuSpec] {
        &self.gpus
    }

    /// Exact name match, then a case-insensitive one.
    pub fn get(&self, name: &str) -> Result<&GpuSpec> {
        self.gpus
            .iter()
            .find(|g| g.name == name)
            .or_else(|| self.gpus.iter().find(|g| g.name.eq_ignore_ascii_case(name)))
            .ok_or_else(|| Error::UnknownGpu(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.gpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gpus.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    format_version: Option<Spanned<i64>>,
    #[serde(default)]
    gpu: Vec<Spanned<GpuEntry>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GpuEntry {
    name: Spanned<String>,
    vendor: Spanned<String>,
    year: Spanned<i64>,
    mem_size: Spanned<Quantity>,
    mem_bw: Spanned<Quantity>,
    num_sm: Spanned<i64>,
    l2_size: Spanned<Quantity>,
    peak_flops: BTreeMap<String, Spanned<Quantity>>,
}

/// A catalog-style quantity: a number in base units or a string with a unit.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Quantity {
    Text(String),
    Int(i64),
    Float(f64),
}

impl Quantity {
    pub fn to_base(&self, kind: UnitKind) -> std::result::Result<f64, String> {
        match self {
            Quantity::Int(v) => Ok(*v as f64),
            Quantity::Float(v) => Ok(*v),
            Quantity::Text(s) => parse_quantity(s, kind),
        }
    }
}

/// What a quantity string measures, which fixes its accepted units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Bytes,
    Bandwidth,
    Throughput,
}

impl UnitKind {
    fn describe(self) -> &'static str {
        match self {
            UnitKind::Bytes => "a size (B, KB, MB, GB, TB, KiB, MiB, GiB, TiB)",
            UnitKind::Bandwidth => "a bandwidth (B/s, KB/s, MB/s, GB/s, TB/s)",
            UnitKind::Throughput => "a throughput (FLOPS, GFLOPS, TFLOPS, PFLOPS)",
        }
    }

    /// Decimal exponent for decimal units, or a binary multiplier.
    fn scale(self, unit: &str) -> Option<Scale> {
        use Scale::{Binary, Decimal};
        let u = unit.trim();
        match self {
            UnitKind::Bytes => match u {
                "" | "B" => Some(Decimal(0)),
                "KB" | "kB" => Some(Decimal(3)),
                "MB" => Some(Decimal(6)),
                "GB" => Some(Decimal(9)),
                "TB" => Some(Decimal(12)),
                "KiB" => Some(Binary(10)),
                "MiB" => Some(Binary(20)),
                "GiB" => Some(Binary(30)),
                "TiB" => Some(Binary(40)),
                _ => None,
            },
            UnitKind::Bandwidth => match u {
                "" | "B/s" => Some(Decimal(0)),
                "KB/s" | "kB/s" => Some(Decimal(3)),
                "MB/s" => Some(Decimal(6)),
                "GB/s" => Some(Decimal(9)),
                "TB/s" => Some(Decimal(12)),
                _ => None,
            },
            UnitKind::Throughput => match u {
                "" | "FLOPS" | "FLOP/s" => Some(Decimal(0)),
                "GFLOPS" | "GFLOP/s" => Some(Decimal(9)),
                "TFLOPS" | "TFLOP/s" => Some(Decimal(12)),
                "PFLOPS" | "PFLOP/s" => Some(Decimal(15)),
                _ => None,
            },
        }
    }
}

enum Scale {
    Decimal(i32),
    Binary(i32),
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn convert(
    q: &Spanned<Quantity>,
    kind: UnitKind,
    field: &str,
    text: &str,
    path: &Path,
) -> Result<f64> {
    let line = line_of(text, q.span().start);
    let err = |msg: String| Error::parse(path, line, format!("field `{field}`: {msg}"));
    q.get_ref().to_base(kind).map_err(err)
}

/// Parse `"<number> <unit>"` into base units (bytes, bytes/s or FLOP/s).
/// Decimal units shift the written exponent, so `"66.9 TFLOPS"` is exactly
/// `66.9e12`.
pub fn parse_quantity(text: &str, kind: UnitKind) -> std::result::Result<f64, String> {
    let s = text.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E' | '_')))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let num = num.trim().replace('_', "");
    if num.is_empty() {
        return Err(format!("`{s}` has no numeric value"));
    }
    let scale = kind
        .scale(unit)
        .ok_or_else(|| format!("unknown unit `{}`; expected {}", unit.trim(), kind.describe()))?;
    match scale {
        Scale::Decimal(exp) => {
            let (mantissa, e0) = match num.find(['e', 'E']) {
                Some(i) => {
                    let e: i32 = num[i + 1..].parse().map_err(|_| format!("bad exponent in `{num}`"))?;
                    (&num[..i], e)
                }
                None => (num.as_str(), 0),
            };
            format!("{mantissa}e{}", e0 + exp)
                .parse::<f64>()
                .map_err(|_| format!("`{num}` is not a number"))
        }
        Scale::Binary(shift) => num
            .parse::<f64>()
            .map(|v| v * 2f64.powi(shift))
            .map_err(|_| format!("`{num}` is not a number")),
    }
}

/// Parse catalog text. `path` is used only for diagnostics.
pub fn parse_catalog(text: &str, path: &Path) -> Result<Vec<GpuSpec>> {
    let file: CatalogFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
        Error::parse(path, line, e.message().to_string())
    })?;
    if let Some(v) = &file.format_version {
        if *v.get_ref() != CATALOG_FORMAT_VERSION {
            return Err(Error::parse(
                path,
                line_of(text, v.span().start),
                format!("unsupported catalog format_version {}", v.get_ref()),
            ));
        }
    }

    let mut specs = Vec::with_capacity(file.gpu.len());
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for entry in &file.gpu {
        let g = entry.get_ref();
        let name = g.name.get_ref().trim().to_string();
        let line = line_of(text, g.name.span().start);
        if name.is_empty() {
            return Err(Error::parse(path, line, "field `name`: empty GPU name"));
        }
        if seen.insert(name.clone(), line).is_some() {
            return Err(Error::DuplicateGpu(name));
        }

        let int_field = |v: &Spanned<i64>, field: &str| -> Result<i64> {
            let x = *v.get_ref();
            if x <= 0 {
                return Err(Error::NonPositiveField {
                    gpu: name.clone(),
                    field: field.to_string(),
                    value: x as f64,
                });
            }
            Ok(x)
        };
        let num_sm = int_field(&g.num_sm, "num_sm")?;
        let year = int_field(&g.year, "year")?;
        let num_sm = u32::try_from(num_sm).map_err(|_| {
            Error::parse(path, line_of(text, g.num_sm.span().start), "field `num_sm`: too large")
        })?;
        let year = i32::try_from(year).map_err(|_| {
            Error::parse(path, line_of(text, g.year.span().start), "field `year`: out of range")
        })?;

        let mut peak_flops = BTreeMap::new();
        for (k, q) in &g.peak_flops {
            let v = convert(q, UnitKind::Throughput, &format!("peak_flops.{k}"), text, path)?;
            peak_flops.insert(k.clone(), v);
        }

        let spec = GpuSpec {
            vendor: g.vendor.get_ref().trim().to_string(),
            mem_size: convert(&g.mem_size, UnitKind::Bytes, "mem_size", text, path)?,
            mem_bw: convert(&g.mem_bw, UnitKind::Bandwidth, "mem_bw", text, path)?,
            l2_size: convert(&g.l2_size, UnitKind::Bytes, "l2_size", text, path)?,
            num_sm,
            year,
            peak_flops,
            name,
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn load_catalog(path: &Path) -> Result<Vec<GpuSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&text, path)
}

/// Render specs in catalog format using base units. Floats are printed in
/// shortest round-trip form, so reparsing gives back identical values.
pub fn to_catalog_string(specs: &[GpuSpec]) -> String {
    let mut out = format!("format_version = {CATALOG_FORMAT_VERSION}\n");
    for g in specs {
        let _ = writeln!(out, "\n[[gpu]]");
        let _ = writeln!(out, "name = {}", toml_string(&g.name));
        let _ = writeln!(out, "vendor = {}", toml_string(&g.vendor));
        let _ = writeln!(out, "year = {}", g.year);
        let _ = writeln!(out, "mem_size = \"{:e} B\"", g.mem_size);
        let _ = writeln!(out, "mem_bw = \"{:e} B/s\"", g.mem_bw);
        let _ = writeln!(out, "num_sm = {}", g.num_sm);
        let _ = writeln!(out, "l2_size = \"{:e} B\"", g.l2_size);
        let peaks: Vec<String> = g
            .peak_flops
            .iter()
            .map(|(k, v)| format!("{} = \"{v:e} FLOPS\"", toml_key(k)))
            .collect();
        let _ = writeln!(out, "peak_flops = {{ {} }}", peaks.join(", "));
    }
    out
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_key(k: &str) -> String {
    if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        k.to_string()
    } else {
        toml_string(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtin() -> Catalog {
        Catalog::builtin()
    }

    #[test]
    fn ships_eleven_gpus() {
        let cat = builtin();
        let names: Vec<&str> = cat.gpus().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(
            names,
            ["P4", "P100", "V100", "T4", "A100-40GB", "A100-80GB", "L4", "H100", "MI100", "MI210", "MI250"]
        );
    }

    #[test]
    fn h100_row() {
        let c = builtin();
        let h = c.get("H100").unwrap();
        assert_eq!(h.peak_flops["fp32"], 66.9e12);
        assert_eq!(h.mem_size, 80e9);
        assert_eq!(h.mem_bw, 3430e9);
        assert_eq!(h.num_sm, 132);
        assert_eq!(h.l2_size, 50e6);
    }

    #[test]
    fn v100_row() {
        let c = builtin();
        let v = c.get("V100").unwrap();
        assert_eq!(v.peak_flops["fp32"], 8.1e12);
        assert_eq!(v.mem_bw, 900e9);
        assert_eq!(v.num_sm, 80);
        assert_eq!(v.l2_size, 6e6);
    }

    #[test]
    fn amd_matrix_peak_used_for_gemm() {
        let c = builtin();
        let mi = c.get("MI100").unwrap();
        assert_eq!(mi.peak_flops_for(Dtype::Fp32, true), 46.1e12);
        assert_eq!(mi.peak_flops_for(Dtype::Fp32, false), 23.1e12);
        let h = c.get("H100").unwrap();
        assert_eq!(h.peak_flops_for(Dtype::Fp16, true), 989.4e12);
        // no plain fp16 entry: vector kernels fall back to fp32
        assert_eq!(h.peak_flops_for(Dtype::Fp16, false), 66.9e12);
    }

    #[test]
    fn per_sm_values() {
        let c = builtin();
        let h = c.get("H100").unwrap().per_sm();
        assert!((h.peak_flops_per_sm - 5.068e11).abs() / 5.068e11 < 1e-3);
        assert_eq!(h.peak_flops_per_sm, 66.9e12 / 132.0);
        let a = c.get("A100-40GB").unwrap().per_sm();
        assert!((a.mem_bw_per_sm - 1.4398e10).abs() / 1.4398e10 < 1e-4);
    }

    #[test]
    fn per_sm_identity_for_single_sm() {
        let mut g = builtin().get("T4").unwrap().clone();
        g.num_sm = 1;
        let p = g.per_sm();
        assert_eq!(p.peak_flops_per_sm, g.fp32_peak());
        assert_eq!(p.mem_bw_per_sm, g.mem_bw);
        assert_eq!(p.l2_per_sm, g.l2_size);
        assert_eq!(p.mem_per_sm, g.mem_size);
    }

    #[test]
    fn case_insensitive_lookup_and_unknown() {
        let c = builtin();
        assert_eq!(c.get("h100").unwrap().name, "H100");
        assert!(matches!(c.get("NoSuchGPU"), Err(Error::UnknownGpu(n)) if n == "NoSuchGPU"));
    }

    const ONE: &str = r#"
[[gpu]]
name = "X"
vendor = "Acme"
year = 2024
mem_size = "1 GiB"
mem_bw = "1.5 TB/s"
num_sm = NUM_SM
l2_size = "512 KB"
peak_flops = { fp32 = "1e1 TFLOPS" }
"#;

    #[test]
    fn zero_sm_rejected() {
        let text = ONE.replace("NUM_SM", "0");
        let err = parse_catalog(&text, Path::new("t.toml")).unwrap_err();
        assert!(matches!(err, Error::NonPositiveField { ref field, .. } if field == "num_sm"), "{err}");
    }

    #[test]
    fn units_are_normalized() {
        let text = ONE.replace("NUM_SM", "4");
        let g = &parse_catalog(&text, Path::new("t.toml")).unwrap()[0];
        assert_eq!(g.mem_size, 1073741824.0);
        assert_eq!(g.mem_bw, 1.5e12);
        assert_eq!(g.l2_size, 512e3);
        assert_eq!(g.peak_flops["fp32"], 1e13);
    }

    #[test]
    fn duplicate_names_rejected() {
        let one = ONE.replace("NUM_SM", "4");
        let text = format!("{one}\n{one}");
        assert!(matches!(parse_catalog(&text, Path::new("t")), Err(Error::DuplicateGpu(n)) if n == "X"));
    }

    #[test]
    fn bad_unit_reports_line_and_field() {
        let text = ONE.replace("NUM_SM", "4").replace("1.5 TB/s", "1.5 furlongs");
        match parse_catalog(&text, Path::new("t.toml")).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 7);
                assert!(message.contains("mem_bw"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "[[gpu]]\nname = \"X\"\nvendor = \n";
        match parse_catalog(text, Path::new("t.toml")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_fp32_rejected() {
        let text = ONE.replace("NUM_SM", "4").replace("fp32 =", "fp16 =");
        assert!(parse_catalog(&text, Path::new("t")).is_err());
    }

    #[test]
    fn builtin_round_trips() {
        let specs = builtin().gpus().to_vec();
        let text = to_catalog_string(&specs);
        let back = parse_catalog(&text, Path::new("rt")).unwrap();
        assert_eq!(specs, back);
    }
}
