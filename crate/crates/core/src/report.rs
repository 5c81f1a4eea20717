//! File outputs: CSV tables, JSON bundles and the run manifest.
//!
//! Files are staged in memory and written through temporary files that are
//! renamed into place only once every file of a command has been staged, so
//! a failed run leaves nothing half-written behind.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Scenario;
use crate::energy_model::{EnergyBreakdown, Evaluation};
use crate::experiments::{Crossover, LatencyReport, PlacementRow, SweepGrid};
use crate::expert_stats::ActivationStats;
use crate::perf_model::LatencyBreakdown;

/// Version of the JSON and CSV layouts. Bumped on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Error, Debug)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV encoding failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON encoding failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    /// File path or preset name as given on the command line.
    pub name: String,
    pub sha256: String,
}

impl InputRecord {
    pub fn new(name: impl Into<String>, bytes: &[u8]) -> Self {
        InputRecord { name: name.into(), sha256: sha256_hex(bytes) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// What produced a set of output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    pub inputs: Vec<InputRecord>,
    pub seed: u64,
    pub outputs: Vec<OutputRecord>,
    /// Only recorded on request; left out by default so that repeated runs
    /// produce identical manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, inputs: Vec<InputRecord>, seed: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: TOOL_VERSION.to_string(),
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            inputs,
            seed,
            outputs: Vec::new(),
            wall_clock_s: None,
        }
    }
}

/// Files of one command, written together or not at all.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<PathBuf>, contents: Vec<u8>) {
        self.files.push((path.into(), contents));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Lists every staged file in `manifest` and stages the manifest itself
    /// at `path`.
    pub fn add_manifest(&mut self, path: impl Into<PathBuf>, mut manifest: RunManifest) -> Result<(), ReportError> {
        let path = path.into();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.outputs = self
            .files
            .iter()
            .map(|(p, bytes)| OutputRecord {
                path: p.strip_prefix(&base).unwrap_or(p).display().to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            })
            .collect();
        self.add(path, to_json_bytes(&manifest)?);
        Ok(())
    }

    /// Writes every file into a temporary sibling, then renames them all into
    /// place. Any failure removes what was already written.
    pub fn commit(self) -> Result<Vec<PathBuf>, ReportError> {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let io = |source| ReportError::Io { path: path.clone(), source };
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
            tmp.write_all(bytes).map_err(io)?;
            tmp.as_file().sync_all().map_err(io)?;
            staged.push((tmp, path.clone()));
        }
        let mut written: Vec<PathBuf> = Vec::with_capacity(staged.len());
        for (tmp, path) in staged {
            if let Err(e) = tmp.persist(&path) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(ReportError::Io { path, source: e.error });
            }
            written.push(path);
        }
        Ok(written)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, ReportError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn csv_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })
}

/// JSON layout of `simulate`.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport<'a> {
    pub schema_version: u32,
    pub scenario: &'a Scenario,
    pub stats: &'a ActivationStats,
    pub latency: &'a LatencyBreakdown,
    pub energy: &'a EnergyBreakdown,
    pub per_token_j: f64,
    /// Device-memory placement of the same scenario, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub per_token_j: f64,
    pub token_step_latency_s: f64,
    pub normalized_energy: f64,
    pub normalized_latency: f64,
}

impl BaselineSummary {
    pub fn new(eval: &Evaluation, baseline: &Evaluation) -> Self {
        BaselineSummary {
            per_token_j: baseline.energy.per_token,
            token_step_latency_s: baseline.latency.token_step_latency,
            normalized_energy: eval.energy.per_token / baseline.energy.per_token,
            normalized_latency: eval.latency.token_step_latency / baseline.latency.token_step_latency,
        }
    }
}

pub fn simulation_json(
    scenario: &Scenario,
    eval: &Evaluation,
    baseline: Option<BaselineSummary>,
) -> Result<Vec<u8>, ReportError> {
    to_json_bytes(&SimulationReport {
        schema_version: SCHEMA_VERSION,
        scenario,
        stats: &eval.stats,
        latency: &eval.latency,
        energy: &eval.energy,
        per_token_j: eval.energy.per_token,
        baseline,
    })
}

#[derive(Serialize)]
struct Quantity<'a> {
    quantity: &'a str,
    unit: &'a str,
    value: f64,
}

/// `simulate` as CSV: one `quantity,unit,value` row per reported number.
pub fn simulation_csv(eval: &Evaluation, baseline: Option<BaselineSummary>) -> Result<Vec<u8>, ReportError> {
    let e = &eval.energy;
    let l = &eval.latency;
    let mut rows: Vec<(String, &str, f64)> = vec![
        ("per_token".into(), "J", e.per_token),
        ("total".into(), "J", e.total),
        ("access".into(), "J", e.access.total),
    ];
    for (class, j) in &e.access.by_class {
        rows.push((format!("access.{}", class.name()), "J", *j));
    }
    for (sink, j) in &e.access.by_sink {
        let name = serde_json::to_value(sink)?;
        rows.push((format!("access_sink.{}", name.as_str().unwrap_or_default()), "J", *j));
    }
    rows.push(("compute.mac".into(), "J", e.compute.mac));
    rows.push(("compute.cache".into(), "J", e.compute.cache));
    rows.push(("background".into(), "J", e.background));
    rows.push(("moe_access_share".into(), "1", e.moe_access_share()));
    rows.push(("token_step_latency".into(), "s", l.token_step_latency));
    for (class, t) in &l.by_class {
        rows.push((format!("latency.{}", class.name()), "s", *t));
    }
    rows.push(("latency.output_head".into(), "s", l.output_head_time));
    rows.push(("stats.expected_unique".into(), "experts", eval.stats.expected_unique));
    rows.push(("stats.expected_max_per_gpu".into(), "experts", eval.stats.expected_max_per_gpu));
    rows.push(("stats.ci95_halfwidth".into(), "experts", eval.stats.ci95_halfwidth));
    if let Some(b) = baseline {
        rows.push(("baseline.per_token".into(), "J", b.per_token_j));
        rows.push(("baseline.token_step_latency".into(), "s", b.token_step_latency_s));
        rows.push(("normalized_energy".into(), "1", b.normalized_energy));
        rows.push(("normalized_latency".into(), "1", b.normalized_latency));
    }
    csv_rows(rows.iter().map(|(q, unit, value)| Quantity { quantity: q, unit, value: *value }))
}

/// Placement comparison CSV, one row per (batch size, placement).
pub fn comparison_csv(rows: &[PlacementRow]) -> Result<Vec<u8>, ReportError> {
    #[derive(Serialize)]
    struct Row<'a> {
        model: &'a str,
        batch_size: u32,
        placement: &'a str,
        per_token_j: f64,
        total_j: f64,
        access_j: f64,
        moe_access_j: f64,
        compute_j: f64,
        background_j: f64,
        moe_access_share: f64,
        token_step_latency_s: f64,
        normalized_energy: f64,
        normalized_latency: f64,
    }
    csv_rows(rows.iter().map(|r| Row {
        model: &r.model,
        batch_size: r.batch_size,
        placement: r.placement.short_name(),
        per_token_j: r.per_token_j,
        total_j: r.total_j,
        access_j: r.access_j,
        moe_access_j: r.moe_access_j,
        compute_j: r.compute_j,
        background_j: r.background_j,
        moe_access_share: r.moe_access_share,
        token_step_latency_s: r.token_step_latency_s,
        normalized_energy: r.normalized_energy,
        normalized_latency: r.normalized_latency,
    }))
}

/// Sweep grid CSV: `batch_size,flash_scale,ratio`, batch-major.
pub fn sweep_csv(grid: &SweepGrid) -> Result<Vec<u8>, ReportError> {
    #[derive(Serialize)]
    struct Cell {
        batch_size: u32,
        flash_scale: f64,
        ratio: f64,
    }
    csv_rows(grid.batch_sizes.iter().zip(&grid.cells).flat_map(|(&b, row)| {
        grid.flash_scales.iter().zip(row).map(move |(&s, &r)| Cell { batch_size: b, flash_scale: s, ratio: r })
    }))
}

/// Crossover CSV: `batch_size,crossover,flash_scale`. The scale column is
/// empty unless the crossover is `at`.
pub fn crossover_csv(grid: &SweepGrid) -> Result<Vec<u8>, ReportError> {
    #[derive(Serialize)]
    struct Row {
        batch_size: u32,
        crossover: &'static str,
        flash_scale: Option<f64>,
    }
    csv_rows(grid.batch_sizes.iter().zip(&grid.crossovers).map(|(&b, c)| Row {
        batch_size: b,
        crossover: crossover_kind(*c),
        flash_scale: c.scale(),
    }))
}

pub fn crossover_kind(c: Crossover) -> &'static str {
    match c {
        Crossover::Never => "never",
        Crossover::Always => "always",
        Crossover::At(_) => "at",
    }
}

/// Latency report CSV, one row per (cluster, placement).
pub fn latency_csv(report: &LatencyReport) -> Result<Vec<u8>, ReportError> {
    #[derive(Serialize)]
    struct Row<'a> {
        model: &'a str,
        batch_size: u32,
        cluster: &'a str,
        placement: &'a str,
        attention_s: f64,
        fc_ffn_s: f64,
        moe_s: f64,
        communication_s: f64,
        exposed_prefetch_s: f64,
        token_step_latency_s: f64,
        penalty: f64,
        activation_ratio_sum: f64,
    }
    csv_rows(report.rows.iter().map(|r| Row {
        model: &report.model,
        batch_size: report.batch_size,
        cluster: &r.cluster,
        placement: r.placement.short_name(),
        attention_s: r.attention_s,
        fc_ffn_s: r.fc_ffn_s,
        moe_s: r.moe_s,
        communication_s: r.communication_s,
        exposed_prefetch_s: r.exposed_prefetch_s,
        token_step_latency_s: r.token_step_latency_s,
        penalty: r.penalty,
        activation_ratio_sum: report.activation_ratio_sum,
    }))
}

/// Formats `x` with four significant digits for terminal summaries.
pub fn sig4(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-3..6).contains(&mag) {
        let decimals = (3 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.3e}")
    }
}
