//! Scenario sweeps: every (batch, mode) point is built, simulated and
//! written as one metrics row.
//!
//! There is no randomness anywhere in the simulator, so there is no seed:
//! the same scenario always produces byte-identical output.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{self, ReportRow};
use crate::machine::{ConfigError, MachineConfig, ModelConfig};
use crate::memsim::MemHierarchy;
use crate::runtime::{simulate_traced, Mode, SimError, SimTrace};
use crate::taskgraph::{build_decoder_layers, GraphError, TileProfile};

/// Column order of the metrics CSV. Stable; bump [`crate::SCHEMA_VERSION`]
/// when it changes.
pub const CSV_COLUMNS: [&str; 11] = [
    "scenario_id",
    "mode",
    "batch",
    "l2_hit_rate",
    "hbm_read_bytes",
    "hbm_write_bytes",
    "fences",
    "global_atomics",
    "local_atomics",
    "dispatches",
    "est_time_s",
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("{point}: {source}")]
    Graph { point: String, source: GraphError },
    #[error("{point}: {source}")]
    Sim { point: String, source: SimError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

impl ScenarioError {
    /// Process exit status: 2 for configuration problems, 3 for deadlock,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Invalid(_) | ScenarioError::Graph { .. } => 2,
            ScenarioError::Sim {
                source: SimError::Deadlock { .. },
                ..
            } => 3,
            ScenarioError::Sim {
                source: SimError::Graph(_),
                ..
            } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Preset name or path to a JSON machine file.
    pub machine: String,
    /// Preset name or path to a JSON model file.
    pub model: String,
    pub modes: Vec<Mode>,
    pub batches: Vec<u64>,
    pub layers: u32,
    /// Tile profile name, or `auto` (`reference` for `qwen3-8b`,
    /// `uniform` otherwise).
    pub profile: String,
    pub format: Format,
    /// Also write one access-trace JSONL file per point.
    pub trace: bool,
    /// Points simulated in parallel; 0 means one per available core.
    pub jobs: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            machine: "mi350".into(),
            model: "qwen3-8b".into(),
            modes: vec![Mode::Standard, Mode::ChipletMTile, Mode::ChipletMSplit],
            batches: vec![1],
            layers: 1,
            profile: "auto".into(),
            format: Format::Csv,
            trace: false,
            jobs: 0,
        }
    }
}

/// Metrics of one simulated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario_id: String,
    pub mode: Mode,
    pub batch: u64,
    pub l2_hit_rate: f64,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    pub fences: u64,
    pub global_atomics: u64,
    pub local_atomics: u64,
    pub dispatches: u64,
    pub est_time_s: f64,
}

impl MetricsRow {
    fn from_trace(scenario_id: String, trace: &SimTrace) -> Self {
        Self {
            scenario_id,
            mode: trace.meta.mode,
            batch: trace.meta.batch,
            l2_hit_rate: trace.l2_hit_rate(),
            hbm_read_bytes: trace.hbm_read_bytes(),
            hbm_write_bytes: trace.hbm_write_bytes(),
            fences: trace.sync.fences_issued,
            global_atomics: trace.sync.global_atomics,
            local_atomics: trace.sync.local_atomics,
            dispatches: trace.dispatches,
            est_time_s: trace.estimated_time_s,
        }
    }

    pub fn report_row(&self) -> ReportRow {
        ReportRow {
            mode: self.mode,
            batch: self.batch,
            l2_hit_rate: self.l2_hit_rate,
            hbm_read_bytes: self.hbm_read_bytes,
            hbm_write_bytes: self.hbm_write_bytes,
        }
    }
}

/// Loaded and checked scenario inputs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub machine: MachineConfig,
    pub model: ModelConfig,
    pub profile: TileProfile,
    machine_name: String,
    model_name: String,
}

fn short_name(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string())
}

impl Scenario {
    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        if self.batches.is_empty() {
            return Err(ScenarioError::Invalid("at least one batch size is required".into()));
        }
        if self.batches.contains(&0) {
            return Err(ScenarioError::Invalid("batch sizes must be positive".into()));
        }
        if self.modes.is_empty() {
            return Err(ScenarioError::Invalid("at least one mode is required".into()));
        }
        if self.layers == 0 {
            return Err(ScenarioError::Invalid("layers must be at least 1".into()));
        }
        let machine = MachineConfig::resolve(&self.machine)?;
        let model = ModelConfig::resolve(&self.model)?;
        let profile_name = match self.profile.as_str() {
            "auto" if self.model == "qwen3-8b" => "reference",
            "auto" => "uniform",
            other => other,
        };
        let profile = TileProfile::by_name(profile_name).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(Resolved {
            machine,
            model,
            profile,
            machine_name: short_name(&self.machine),
            model_name: short_name(&self.model),
        })
    }

    /// `(batch, mode)` points in output order.
    pub fn points(&self) -> Vec<(u64, Mode)> {
        self.batches
            .iter()
            .flat_map(|&b| self.modes.iter().map(move |&m| (b, m)))
            .collect()
    }
}

fn point_id(r: &Resolved, layers: u32, batch: u64, mode: Mode) -> String {
    format!("{}:{}:L{}:bs{}:{}", r.machine_name, r.model_name, layers, batch, mode)
}

/// Simulates one point, optionally streaming its access trace to `trace`.
pub fn run_point(
    r: &Resolved,
    layers: u32,
    batch: u64,
    mode: Mode,
    trace: Option<&Path>,
) -> Result<(MetricsRow, SimTrace), ScenarioError> {
    let id = point_id(r, layers, batch, mode);
    let g = build_decoder_layers(&r.model, &r.machine, mode.build_mode(), batch, &r.profile, layers).map_err(|source| {
        ScenarioError::Graph {
            point: id.clone(),
            source,
        }
    })?;
    let mem = MemHierarchy::for_machine(&r.machine);
    let opts = mode.options();
    let sim = match trace {
        Some(path) => {
            let file = File::create(path).map_err(|source| ScenarioError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let mut w = BufWriter::new(file);
            simulate_traced(&g, &r.machine, mem, &opts, Some(&mut w))
        }
        None => simulate_traced(&g, &r.machine, mem, &opts, None),
    }
    .map_err(|source| ScenarioError::Sim {
        point: id.clone(),
        source,
    })?;
    Ok((MetricsRow::from_trace(id, &sim), sim))
}

/// Renders rows as the versioned CSV.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("# chipsim-metrics schema_version={}\n", crate::SCHEMA_VERSION);
    s.push_str(&CSV_COLUMNS.join(","));
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{},{},{},{},{:.6e}",
            r.scenario_id,
            r.mode,
            r.batch,
            r.l2_hit_rate,
            r.hbm_read_bytes,
            r.hbm_write_bytes,
            r.fences,
            r.global_atomics,
            r.local_atomics,
            r.dispatches,
            r.est_time_s
        );
    }
    s
}

pub fn to_json(scenario: &Scenario, rows: &[MetricsRow]) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        scenario: &'a Scenario,
        rows: &'a [MetricsRow],
    }
    serde_json::to_string_pretty(&Out {
        schema_version: crate::SCHEMA_VERSION,
        scenario,
        rows,
    })
    .expect("metrics serialize")
}

/// Parses a metrics file written by [`run`] (CSV or JSON, by content).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, msg: String| ScenarioError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if text.trim_start().starts_with('{') {
        #[derive(Deserialize)]
        struct In {
            rows: Vec<MetricsRow>,
        }
        let parsed: In = serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e.to_string()))?;
        return Ok(parsed.rows);
    }
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if !seen_header {
            if f != CSV_COLUMNS {
                return Err(parse_err(n, "unexpected CSV header".into()));
            }
            seen_header = true;
            continue;
        }
        if f.len() != CSV_COLUMNS.len() {
            return Err(parse_err(n, format!("expected {} fields, found {}", CSV_COLUMNS.len(), f.len())));
        }
        let int = |j: usize| f[j].parse::<u64>().map_err(|e| parse_err(n, format!("{}: {e}", CSV_COLUMNS[j])));
        let float = |j: usize| f[j].parse::<f64>().map_err(|e| parse_err(n, format!("{}: {e}", CSV_COLUMNS[j])));
        rows.push(MetricsRow {
            scenario_id: f[0].to_string(),
            mode: f[1].parse().map_err(|e| parse_err(n, e))?,
            batch: int(2)?,
            l2_hit_rate: float(3)?,
            hbm_read_bytes: int(4)?,
            hbm_write_bytes: int(5)?,
            fences: int(6)?,
            global_atomics: int(7)?,
            local_atomics: int(8)?,
            dispatches: int(9)?,
            est_time_s: float(10)?,
        });
    }
    if !seen_header {
        return Err(parse_err(0, "missing CSV header".into()));
    }
    Ok(rows)
}

/// Files written by [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub trace_paths: Vec<PathBuf>,
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

/// Runs every point and writes the metrics file at `out`, a summary next to
/// it (`<stem>.summary.txt`) and, with tracing on, one
/// `<stem>.bs<B>.<mode>.trace.jsonl` per point.
pub fn run(scenario: &Scenario, out: &Path) -> Result<RunOutput, ScenarioError> {
    let resolved = scenario.resolve()?;
    let points = scenario.points();
    let trace_paths: Vec<PathBuf> = if scenario.trace {
        points
            .iter()
            .map(|(b, m)| sibling(out, &format!(".bs{b}.{m}.trace.jsonl")))
            .collect()
    } else {
        Vec::new()
    };
    let work = |i: usize| {
        let (b, m) = points[i];
        run_point(&resolved, scenario.layers, b, m, trace_paths.get(i).map(PathBuf::as_path)).map(|(row, _)| row)
    };
    let results: Vec<Result<MetricsRow, ScenarioError>> = if scenario.jobs == 1 {
        (0..points.len()).map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(scenario.jobs)
            .build()
            .map_err(|e| ScenarioError::Invalid(format!("thread pool: {e}")))?;
        // collect keeps scenario order whatever order points finish in
        pool.install(|| (0..points.len()).into_par_iter().map(work).collect())
    };
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let body = match scenario.format {
        Format::Csv => to_csv(&rows),
        Format::Json => to_json(scenario, &rows),
    };
    let write = |path: &Path, text: &str| {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, text).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    write(out, &body)?;
    let summary_path = sibling(out, ".summary.txt");
    write(&summary_path, &summary(&rows))?;
    Ok(RunOutput {
        rows,
        metrics_path: out.to_path_buf(),
        summary_path,
        trace_paths,
    })
}

/// Comparison table of all rows normalized to `standard` per batch.
pub fn summary(rows: &[MetricsRow]) -> String {
    let report: Vec<ReportRow> = rows.iter().map(MetricsRow::report_row).collect();
    analytics::render_table(&report)
}

/// Derived quantities printed by `validate`.
pub fn describe(machine: Option<&MachineConfig>, model: Option<&ModelConfig>, batches: &[u64], t_m: u64) -> String {
    let mut s = String::new();
    if let Some(m) = machine {
        let _ = writeln!(s, "machine: {} XCDs x {} workers, L2 {} KiB/XCD, LLC {} MiB", m.num_xcds, m.workers_per_xcd, m.l2_capacity_bytes / 1024, m.llc_capacity_bytes >> 20);
        let _ = writeln!(s, "ridge point: {:.2} FLOP/byte", m.ridge_point());
    }
    if let Some(q) = model {
        let _ = writeln!(s, "model: d={} d_ff={} layers={} heads={}/{} dtype={} B", q.hidden_dim, q.ffn_dim, q.num_layers, q.q_heads, q.kv_heads, q.dtype_bytes);
    }
    if !batches.is_empty() {
        let _ = writeln!(s, "m_tiles (T_M={t_m}):");
        for b in batches {
            let _ = writeln!(s, "  bs {b:>4}: {}", b.div_ceil(t_m));
        }
    }
    if let (Some(m), Some(q)) = (machine, model) {
        let tile = crate::traversal::TileShape::new(t_m, 64, 256);
        let layer = analytics::layer_weight_budget(q, m, tile);
        let _ = writeln!(s, "per-XCD weight bytes:");
        for b in &layer.ops {
            let _ = writeln!(s, "  {:<8} {:>12} ({} total)", b.op.label(), b.per_xcd_bytes, b.total_bytes);
        }
        let _ = writeln!(
            s,
            "  {:<8} {:>12} ({} total, {:.2}x LLC)",
            "layer", layer.per_xcd_bytes, layer.total_bytes, layer.llc_ratio
        );
    }
    s
}
