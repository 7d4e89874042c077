//! Closed-form models: the cooperative-tiling weight-hit model, effective
//! arithmetic intensity, the HBM roofline, and per-GEMM weight budgets.
//!
//! Also renders mode comparisons as a table of L2 hit rate and HBM
//! read/write bytes normalized to the `standard` run at the same batch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{MachineConfig, ModelConfig};
use crate::runtime::{ComparisonReport, Mode};
use crate::taskgraph::OpKind;
use crate::traversal::TileShape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("hit rate {0} outside [0, 1)")]
    HitRate(f64),
    #[error("arithmetic intensity {0} must be finite and non-negative")]
    Intensity(f64),
    #[error("{0:?} is not a linear operator")]
    NotLinear(OpKind),
    #[error("report has no weight-role L2 counters")]
    MissingWeightCounters,
}

/// Weight-load L2 hit rate under cooperative M-major tiling:
/// `1 - 1/min(workers, ceil(batch / t_m))`.
///
/// ```
/// use chipsim::analytics::weight_hit_model;
/// assert_eq!(weight_hit_model(31, 32, 16).unwrap(), 0.5);
/// assert_eq!(weight_hit_model(2, 1000, 1).unwrap(), 0.5);
/// ```
pub fn weight_hit_model(workers: u64, batch: u64, t_m: u64) -> Result<f64, AnalyticsError> {
    if workers == 0 {
        return Err(AnalyticsError::NonPositive("workers"));
    }
    if batch == 0 {
        return Err(AnalyticsError::NonPositive("batch"));
    }
    if t_m == 0 {
        return Err(AnalyticsError::NonPositive("t_m"));
    }
    let reuse = workers.min(batch.div_ceil(t_m));
    Ok(1.0 - 1.0 / reuse as f64)
}

/// `batch / (1 - hit)`: HBM bytes avoided by L2 reuse raise the intensity
/// seen by memory.
pub fn effective_ai(batch: u64, l2_hit_rate: f64) -> Result<f64, AnalyticsError> {
    if !(0.0..1.0).contains(&l2_hit_rate) {
        return Err(AnalyticsError::HitRate(l2_hit_rate));
    }
    Ok(batch as f64 / (1.0 - l2_hit_rate))
}

/// Attainable FLOP/s at intensity `ai`: `min(peak, hbm_bw * ai)`.
pub fn roofline(ai: f64, machine: &MachineConfig) -> f64 {
    machine.peak_flops.min(machine.hbm_bandwidth_bytes_per_s * ai)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub batch: u64,
    pub ai_nominal: f64,
    pub ai_effective: f64,
    pub attainable_flops: f64,
}

/// Decode GEMMs move one weight element per `batch` multiply-adds, so the
/// nominal intensity is `batch` FLOP/byte for 2-byte weights.
pub fn roofline_point(batch: u64, l2_hit_rate: f64, machine: &MachineConfig) -> Result<RooflinePoint, AnalyticsError> {
    let ai_effective = effective_ai(batch, l2_hit_rate)?;
    if !ai_effective.is_finite() {
        return Err(AnalyticsError::Intensity(ai_effective));
    }
    Ok(RooflinePoint {
        batch,
        ai_nominal: batch as f64,
        ai_effective,
        attainable_flops: roofline(ai_effective, machine),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBudget {
    pub op: OpKind,
    pub k: u64,
    pub n: u64,
    pub total_bytes: u64,
    pub per_xcd_bytes: u64,
    /// One K-chunk weight tile per worker.
    pub l2_window_bytes: u64,
    pub fits_l2: bool,
    pub fits_llc: bool,
}

/// `(K, N)` of a linear operator's weight matrix.
pub fn weight_dims(model: &ModelConfig, op: OpKind) -> Result<(u64, u64), AnalyticsError> {
    let d = model.hidden_dim;
    match op {
        OpKind::QkvProj => Ok((d, model.qkv_dim())),
        OpKind::OProjResidual => Ok((d, d)),
        OpKind::GateUp | OpKind::GateUpSilu => Ok((d, 2 * model.ffn_dim)),
        OpKind::DownProjResidual => Ok((model.ffn_dim, d)),
        other => Err(AnalyticsError::NotLinear(other)),
    }
}

pub fn weight_budget(
    model: &ModelConfig,
    machine: &MachineConfig,
    op: OpKind,
    tile: TileShape,
) -> Result<WeightBudget, AnalyticsError> {
    let (k, n) = weight_dims(model, op)?;
    let total_bytes = k * n * model.dtype_bytes;
    let l2_window_bytes = u64::from(machine.workers_per_xcd) * tile.k * tile.n * model.dtype_bytes;
    Ok(WeightBudget {
        op,
        k,
        n,
        total_bytes,
        per_xcd_bytes: total_bytes / u64::from(machine.num_xcds.max(1)),
        l2_window_bytes,
        fits_l2: l2_window_bytes <= machine.l2_capacity_bytes,
        fits_llc: total_bytes <= machine.llc_capacity_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub ops: Vec<WeightBudget>,
    pub total_bytes: u64,
    pub per_xcd_bytes: u64,
    pub fits_llc: bool,
    /// `total_bytes / llc_capacity_bytes`.
    pub llc_ratio: f64,
}

/// Weight budgets of the four GEMMs of one decoder layer.
pub fn layer_weight_budget(model: &ModelConfig, machine: &MachineConfig, tile: TileShape) -> LayerBudget {
    let ops: Vec<WeightBudget> = [
        OpKind::QkvProj,
        OpKind::OProjResidual,
        OpKind::GateUp,
        OpKind::DownProjResidual,
    ]
    .into_iter()
    .map(|op| weight_budget(model, machine, op, tile).expect("linear op"))
    .collect();
    let total_bytes: u64 = ops.iter().map(|b| b.total_bytes).sum();
    LayerBudget {
        per_xcd_bytes: ops.iter().map(|b| b.per_xcd_bytes).sum(),
        fits_llc: total_bytes <= machine.llc_capacity_bytes,
        llc_ratio: total_bytes as f64 / machine.llc_capacity_bytes as f64,
        ops,
        total_bytes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub simulated: f64,
    pub predicted: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the simulated weight-load hit rate of the report's second run
/// with a model prediction.
pub fn model_vs_sim(report: &ComparisonReport, predicted: f64, tolerance: f64) -> Result<Deviation, AnalyticsError> {
    let simulated = report
        .weight_l2_hit_rate_b
        .ok_or(AnalyticsError::MissingWeightCounters)?;
    let deviation = (simulated - predicted).abs();
    Ok(Deviation {
        simulated,
        predicted,
        deviation,
        tolerance,
        pass: deviation <= tolerance,
    })
}

/// One run's headline numbers, as stored in a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    pub batch: u64,
    pub l2_hit_rate: f64,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub mode: Mode,
    pub batch: u64,
    pub l2_hit_rate: f64,
    /// HBM reads relative to the baseline run at the same batch.
    pub hbm_read_x: f64,
    pub hbm_write_x: f64,
    pub baseline: Mode,
}

/// Normalizes every row to the `standard` run of its batch, or to the first
/// row of the batch when no `standard` run is present.
pub fn normalize(rows: &[ReportRow]) -> Vec<NormalizedRow> {
    let mut by_batch: BTreeMap<u64, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_batch.entry(r.batch).or_default().push(r);
    }
    let ratio = |x: u64, base: u64| if base == 0 { if x == 0 { 1.0 } else { f64::INFINITY } } else { x as f64 / base as f64 };
    let mut out = Vec::with_capacity(rows.len());
    for (batch, group) in by_batch {
        let base = group
            .iter()
            .find(|r| r.mode == Mode::Standard)
            .copied()
            .unwrap_or(group[0]);
        for r in group {
            out.push(NormalizedRow {
                mode: r.mode,
                batch,
                l2_hit_rate: r.l2_hit_rate,
                hbm_read_x: ratio(r.hbm_read_bytes, base.hbm_read_bytes),
                hbm_write_x: ratio(r.hbm_write_bytes, base.hbm_write_bytes),
                baseline: base.mode,
            });
        }
    }
    out
}

/// Plain-text comparison table, one block per batch size.
pub fn render_table(rows: &[ReportRow]) -> String {
    let norm = normalize(rows);
    let mut s = String::new();
    let _ = writeln!(s, "{:>6}  {:<16} {:>8} {:>10} {:>10}", "batch", "mode", "L2 hit%", "HBM rd x", "HBM wr x");
    let mut last = None;
    for r in &norm {
        if last.is_some() && last != Some(r.batch) {
            s.push('\n');
        }
        last = Some(r.batch);
        let _ = writeln!(
            s,
            "{:>6}  {:<16} {:>7.1}% {:>9.2}x {:>9.2}x",
            r.batch,
            r.mode.as_str(),
            100.0 * r.l2_hit_rate,
            r.hbm_read_x,
            r.hbm_write_x
        );
    }
    s
}

pub fn render_json(rows: &[ReportRow]) -> String {
    #[derive(Serialize)]
    struct Out {
        schema_version: u32,
        rows: Vec<NormalizedRow>,
    }
    serde_json::to_string_pretty(&Out {
        schema_version: crate::SCHEMA_VERSION,
        rows: normalize(rows),
    })
    .expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MIB;

    fn mi350() -> MachineConfig {
        MachineConfig::preset("mi350").unwrap()
    }

    #[test]
    fn hit_model_values() {
        assert_eq!(weight_hit_model(31, 1, 16).unwrap(), 0.0);
        assert_eq!(weight_hit_model(31, 16, 16).unwrap(), 0.0);
        assert_eq!(weight_hit_model(31, 32, 16).unwrap(), 0.5);
        assert_eq!(weight_hit_model(31, 64, 16).unwrap(), 0.75);
        assert_eq!(weight_hit_model(2, 1000, 1).unwrap(), 0.5);
        assert_eq!(weight_hit_model(0, 1, 1), Err(AnalyticsError::NonPositive("workers")));
        assert_eq!(weight_hit_model(1, 0, 1), Err(AnalyticsError::NonPositive("batch")));
        assert_eq!(weight_hit_model(1, 1, 0), Err(AnalyticsError::NonPositive("t_m")));
    }

    #[test]
    fn hit_model_saturates_at_workers() {
        let cap = weight_hit_model(31, 31 * 16, 16).unwrap();
        for b in [31 * 16 + 1, 1000, 10_000] {
            assert_eq!(weight_hit_model(31, b, 16).unwrap(), cap);
        }
    }

    #[test]
    fn effective_ai_values() {
        assert!((effective_ai(32, 0.51).unwrap() - 65.306).abs() < 1e-3);
        assert_eq!(effective_ai(8, 0.0).unwrap(), 8.0);
        assert!((effective_ai(64, 0.614).unwrap() - 165.8).abs() < 0.05);
        assert_eq!(effective_ai(8, 1.0), Err(AnalyticsError::HitRate(1.0)));
        assert!(effective_ai(8, -0.1).is_err());
        assert!(effective_ai(8, f64::NAN).is_err());
    }

    #[test]
    fn roofline_values() {
        let m = mi350();
        assert!((roofline(65.3, &m) - 346.09e12).abs() < 1e9);
        assert_eq!(roofline(1.0, &m), 5.3e12);
        assert_eq!(roofline(m.ridge_point(), &m), m.peak_flops);
        assert_eq!(roofline(1e6, &m), m.peak_flops);
        assert_eq!(roofline(0.0, &m), 0.0);
    }

    #[test]
    fn roofline_point_is_above_nominal() {
        let p = roofline_point(32, 0.51, &mi350()).unwrap();
        assert!(p.ai_effective >= p.ai_nominal);
        assert!((p.attainable_flops - 346.1e12).abs() < 1e12);
    }

    #[test]
    fn budgets_in_mib() {
        let q = ModelConfig::preset("qwen3-8b").unwrap();
        let m = mi350();
        let t = TileShape::new(16, 64, 256);
        let cases = [
            (OpKind::QkvProj, 48, 6),
            (OpKind::OProjResidual, 32, 4),
            (OpKind::GateUp, 192, 24),
            (OpKind::DownProjResidual, 96, 12),
        ];
        for (op, total, per) in cases {
            let b = weight_budget(&q, &m, op, t).unwrap();
            assert_eq!(b.total_bytes, total * MIB, "{op:?}");
            assert_eq!(b.per_xcd_bytes, per * MIB, "{op:?}");
        }
        let layer = layer_weight_budget(&q, &m, t);
        assert_eq!(layer.total_bytes, 368 * MIB);
        assert!(!layer.fits_llc);
        assert!((layer.llc_ratio - 1.4375).abs() < 1e-12);
    }

    #[test]
    fn window_from_tile_shape() {
        let q = ModelConfig::preset("qwen3-8b").unwrap();
        let b = weight_budget(&q, &mi350(), OpKind::GateUp, TileShape::new(16, 64, 256)).unwrap();
        assert_eq!(b.l2_window_bytes, 31 * 32 * 1024);
        assert!(b.fits_l2);
        assert!(b.l2_window_bytes < 3 * MIB / 2);
    }

    #[test]
    fn budget_rejects_non_linear() {
        let q = ModelConfig::preset("qwen3-8b").unwrap();
        assert_eq!(
            weight_budget(&q, &mi350(), OpKind::Silu, TileShape::new(16, 64, 256)),
            Err(AnalyticsError::NotLinear(OpKind::Silu))
        );
    }

    #[test]
    fn normalization_to_standard() {
        let rows = vec![
            ReportRow { mode: Mode::ChipletMTile, batch: 32, l2_hit_rate: 0.5, hbm_read_bytes: 50, hbm_write_bytes: 10 },
            ReportRow { mode: Mode::Standard, batch: 32, l2_hit_rate: 0.1, hbm_read_bytes: 100, hbm_write_bytes: 10 },
            ReportRow { mode: Mode::ChipletMSplit, batch: 1, l2_hit_rate: 0.0, hbm_read_bytes: 7, hbm_write_bytes: 0 },
        ];
        let n = normalize(&rows);
        assert_eq!(n[0].batch, 1);
        assert_eq!(n[0].hbm_read_x, 1.0);
        assert_eq!(n[0].hbm_write_x, 1.0);
        let tile = n.iter().find(|r| r.mode == Mode::ChipletMTile).unwrap();
        assert_eq!((tile.hbm_read_x, tile.baseline), (0.5, Mode::Standard));
        let text = render_table(&rows);
        assert!(text.contains("chiplet_m_tile"));
        assert!(text.contains("0.50x"));
        let v: serde_json::Value = serde_json::from_str(&render_json(&rows)).unwrap();
        assert_eq!(v["schema_version"], 1);
    }
}
