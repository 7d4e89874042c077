//! Machine topology and model shape.
//!
//! A [`MachineConfig`] describes one chiplet GPU: how many XCDs it has, how
//! many compute units each XCD contributes to the worker pool, the private L2
//! and shared LLC capacities, and the bandwidth/compute peaks used by the
//! roofline. A [`ModelConfig`] describes the decoder layer being simulated.
//!
//! Both are plain data and are immutable once validated; share them freely
//! between concurrent simulations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * 1024;

/// Default L2 line size. Not published for MI350; 128 B is the CDNA fill
/// granularity most tooling assumes.
pub const DEFAULT_LINE_BYTES: u64 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("num_xcds must be positive")]
    NoXcds,
    #[error("cus_per_xcd must be positive")]
    NoCus,
    #[error("workers_per_xcd is {found}, expected {expected} for {mode:?} scheduler mode")]
    WorkerCount {
        found: u32,
        expected: u32,
        mode: SchedulerMode,
    },
    #[error("dedicated scheduler mode leaves no workers on an XCD")]
    NoWorkers,
    #[error("nonpositive line size")]
    NonPositiveLine,
    #[error("nonpositive {0}")]
    NonPositive(&'static str),
    #[error("l2_capacity_bytes ({capacity}) is not a multiple of l2_line_bytes ({line})")]
    CapacityNotLineMultiple { capacity: u64, line: u64 },
    #[error("llc_capacity_bytes ({capacity}) is not a multiple of l2_line_bytes ({line})")]
    LlcNotLineMultiple { capacity: u64, line: u64 },
    #[error("{0} must be finite")]
    NotFinite(&'static str),
    #[error("hidden_dim {hidden} not divisible by q_heads {q_heads}")]
    HeadsDontDivideHidden { hidden: u64, q_heads: u64 },
    #[error("q_heads {q_heads} not divisible by kv_heads {kv_heads}")]
    KvHeadsDontDivideQ { q_heads: u64, kv_heads: u64 },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0} is neither a machine nor a model config")]
    UnknownKind(String),
}

/// How scheduler workgroups occupy compute units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    /// One CU per XCD runs the scheduler and is removed from the worker pool.
    #[default]
    Dedicated,
    /// Schedulers share CUs with workers.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub num_xcds: u32,
    pub cus_per_xcd: u32,
    pub workers_per_xcd: u32,
    pub l2_capacity_bytes: u64,
    #[serde(default = "default_line_bytes")]
    pub l2_line_bytes: u64,
    pub llc_capacity_bytes: u64,
    pub hbm_bandwidth_bytes_per_s: f64,
    pub l2_bandwidth_bytes_per_s: f64,
    pub peak_flops: f64,
    #[serde(default)]
    pub scheduler_mode: SchedulerMode,
}

fn default_line_bytes() -> u64 {
    DEFAULT_LINE_BYTES
}

impl MachineConfig {
    /// Looks up a named preset (`mi350` or `toy`).
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let config = match name {
            "mi350" => Self {
                num_xcds: 8,
                cus_per_xcd: 32,
                workers_per_xcd: 31,
                l2_capacity_bytes: 4 * MIB,
                l2_line_bytes: DEFAULT_LINE_BYTES,
                llc_capacity_bytes: 256 * MIB,
                hbm_bandwidth_bytes_per_s: 5.3e12,
                l2_bandwidth_bytes_per_s: 100e12,
                peak_flops: 1.3e15,
                scheduler_mode: SchedulerMode::Dedicated,
            },
            "toy" => Self {
                num_xcds: 2,
                cus_per_xcd: 4,
                workers_per_xcd: 3,
                l2_capacity_bytes: 64 * KIB,
                l2_line_bytes: DEFAULT_LINE_BYTES,
                llc_capacity_bytes: 256 * KIB,
                hbm_bandwidth_bytes_per_s: 1.0e11,
                l2_bandwidth_bytes_per_s: 2.0e12,
                peak_flops: 1.0e13,
                scheduler_mode: SchedulerMode::Dedicated,
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks every invariant, reporting the first one violated.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_xcds == 0 {
            return Err(ConfigError::NoXcds);
        }
        if self.cus_per_xcd == 0 {
            return Err(ConfigError::NoCus);
        }
        let expected = match self.scheduler_mode {
            SchedulerMode::Dedicated => self.cus_per_xcd - 1,
            SchedulerMode::Shared => self.cus_per_xcd,
        };
        if expected == 0 {
            return Err(ConfigError::NoWorkers);
        }
        if self.workers_per_xcd != expected {
            return Err(ConfigError::WorkerCount {
                found: self.workers_per_xcd,
                expected,
                mode: self.scheduler_mode,
            });
        }
        if self.l2_line_bytes == 0 {
            return Err(ConfigError::NonPositiveLine);
        }
        if self.l2_capacity_bytes == 0 {
            return Err(ConfigError::NonPositive("l2_capacity_bytes"));
        }
        if self.llc_capacity_bytes == 0 {
            return Err(ConfigError::NonPositive("llc_capacity_bytes"));
        }
        if !self.l2_capacity_bytes.is_multiple_of(self.l2_line_bytes) {
            return Err(ConfigError::CapacityNotLineMultiple {
                capacity: self.l2_capacity_bytes,
                line: self.l2_line_bytes,
            });
        }
        if !self.llc_capacity_bytes.is_multiple_of(self.l2_line_bytes) {
            return Err(ConfigError::LlcNotLineMultiple {
                capacity: self.llc_capacity_bytes,
                line: self.l2_line_bytes,
            });
        }
        for (name, value) in [
            ("hbm_bandwidth_bytes_per_s", self.hbm_bandwidth_bytes_per_s),
            ("l2_bandwidth_bytes_per_s", self.l2_bandwidth_bytes_per_s),
            ("peak_flops", self.peak_flops),
        ] {
            if !value.is_finite() {
                return Err(ConfigError::NotFinite(name));
            }
            if value <= 0.0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        Ok(())
    }

    /// Arithmetic intensity (FLOP/byte) where the HBM roof meets the compute roof.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.hbm_bandwidth_bytes_per_s
    }

    pub fn total_cus(&self) -> u64 {
        u64::from(self.num_xcds) * u64::from(self.cus_per_xcd)
    }

    pub fn total_workers(&self) -> u64 {
        u64::from(self.num_xcds) * u64::from(self.workers_per_xcd)
    }

    pub fn total_l2_bytes(&self) -> u64 {
        u64::from(self.num_xcds) * self.l2_capacity_bytes
    }

    /// Loads and validates a strict JSON machine description.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let config: Self = read_json(path.as_ref())?;
        config.validate()?;
        Ok(config)
    }

    /// Resolves a preset name, or failing that, a JSON file path.
    pub fn resolve(name_or_path: &str) -> Result<Self, ConfigError> {
        match Self::preset(name_or_path) {
            Err(ConfigError::UnknownPreset(_)) => Self::from_json_file(name_or_path),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub num_layers: u64,
    pub q_heads: u64,
    pub kv_heads: u64,
    pub dtype_bytes: u64,
}

impl ModelConfig {
    /// `qwen3-8b` (bf16) or the small `toy` model used in tests.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let config = match name {
            "qwen3-8b" => Self {
                hidden_dim: 4096,
                ffn_dim: 12288,
                num_layers: 36,
                q_heads: 32,
                kv_heads: 8,
                dtype_bytes: 2,
            },
            "toy" => Self {
                hidden_dim: 64,
                ffn_dim: 128,
                num_layers: 2,
                q_heads: 4,
                kv_heads: 2,
                dtype_bytes: 2,
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_layers", self.num_layers),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("dtype_bytes", self.dtype_bytes),
        ] {
            if value == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.q_heads) {
            return Err(ConfigError::HeadsDontDivideHidden {
                hidden: self.hidden_dim,
                q_heads: self.q_heads,
            });
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return Err(ConfigError::KvHeadsDontDivideQ {
                q_heads: self.q_heads,
                kv_heads: self.kv_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_dim / self.q_heads
    }

    /// Output width of the fused Q/K/V projection.
    pub fn qkv_dim(&self) -> u64 {
        (self.q_heads + 2 * self.kv_heads) * self.head_dim()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let config: Self = read_json(path.as_ref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(name_or_path: &str) -> Result<Self, ConfigError> {
        match Self::preset(name_or_path) {
            Err(ConfigError::UnknownPreset(_)) => Self::from_json_file(name_or_path),
            other => other,
        }
    }
}

/// A config file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyConfig {
    Machine(MachineConfig),
    Model(ModelConfig),
}

/// Loads a JSON config, telling machine and model files apart by their
/// distinguishing key (`num_xcds` or `hidden_dim`).
pub fn load_config_file(path: impl AsRef<Path>) -> Result<AnyConfig, ConfigError> {
    let path = path.as_ref();
    let value: serde_json::Value = read_json(path)?;
    let has = |key: &str| value.get(key).is_some();
    if has("num_xcds") {
        MachineConfig::from_json_file(path).map(AnyConfig::Machine)
    } else if has("hidden_dim") {
        ModelConfig::from_json_file(path).map(AnyConfig::Model)
    } else {
        Err(ConfigError::UnknownKind(path.display().to_string()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mi350_preset_topology() {
        let m = MachineConfig::preset("mi350").unwrap();
        assert_eq!(m.num_xcds, 8);
        assert_eq!(m.workers_per_xcd, 31);
        assert_eq!(m.total_cus(), 256);
        assert_eq!(m.total_l2_bytes(), 32 * MIB);
        assert!((m.ridge_point() - 245.28).abs() < 0.01);
        assert_eq!(m.ridge_point(), m.peak_flops / m.hbm_bandwidth_bytes_per_s);
    }

    #[test]
    fn toy_preset_drops_scheduler_cu() {
        let m = MachineConfig::preset("toy").unwrap();
        assert_eq!(m.workers_per_xcd, 3);
        assert_eq!(m.l2_capacity_bytes, 64 * KIB);
        assert_eq!(m.llc_capacity_bytes, 256 * KIB);
    }

    #[test]
    fn unknown_preset_is_distinct_error() {
        assert_eq!(
            MachineConfig::preset("h100"),
            Err(ConfigError::UnknownPreset("h100".into()))
        );
    }

    #[test]
    fn zero_line_size_rejected() {
        let mut m = MachineConfig::preset("toy").unwrap();
        m.l2_line_bytes = 0;
        assert_eq!(m.validate(), Err(ConfigError::NonPositiveLine));
        assert_eq!(m.validate().unwrap_err().to_string(), "nonpositive line size");
    }

    #[test]
    fn capacity_must_be_line_multiple() {
        let mut m = MachineConfig::preset("toy").unwrap();
        m.l2_capacity_bytes = 64 * KIB + 64;
        assert!(matches!(
            m.validate(),
            Err(ConfigError::CapacityNotLineMultiple { .. })
        ));
    }

    #[test]
    fn worker_count_follows_scheduler_mode() {
        let mut m = MachineConfig::preset("toy").unwrap();
        m.scheduler_mode = SchedulerMode::Shared;
        assert!(matches!(m.validate(), Err(ConfigError::WorkerCount { expected: 4, .. })));
        m.workers_per_xcd = 4;
        m.validate().unwrap();
    }

    #[test]
    fn infinite_peak_rejected() {
        let mut m = MachineConfig::preset("mi350").unwrap();
        m.peak_flops = f64::INFINITY;
        assert_eq!(m.validate(), Err(ConfigError::NotFinite("peak_flops")));
    }

    #[test]
    fn qwen_shapes() {
        let q = ModelConfig::preset("qwen3-8b").unwrap();
        assert_eq!(q.head_dim(), 128);
        assert_eq!(q.qkv_dim(), 6144);
    }

    #[test]
    fn kv_heads_must_divide_q_heads() {
        let mut q = ModelConfig::preset("qwen3-8b").unwrap();
        q.kv_heads = 5;
        assert!(matches!(q.validate(), Err(ConfigError::KvHeadsDontDivideQ { .. })));
    }

    #[test]
    fn strict_json_rejects_unknown_fields() {
        let text = r#"{"hidden_dim":64,"ffn_dim":128,"num_layers":1,"q_heads":4,
            "kv_heads":2,"dtype_bytes":2,"rope_theta":10000}"#;
        assert!(serde_json::from_str::<ModelConfig>(text).is_err());
    }

    #[test]
    fn machine_json_round_trip() {
        let m = MachineConfig::preset("mi350").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(MachineConfig::resolve(path.to_str().unwrap()).unwrap(), m);
    }

    #[test]
    fn config_kind_detected_from_keys() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        let q = dir.path().join("q.json");
        let x = dir.path().join("x.json");
        std::fs::write(&m, serde_json::to_string(&MachineConfig::preset("toy").unwrap()).unwrap()).unwrap();
        std::fs::write(&q, serde_json::to_string(&ModelConfig::preset("toy").unwrap()).unwrap()).unwrap();
        std::fs::write(&x, "{}").unwrap();
        assert!(matches!(load_config_file(&m), Ok(AnyConfig::Machine(_))));
        assert!(matches!(load_config_file(&q), Ok(AnyConfig::Model(_))));
        assert!(matches!(load_config_file(&x), Err(ConfigError::UnknownKind(_))));
        assert!(matches!(load_config_file(dir.path().join("missing.json")), Err(ConfigError::Io { .. })));
    }
}
