//! Tile schedules for one Chiplet-task's share of a GEMM, and their lowering
//! to line-granular address streams.
//!
//! A GEMM `[M,K] x [K,N] = [M,N]` is N-split across XCDs: XCD `x` owns output
//! columns `[x * N_local, (x + 1) * N_local)`. Weights are stored as
//! `num_xcds` contiguous partitions, each a row-major `[K, N_local]` block, so
//! a Chiplet-task's weights start at `weight_base + x * K * N_local * dtype`.
//!
//! Output tiles are addressed by `(m_idx, n_idx)` where `n_idx` is a global
//! N-tile index: partition `n_idx / n_tiles_local`, local tile
//! `n_idx % n_tiles_local`. Edge tiles are clamped to the real matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memsim::{Access, AccessKind, AccessModifier, Role};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("need at least one worker")]
    NoWorkers,
    #[error("tile dimensions must be positive")]
    ZeroTile,
    #[error("GEMM dimensions must be positive")]
    ZeroDim,
    #[error("xcd {xcd} out of range for {num_xcds} XCDs")]
    XcdOutOfRange { xcd: usize, num_xcds: usize },
    #[error("N={n} does not split evenly across {num_xcds} XCDs")]
    UnevenNSplit { n: u64, num_xcds: usize },
    #[error("tile ({m_idx}, {n_idx}) outside the {m_tiles}x{n_tiles} grid")]
    TileOutOfRange {
        m_idx: u32,
        n_idx: u32,
        m_tiles: u32,
        n_tiles: u32,
    },
    #[error("window width must be positive")]
    ZeroWindow,
    #[error("address overflow laying out the {0} region")]
    AddressOverflow(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl GemmShape {
    pub fn new(m: u64, k: u64, n: u64) -> Self {
        Self { m, k, n }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.k as f64 * self.n as f64
    }
}

/// `(T_M, T_N, T_K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl TileShape {
    pub fn new(m: u64, n: u64, k: u64) -> Self {
        Self { m, n, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    NMajor,
    MMajorWindowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Every XCD computes all M-tiles of its N-split columns.
    MTile,
    /// Each XCD gets a disjoint M-tile; workers take disjoint weight columns.
    MSplit,
}

/// How a GEMM's output tile is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Full,
    /// Gate/up fused with SiLU: the tile writes `T_N / 2` activated columns
    /// into a `[M, N / 2]` buffer.
    FusedHalf,
}

/// Addressing for one GEMM as seen by the XCDs that execute it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmPartition {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub num_xcds: usize,
    /// Columns owned by each XCD under N-split, `n / num_xcds`.
    pub n_local: u64,
    pub tile: TileShape,
    pub weight_base: u64,
    pub act_base: u64,
    pub out_base: u64,
    pub dtype_bytes: u64,
    pub output: OutputMode,
}

impl GemmPartition {
    pub fn new(
        shape: GemmShape,
        tile: TileShape,
        num_xcds: usize,
        dtype_bytes: u64,
    ) -> Result<Self, ScheduleError> {
        if tile.m == 0 || tile.n == 0 || tile.k == 0 || dtype_bytes == 0 {
            return Err(ScheduleError::ZeroTile);
        }
        if shape.m == 0 || shape.k == 0 || shape.n == 0 {
            return Err(ScheduleError::ZeroDim);
        }
        if num_xcds == 0 || !shape.n.is_multiple_of(num_xcds as u64) {
            return Err(ScheduleError::UnevenNSplit {
                n: shape.n,
                num_xcds,
            });
        }
        Ok(Self {
            m: shape.m,
            k: shape.k,
            n: shape.n,
            num_xcds,
            n_local: shape.n / num_xcds as u64,
            tile,
            weight_base: 0,
            act_base: 0,
            out_base: 0,
            dtype_bytes,
            output: OutputMode::Full,
        })
    }

    pub fn with_bases(mut self, weight: u64, act: u64, out: u64) -> Self {
        self.weight_base = weight;
        self.act_base = act;
        self.out_base = out;
        self
    }

    pub fn with_output(mut self, output: OutputMode) -> Self {
        self.output = output;
        self
    }

    pub fn m_tiles(&self) -> u32 {
        self.m.div_ceil(self.tile.m) as u32
    }

    /// N-tiles inside one XCD's partition.
    pub fn n_tiles_local(&self) -> u32 {
        self.n_local.div_ceil(self.tile.n) as u32
    }

    pub fn n_tiles_total(&self) -> u32 {
        self.n_tiles_local() * self.num_xcds as u32
    }

    pub fn k_chunks(&self) -> u32 {
        self.k.div_ceil(self.tile.k) as u32
    }

    pub fn weight_bytes(&self) -> u64 {
        self.k * self.n * self.dtype_bytes
    }

    pub fn act_bytes(&self) -> u64 {
        self.m * self.k * self.dtype_bytes
    }

    pub fn out_bytes(&self) -> u64 {
        match self.output {
            OutputMode::Full => self.m * self.n * self.dtype_bytes,
            OutputMode::FusedHalf => self.m * (self.n / 2) * self.dtype_bytes,
        }
    }

    /// Global column range `[start, start + len)` of a global N-tile.
    fn tile_cols(&self, n_idx: u32) -> (u64, u64) {
        let per = self.n_tiles_local();
        let part = u64::from(n_idx / per);
        let local = u64::from(n_idx % per) * self.tile.n;
        let len = self.tile.n.min(self.n_local - local);
        (part * self.n_local + local, len)
    }

    fn check_tile(&self, t: TileCoord) -> Result<(), ScheduleError> {
        if t.m_idx >= self.m_tiles() || t.n_idx >= self.n_tiles_total() {
            return Err(ScheduleError::TileOutOfRange {
                m_idx: t.m_idx,
                n_idx: t.n_idx,
                m_tiles: self.m_tiles(),
                n_tiles: self.n_tiles_total(),
            });
        }
        Ok(())
    }

    fn check_regions(&self) -> Result<(), ScheduleError> {
        let end = |base: u64, bytes: u64, what| {
            base.checked_add(bytes)
                .ok_or(ScheduleError::AddressOverflow(what))
        };
        end(self.weight_base, self.weight_bytes(), "weight")?;
        end(self.act_base, self.act_bytes(), "activation")?;
        end(self.out_base, self.out_bytes(), "output")?;
        Ok(())
    }

    /// Appends the accesses one worker makes for K-chunk `chunk` of `tile`:
    /// weight rows (streaming), activation rows (default), and after the last
    /// chunk the non-temporal output store.
    pub fn emit_chunk(
        &self,
        tile: TileCoord,
        chunk: u32,
        line_bytes: u64,
        out: &mut Vec<Access>,
    ) -> Result<(), ScheduleError> {
        self.check_tile(tile)?;
        self.check_regions()?;
        let dt = self.dtype_bytes;
        let (col0, cols) = self.tile_cols(tile.n_idx);
        let k0 = u64::from(chunk) * self.tile.k;
        let k1 = (k0 + self.tile.k).min(self.k);
        let m0 = u64::from(tile.m_idx) * self.tile.m;
        let m1 = (m0 + self.tile.m).min(self.m);

        let part = col0 / self.n_local;
        let local_col = col0 % self.n_local;
        let part_base = self.weight_base + part * self.k * self.n_local * dt;
        for k in k0..k1 {
            let addr = part_base + (k * self.n_local + local_col) * dt;
            push_segment(out, addr, cols * dt, line_bytes, |a, b| Access {
                addr: a,
                bytes: b,
                kind: AccessKind::Load,
                modifier: AccessModifier::Streaming,
                role: Role::Weight,
                elem_bytes: dt as u32,
            });
        }
        for m in m0..m1 {
            let addr = self.act_base + (m * self.k + k0) * dt;
            push_segment(out, addr, (k1 - k0) * dt, line_bytes, |a, b| Access {
                addr: a,
                bytes: b,
                kind: AccessKind::Load,
                modifier: AccessModifier::Default,
                role: Role::Activation,
                elem_bytes: dt as u32,
            });
        }
        if chunk + 1 == self.k_chunks() {
            let (row_elems, out_col, out_cols) = match self.output {
                OutputMode::Full => (self.n, col0, cols),
                OutputMode::FusedHalf => (self.n / 2, col0 / 2, cols.div_ceil(2)),
            };
            for m in m0..m1 {
                let addr = self.out_base + (m * row_elems + out_col) * dt;
                push_segment(out, addr, out_cols * dt, line_bytes, |a, b| Access {
                    addr: a,
                    bytes: b,
                    kind: AccessKind::Store,
                    modifier: AccessModifier::NonTemporalBypass,
                    role: Role::Output,
                    elem_bytes: dt as u32,
                });
            }
        }
        Ok(())
    }
}

/// Splits `[addr, addr + len)` at line boundaries.
pub(crate) fn push_segment(
    out: &mut Vec<Access>,
    addr: u64,
    len: u64,
    line_bytes: u64,
    make: impl Fn(u64, u32) -> Access,
) {
    let end = addr + len;
    let mut a = addr;
    while a < end {
        let line_end = (a / line_bytes + 1) * line_bytes;
        let b = line_end.min(end);
        out.push(make(a, (b - a) as u32));
        a = b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub m_idx: u32,
    pub n_idx: u32,
}

impl TileCoord {
    pub fn new(m_idx: u32, n_idx: u32) -> Self {
        Self { m_idx, n_idx }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSchedule {
    pub xcd: usize,
    pub traversal: Traversal,
    pub distribution: Distribution,
    /// `workers[w]` is worker `w`'s ordered tile list.
    pub workers: Vec<Vec<TileCoord>>,
}

impl TileSchedule {
    pub fn num_tiles(&self) -> usize {
        self.workers.iter().map(Vec::len).sum()
    }

    /// Tiles every worker works on at round `step` (one whole tile per round).
    pub fn round(&self, step: usize) -> Vec<Option<TileCoord>> {
        self.workers.iter().map(|w| w.get(step).copied()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Builds one XCD's tile schedule.
///
/// With `MTile`, the XCD walks its own N-split columns over every M-tile, in
/// the order given by `traversal`, and hands tiles to workers round-robin
/// (`idx % workers`). `MMajorWindowed` walks down M inside each group of
/// `window` columns, so with `window == 1` consecutive tiles share a weight
/// column.
///
/// With `MSplit`, M-tiles are spread over XCDs and workers only ever hold
/// disjoint weight columns.
pub fn schedule(
    p: &GemmPartition,
    workers: usize,
    traversal: Traversal,
    distribution: Distribution,
    xcd: usize,
    num_xcds: usize,
) -> Result<TileSchedule, ScheduleError> {
    schedule_windowed(p, workers, traversal, distribution, xcd, num_xcds, 1)
}

pub fn schedule_windowed(
    p: &GemmPartition,
    workers: usize,
    traversal: Traversal,
    distribution: Distribution,
    xcd: usize,
    num_xcds: usize,
    window: u32,
) -> Result<TileSchedule, ScheduleError> {
    if workers == 0 {
        return Err(ScheduleError::NoWorkers);
    }
    if window == 0 {
        return Err(ScheduleError::ZeroWindow);
    }
    if xcd >= num_xcds {
        return Err(ScheduleError::XcdOutOfRange { xcd, num_xcds });
    }
    let m_tiles = p.m_tiles();
    let ordered: Vec<TileCoord> = match distribution {
        Distribution::MTile => {
            let n_local = p.n_tiles_local();
            let first = xcd as u32 * n_local;
            let mut tiles = Vec::with_capacity((m_tiles * n_local) as usize);
            match traversal {
                Traversal::NMajor => {
                    for m in 0..m_tiles {
                        for n in 0..n_local {
                            tiles.push(TileCoord::new(m, first + n));
                        }
                    }
                }
                Traversal::MMajorWindowed => {
                    let mut group = 0;
                    while group < n_local {
                        let end = (group + window).min(n_local);
                        for m in 0..m_tiles {
                            for n in group..end {
                                tiles.push(TileCoord::new(m, first + n));
                            }
                        }
                        group = end;
                    }
                }
            }
            tiles
        }
        Distribution::MSplit => {
            let (ms, cols) = msplit_region(p, xcd, num_xcds);
            let mut tiles = Vec::with_capacity(ms.len() * cols.len());
            for &m in &ms {
                for n in cols.clone() {
                    tiles.push(TileCoord::new(m, n));
                }
            }
            tiles
        }
    };
    let mut per_worker = vec![Vec::new(); workers];
    for (idx, t) in ordered.into_iter().enumerate() {
        per_worker[idx % workers].push(t);
    }
    Ok(TileSchedule {
        xcd,
        traversal,
        distribution,
        workers: per_worker,
    })
}

/// M-tiles and global N-tile range one XCD covers under M-split.
///
/// When there are at most as many M-tiles as XCDs, XCD `x` takes M-tile
/// `x % m_tiles` and the XCDs sharing that M-tile divide all N-tiles among
/// themselves. With more M-tiles than XCDs, XCD `x` takes every M-tile `m`
/// with `m % num_xcds == x` across all N-tiles. Together the XCDs cover the
/// output grid exactly once.
pub fn msplit_region(
    p: &GemmPartition,
    xcd: usize,
    num_xcds: usize,
) -> (Vec<u32>, std::ops::Range<u32>) {
    let m_tiles = p.m_tiles() as usize;
    let total = p.n_tiles_total();
    if m_tiles <= num_xcds {
        let m = xcd % m_tiles;
        let group: Vec<usize> = (0..num_xcds).filter(|x| x % m_tiles == m).collect();
        let rank = group.iter().position(|&x| x == xcd).unwrap_or(0) as u32;
        let size = group.len() as u32;
        let lo = rank * total / size;
        let hi = (rank + 1) * total / size;
        (vec![m as u32], lo..hi)
    } else {
        let ms = (0..m_tiles as u32)
            .filter(|m| *m as usize % num_xcds == xcd)
            .collect();
        (ms, 0..total)
    }
}

/// Per-worker access lists, grouped by interleave step (one K-chunk each).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessStream {
    pub workers: Vec<Vec<Vec<Access>>>,
}

impl AccessStream {
    pub fn is_empty(&self) -> bool {
        self.workers.iter().all(|w| w.iter().all(Vec::is_empty))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Access> {
        self.workers.iter().flatten().flatten()
    }

    pub fn bytes(&self, role: Role, kind: AccessKind) -> u64 {
        self.iter()
            .filter(|a| a.role == role && a.kind == kind)
            .map(|a| u64::from(a.bytes))
            .sum()
    }

    /// Round-robin interleave: step `s` visits workers `0..W` in order.
    pub fn interleaved(&self) -> Vec<(usize, &Access)> {
        let steps = self.workers.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::new();
        for s in 0..steps {
            for (w, worker) in self.workers.iter().enumerate() {
                if let Some(step) = worker.get(s) {
                    out.extend(step.iter().map(|a| (w, a)));
                }
            }
        }
        out
    }
}

pub fn lower_to_accesses(
    s: &TileSchedule,
    p: &GemmPartition,
    line_bytes: u64,
) -> Result<AccessStream, ScheduleError> {
    let chunks = p.k_chunks();
    let mut workers = Vec::with_capacity(s.workers.len());
    for tiles in &s.workers {
        let mut steps = Vec::with_capacity(tiles.len() * chunks as usize);
        for &t in tiles {
            for c in 0..chunks {
                let mut step = Vec::new();
                p.emit_chunk(t, c, line_bytes, &mut step)?;
                steps.push(step);
            }
        }
        workers.push(steps);
    }
    Ok(AccessStream { workers })
}
