//! Partitioned memory hierarchy: one private L2 per XCD, a shared LLC acting
//! as victim cache, and HBM behind it.
//!
//! Every access is issued on behalf of one XCD and only ever touches that
//! XCD's L2; there are no cross-XCD probes. Byte counters are exact multiples
//! of the line size.
//!
//! Access semantics by modifier:
//!
//! | kind  | modifier            | L2 behaviour                                    |
//! |-------|---------------------|-------------------------------------------------|
//! | load  | Default / Streaming | probe, fill on miss (streaming lines evict first) |
//! | load  | NonTemporalBypass   | skip L2, probe LLC, never fill                  |
//! | store | Default / Streaming | write-allocate (fetch on miss), mark dirty      |
//! | store | NonTemporalBypass   | invalidate L2/LLC copies, write line to HBM     |

mod cache;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheLevel, Evicted, LineState};

use crate::machine::MachineConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("xcd {xcd} out of range (machine has {num_xcds})")]
    XcdOutOfRange { xcd: usize, num_xcds: usize },
    #[error("address {addr:#x} not aligned to element size {elem_bytes}")]
    Misaligned { addr: u64, elem_bytes: u32 },
    #[error("access at {addr:#x} of {bytes} bytes crosses a {line_bytes}-byte line")]
    CrossesLine { addr: u64, bytes: u32, line_bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessModifier {
    Default,
    /// Allocates in L2 but is the first candidate for eviction.
    Streaming,
    /// Never allocates in L2.
    NonTemporalBypass,
}

/// What the bytes are, for per-role accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Activation,
    Output,
    Sync,
    Other,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Weight,
        Role::Activation,
        Role::Output,
        Role::Sync,
        Role::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    L2Hit,
    LlcHit,
    Hbm,
}

/// One memory request. `addr..addr + bytes` must lie within a single line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub addr: u64,
    pub bytes: u32,
    pub kind: AccessKind,
    pub modifier: AccessModifier,
    pub role: Role,
    pub elem_bytes: u32,
}

impl Access {
    pub fn load(addr: u64, modifier: AccessModifier) -> Self {
        Self {
            addr,
            bytes: 1,
            kind: AccessKind::Load,
            modifier,
            role: Role::Other,
            elem_bytes: 1,
        }
    }

    pub fn store(addr: u64, modifier: AccessModifier) -> Self {
        Self {
            kind: AccessKind::Store,
            ..Self::load(addr, modifier)
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LlcFill {
    /// Lines enter the LLC only when evicted from an L2.
    #[default]
    VictimOnly,
    /// Lines also enter the LLC when an L2 miss is filled from HBM.
    OnFill,
}

/// Where an L2 writeback fence sends dirty lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WritebackTarget {
    #[default]
    Llc,
    Hbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemConfig {
    pub num_xcds: usize,
    pub l2_capacity_bytes: u64,
    pub line_bytes: u64,
    /// Zero disables the LLC.
    pub llc_capacity_bytes: u64,
    pub llc_fill: LlcFill,
    pub writeback: WritebackTarget,
}

impl MemConfig {
    pub fn from_machine(machine: &MachineConfig) -> Self {
        Self {
            num_xcds: machine.num_xcds as usize,
            l2_capacity_bytes: machine.l2_capacity_bytes,
            line_bytes: machine.l2_line_bytes,
            llc_capacity_bytes: machine.llc_capacity_bytes,
            llc_fill: LlcFill::default(),
            writeback: WritebackTarget::default(),
        }
    }

    pub fn without_llc(mut self) -> Self {
        self.llc_capacity_bytes = 0;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitMiss {
    pub hits: u64,
    pub misses: u64,
}

impl HitMiss {
    pub fn total(&self) -> u64 {
        self.hits + self.misses
    }

    /// Hit fraction, defined as 0 when there were no accesses.
    pub fn rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.hits as f64 / self.total() as f64
        }
    }

    fn add(&mut self, other: &HitMiss) {
        self.hits += other.hits;
        self.misses += other.misses;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounters {
    pub l2: HitMiss,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
}

#[derive(Debug, Clone, Default)]
struct Counters {
    l2: Vec<HitMiss>,
    llc: HitMiss,
    hbm_read_bytes: u64,
    hbm_write_bytes: u64,
    writeback_bytes: u64,
    roles: [RoleCounters; 5],
}

/// Immutable counter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemMetrics {
    pub line_bytes: u64,
    pub l2_per_xcd: Vec<HitMiss>,
    pub l2: HitMiss,
    pub llc: HitMiss,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    /// Bytes written back by L2 fences (to whichever target was configured).
    pub writeback_bytes: u64,
    pub weight: RoleCounters,
    pub activation: RoleCounters,
    pub output: RoleCounters,
    pub sync: RoleCounters,
    pub other: RoleCounters,
}

impl MemMetrics {
    pub fn l2_hit_rate(&self) -> f64 {
        self.l2.rate()
    }

    pub fn l2_hit_rate_xcd(&self, xcd: usize) -> f64 {
        self.l2_per_xcd[xcd].rate()
    }

    pub fn role(&self, role: Role) -> &RoleCounters {
        match role {
            Role::Weight => &self.weight,
            Role::Activation => &self.activation,
            Role::Output => &self.output,
            Role::Sync => &self.sync,
            Role::Other => &self.other,
        }
    }
}

/// The simulated hierarchy. Single-threaded; run one per simulation.
#[derive(Debug, Clone)]
pub struct MemHierarchy {
    config: MemConfig,
    l2: Vec<CacheLevel>,
    llc: Option<CacheLevel>,
    counters: Counters,
}

impl MemHierarchy {
    pub fn new(config: MemConfig) -> Self {
        let l2 = (0..config.num_xcds)
            .map(|_| CacheLevel::new(config.l2_capacity_bytes, config.line_bytes))
            .collect();
        let llc = (config.llc_capacity_bytes > 0)
            .then(|| CacheLevel::new(config.llc_capacity_bytes, config.line_bytes));
        let counters = Counters {
            l2: vec![HitMiss::default(); config.num_xcds],
            ..Counters::default()
        };
        Self {
            config,
            l2,
            llc,
            counters,
        }
    }

    pub fn for_machine(machine: &MachineConfig) -> Self {
        Self::new(MemConfig::from_machine(machine))
    }

    pub fn config(&self) -> &MemConfig {
        &self.config
    }

    pub fn line_bytes(&self) -> u64 {
        self.config.line_bytes
    }

    pub fn l2(&self, xcd: usize) -> &CacheLevel {
        &self.l2[xcd]
    }

    pub fn llc(&self) -> Option<&CacheLevel> {
        self.llc.as_ref()
    }

    /// Total HBM traffic so far, reads plus writes.
    pub fn hbm_bytes(&self) -> u64 {
        self.counters.hbm_read_bytes + self.counters.hbm_write_bytes
    }

    /// Shorthand for a role-less, byte-sized access.
    pub fn access_simple(
        &mut self,
        xcd: usize,
        addr: u64,
        kind: AccessKind,
        modifier: AccessModifier,
    ) -> Result<Outcome, MemError> {
        let access = match kind {
            AccessKind::Load => Access::load(addr, modifier),
            AccessKind::Store => Access::store(addr, modifier),
        };
        self.access(xcd, &access)
    }

    pub fn access(&mut self, xcd: usize, a: &Access) -> Result<Outcome, MemError> {
        if xcd >= self.config.num_xcds {
            return Err(MemError::XcdOutOfRange {
                xcd,
                num_xcds: self.config.num_xcds,
            });
        }
        if a.elem_bytes == 0 || !a.addr.is_multiple_of(u64::from(a.elem_bytes)) {
            return Err(MemError::Misaligned {
                addr: a.addr,
                elem_bytes: a.elem_bytes,
            });
        }
        let line = self.config.line_bytes;
        let tag = a.addr / line;
        if a.bytes == 0 || (a.addr + u64::from(a.bytes) - 1) / line != tag {
            return Err(MemError::CrossesLine {
                addr: a.addr,
                bytes: a.bytes,
                line_bytes: line,
            });
        }
        let role = a.role.index();
        let outcome = match (a.kind, a.modifier) {
            (AccessKind::Store, AccessModifier::NonTemporalBypass) => {
                self.l2[xcd].remove(tag);
                if let Some(llc) = self.llc.as_mut() {
                    llc.remove(tag);
                }
                self.counters.hbm_write_bytes += line;
                self.counters.roles[role].hbm_write_bytes += line;
                Outcome::Hbm
            }
            (AccessKind::Load, AccessModifier::NonTemporalBypass) => self.fetch_below_l2(tag, role, false),
            (kind, modifier) => {
                let streaming = modifier == AccessModifier::Streaming;
                let dirty = kind == AccessKind::Store;
                if self.l2[xcd].touch(tag, streaming) {
                    if dirty {
                        self.l2[xcd].set_dirty(tag, true);
                    }
                    self.counters.l2[xcd].hits += 1;
                    self.counters.roles[role].l2.hits += 1;
                    Outcome::L2Hit
                } else {
                    self.counters.l2[xcd].misses += 1;
                    self.counters.roles[role].l2.misses += 1;
                    let outcome = self.fetch_below_l2(tag, role, true);
                    if let Some(victim) = self.l2[xcd].insert(tag, LineState { streaming, dirty }) {
                        self.spill_from_l2(victim);
                    }
                    outcome
                }
            }
        };
        Ok(outcome)
    }

    fn fetch_below_l2(&mut self, tag: u64, role: usize, may_fill: bool) -> Outcome {
        let line = self.config.line_bytes;
        if let Some(llc) = self.llc.as_mut() {
            if llc.touch(tag, false) {
                self.counters.llc.hits += 1;
                return Outcome::LlcHit;
            }
        }
        self.counters.llc.misses += 1;
        self.counters.hbm_read_bytes += line;
        self.counters.roles[role].hbm_read_bytes += line;
        if may_fill && self.config.llc_fill == LlcFill::OnFill {
            self.insert_llc(tag, false);
        }
        Outcome::Hbm
    }

    fn spill_from_l2(&mut self, victim: Evicted) {
        if self.llc.is_some() {
            self.insert_llc(victim.tag, victim.dirty);
        } else if victim.dirty {
            self.counters.hbm_write_bytes += self.config.line_bytes;
        }
    }

    fn insert_llc(&mut self, tag: u64, dirty: bool) {
        let line = self.config.line_bytes;
        if let Some(llc) = self.llc.as_mut() {
            if let Some(ev) = llc.insert(tag, LineState { streaming: false, dirty }) {
                if ev.dirty {
                    self.counters.hbm_write_bytes += line;
                }
            }
        }
    }

    /// Writes back every dirty line of one XCD's L2. Lines stay resident and
    /// clean. Returns the bytes written back.
    pub fn flush_l2(&mut self, xcd: usize) -> Result<u64, MemError> {
        if xcd >= self.config.num_xcds {
            return Err(MemError::XcdOutOfRange {
                xcd,
                num_xcds: self.config.num_xcds,
            });
        }
        let line = self.config.line_bytes;
        let dirty = self.l2[xcd].dirty_tags();
        for &tag in &dirty {
            self.l2[xcd].set_dirty(tag, false);
            match (self.config.writeback, self.llc.is_some()) {
                (WritebackTarget::Llc, true) => self.insert_llc(tag, true),
                _ => self.counters.hbm_write_bytes += line,
            }
        }
        let bytes = dirty.len() as u64 * line;
        self.counters.writeback_bytes += bytes;
        Ok(bytes)
    }

    pub fn snapshot_metrics(&self) -> MemMetrics {
        let mut l2 = HitMiss::default();
        for x in &self.counters.l2 {
            l2.add(x);
        }
        let r = &self.counters.roles;
        MemMetrics {
            line_bytes: self.config.line_bytes,
            l2_per_xcd: self.counters.l2.clone(),
            l2,
            llc: self.counters.llc,
            hbm_read_bytes: self.counters.hbm_read_bytes,
            hbm_write_bytes: self.counters.hbm_write_bytes,
            writeback_bytes: self.counters.writeback_bytes,
            weight: r[Role::Weight.index()],
            activation: r[Role::Activation.index()],
            output: r[Role::Output.index()],
            sync: r[Role::Sync.index()],
            other: r[Role::Other.index()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AccessKind::*;
    use AccessModifier::*;

    fn tiny(l2_lines: u64, llc_lines: u64, fill: LlcFill) -> MemHierarchy {
        MemHierarchy::new(MemConfig {
            num_xcds: 2,
            l2_capacity_bytes: l2_lines * 128,
            line_bytes: 128,
            llc_capacity_bytes: llc_lines * 128,
            llc_fill: fill,
            writeback: WritebackTarget::Llc,
        })
    }

    #[test]
    fn second_load_hits_l2() {
        let mut h = tiny(4, 8, LlcFill::VictimOnly);
        assert_eq!(h.access_simple(0, 0x1000, Load, Default), Ok(Outcome::Hbm));
        assert_eq!(h.access_simple(0, 0x1000, Load, Default), Ok(Outcome::L2Hit));
    }

    #[test]
    fn on_fill_llc_serves_peer_xcd() {
        // 2-line L2s, on-fill LLC: XCD1 finds the line XCD0 brought in.
        let mut h = tiny(2, 8, LlcFill::OnFill);
        let a = h.access_simple(0, 0x80, Load, Default).unwrap();
        let b = h.access_simple(1, 0x80, Load, Default).unwrap();
        assert_eq!((a, b), (Outcome::Hbm, Outcome::LlcHit));
        let m = h.snapshot_metrics();
        assert_eq!(m.l2_per_xcd[0].misses, 1);
        assert_eq!(m.l2_per_xcd[1].misses, 1);
    }

    #[test]
    fn victim_only_llc_does_not_serve_unevicted_line() {
        let mut h = tiny(2, 8, LlcFill::VictimOnly);
        let a = h.access_simple(0, 0x80, Load, Default).unwrap();
        let b = h.access_simple(1, 0x80, Load, Default).unwrap();
        assert_eq!((a, b), (Outcome::Hbm, Outcome::Hbm));
    }

    #[test]
    fn victim_lands_in_llc() {
        let mut h = tiny(1, 8, LlcFill::VictimOnly);
        h.access_simple(0, 0, Load, Default).unwrap();
        h.access_simple(0, 128, Load, Default).unwrap();
        assert_eq!(h.access_simple(0, 0, Load, Default), Ok(Outcome::LlcHit));
    }

    #[test]
    fn streaming_line_evicted_before_default() {
        let mut h = tiny(2, 0, LlcFill::VictimOnly);
        h.access_simple(0, 0, Load, Streaming).unwrap(); // A
        h.access_simple(0, 128, Load, Default).unwrap(); // B
        h.access_simple(0, 256, Load, Default).unwrap(); // C
        assert!(!h.l2(0).contains(0));
        assert!(h.l2(0).contains(1));
        assert!(h.l2(0).contains(2));
    }

    #[test]
    fn nt_store_bypasses_and_invalidates() {
        let mut h = tiny(4, 8, LlcFill::VictimOnly);
        h.access_simple(0, 0, Load, Default).unwrap();
        assert_eq!(h.access_simple(0, 4, Store, NonTemporalBypass), Ok(Outcome::Hbm));
        assert!(!h.l2(0).contains(0));
        let m = h.snapshot_metrics();
        assert_eq!(m.hbm_write_bytes, 128);
        assert_eq!(m.l2.total(), 1, "NT store is not L2-visible");
    }

    #[test]
    fn dirty_eviction_writes_back_through_llc() {
        let mut h = tiny(1, 1, LlcFill::VictimOnly);
        h.access_simple(0, 0, Store, Default).unwrap();
        assert_eq!(h.snapshot_metrics().hbm_write_bytes, 0);
        h.access_simple(0, 128, Load, Default).unwrap(); // dirty line 0 -> LLC
        h.access_simple(0, 256, Load, Default).unwrap(); // line 1 -> LLC, pushes dirty 0 to HBM
        assert_eq!(h.snapshot_metrics().hbm_write_bytes, 128);
    }

    #[test]
    fn dirty_eviction_without_llc_goes_to_hbm() {
        let mut h = tiny(1, 0, LlcFill::VictimOnly);
        h.access_simple(0, 0, Store, Default).unwrap();
        h.access_simple(0, 128, Load, Default).unwrap();
        assert_eq!(h.snapshot_metrics().hbm_write_bytes, 128);
    }

    #[test]
    fn flush_counts_dirty_lines() {
        let mut h = tiny(8, 16, LlcFill::VictimOnly);
        assert_eq!(h.flush_l2(0), Ok(0));
        for i in 0..3 {
            h.access_simple(0, i * 128, Store, Default).unwrap();
        }
        h.access_simple(0, 3 * 128, Load, Default).unwrap();
        let before = h.snapshot_metrics();
        assert_eq!(h.flush_l2(0), Ok(384));
        assert_eq!(h.flush_l2(0), Ok(0));
        let after = h.snapshot_metrics();
        assert_eq!(before.l2, after.l2);
        assert_eq!(h.l2(0).len(), 4, "lines stay resident after flush");
        assert!(h.l2(0).dirty_tags().is_empty());
    }

    #[test]
    fn flush_to_hbm_target() {
        let mut h = tiny(8, 16, LlcFill::VictimOnly);
        h.config.writeback = WritebackTarget::Hbm;
        h.access_simple(1, 0, Store, Default).unwrap();
        assert_eq!(h.flush_l2(1), Ok(128));
        assert_eq!(h.snapshot_metrics().hbm_write_bytes, 128);
    }

    #[test]
    fn misaligned_access_rejected() {
        let mut h = tiny(4, 0, LlcFill::VictimOnly);
        let a = Access {
            elem_bytes: 2,
            ..Access::load(3, Default)
        };
        assert!(matches!(h.access(0, &a), Err(MemError::Misaligned { .. })));
    }

    #[test]
    fn line_crossing_rejected() {
        let mut h = tiny(4, 0, LlcFill::VictimOnly);
        let a = Access {
            bytes: 8,
            ..Access::load(124, Default)
        };
        assert!(matches!(h.access(0, &a), Err(MemError::CrossesLine { .. })));
    }

    #[test]
    fn xcd_out_of_range() {
        let mut h = tiny(4, 0, LlcFill::VictimOnly);
        assert!(h.access_simple(2, 0, Load, Default).is_err());
        assert!(h.flush_l2(5).is_err());
    }

    #[test]
    fn fresh_metrics_are_zero() {
        let h = tiny(4, 4, LlcFill::VictimOnly);
        let m = h.snapshot_metrics();
        assert_eq!(m.l2.total(), 0);
        assert_eq!(m.l2_hit_rate(), 0.0);
        assert_eq!(m.hbm_read_bytes, 0);
    }

    #[test]
    fn distinct_loads_all_miss_then_replay_hits() {
        let mut h = tiny(64, 0, LlcFill::VictimOnly);
        for i in 0..40 {
            h.access_simple(0, i * 128, Load, Default).unwrap();
        }
        assert_eq!(h.snapshot_metrics().l2.misses, 40);
        for i in 0..40 {
            h.access_simple(0, i * 128, Load, Default).unwrap();
        }
        let m = h.snapshot_metrics();
        assert_eq!(m.l2.hits, 40);
        assert_eq!(m.hbm_read_bytes, m.llc.misses * 128);
    }

    #[test]
    fn role_counters_split_traffic() {
        let mut h = tiny(4, 0, LlcFill::VictimOnly);
        let w = Access::load(0, Streaming).with_role(Role::Weight);
        h.access(0, &w).unwrap();
        h.access(0, &w).unwrap();
        let a = Access::load(128, Default).with_role(Role::Activation);
        h.access(0, &a).unwrap();
        let m = h.snapshot_metrics();
        assert_eq!(m.weight.l2, HitMiss { hits: 1, misses: 1 });
        assert_eq!(m.weight.hbm_read_bytes, 128);
        assert_eq!(m.activation.l2, HitMiss { hits: 0, misses: 1 });
    }
}
