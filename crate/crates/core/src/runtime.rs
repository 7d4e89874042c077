//! Persistent-kernel runtime: per-XCD schedulers, worker queues, and the
//! two-level completion protocol.
//!
//! Time advances in steps. In every step each scheduler first polls the
//! global event counters (if it has blocked tasks) and dispatches whatever
//! became ready, then every busy worker performs one unit of work: one K-chunk
//! of one GEMM tile, or the whole of an elementwise task. XCDs are visited in
//! index order and workers in index order inside an XCD, so a run is fully
//! deterministic.
//!
//! CU- and wavefront-tasks complete with one GPU-scope atomic each. A
//! Chiplet-task is broadcast to the workers of its XCD; each worker bumps an
//! XCD-local counter (an L2 access, no fence) and the worker whose bump
//! reaches the share count flushes the L2 once and issues the single global
//! atomic for the XCD.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{MachineConfig, ModelConfig};
use crate::memsim::{Access, AccessKind, AccessModifier, MemError, MemHierarchy, MemMetrics, Outcome, Role};
use crate::taskgraph::{BuildMode, EventId, GraphError, TaskGraph, TaskId, TaskLevel, Work};
use crate::traversal::{push_segment, schedule_windowed, Distribution, ScheduleError, TileCoord, Traversal};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid task graph: {0}")]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("hierarchy has {found} XCDs but the machine has {expected}")]
    HierarchyMismatch { found: usize, expected: usize },
    #[error("graph was built for {graph} XCDs x {graph_workers} workers, machine has {machine} x {machine_workers}")]
    MachineMismatch {
        graph: u32,
        graph_workers: u32,
        machine: u32,
        machine_workers: u32,
    },
    #[error("device-level tasks are not supported by the runtime (task {0})")]
    DeviceTask(TaskId),
    #[error("deadlock at step {step}: events {events:?} can never fire")]
    Deadlock { step: u64, events: Vec<EventId> },
    #[error("traces are for different configurations: {0}")]
    Mismatch(&'static str),
    #[error("writing access trace: {0}")]
    Trace(#[from] std::io::Error),
}

/// The execution modes compared throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    ChipletMTile,
    ChipletMSplit,
    ChipletNMajor,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Standard,
        Mode::ChipletMTile,
        Mode::ChipletMSplit,
        Mode::ChipletNMajor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::ChipletMTile => "chiplet_m_tile",
            Mode::ChipletMSplit => "chiplet_m_split",
            Mode::ChipletNMajor => "chiplet_n_major",
        }
    }

    pub fn build_mode(self) -> BuildMode {
        match self {
            Mode::Standard => BuildMode::Standard,
            _ => BuildMode::Chiplet,
        }
    }

    /// Default simulation options for this mode.
    pub fn options(self) -> SimOptions {
        let (traversal, distribution) = match self {
            Mode::Standard | Mode::ChipletMTile => (Traversal::MMajorWindowed, Distribution::MTile),
            Mode::ChipletMSplit => (Traversal::MMajorWindowed, Distribution::MSplit),
            Mode::ChipletNMajor => (Traversal::NMajor, Distribution::MTile),
        };
        SimOptions {
            mode: self,
            traversal,
            distribution,
            ..SimOptions::default()
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected standard, chiplet_m_tile, chiplet_m_split or chiplet_n_major)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub mode: Mode,
    pub traversal: Traversal,
    pub distribution: Distribution,
    /// N-tiles per column group for the windowed traversal.
    pub window: u32,
    /// Seconds charged per dispatched task.
    pub dispatch_overhead_s: f64,
    /// Seconds charged per dirty line written back by a fence.
    pub fence_cost_per_line_s: f64,
    /// Run graph validation before simulating.
    pub validate: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mode: Mode::ChipletMTile,
            traversal: Traversal::MMajorWindowed,
            distribution: Distribution::MTile,
            window: 1,
            dispatch_overhead_s: 0.0,
            fence_cost_per_line_s: 0.0,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncCounters {
    /// `local[x][e]`: worker completions counted on XCD `x` for event `e`.
    pub local: Vec<BTreeMap<EventId, u32>>,
    /// `global[e]`: completions counted for event `e` at GPU scope.
    pub global: BTreeMap<EventId, u32>,
    pub fences_issued: u64,
    pub fence_lines: u64,
    pub global_atomics: u64,
    pub local_atomics: u64,
    pub poll_count: u64,
    /// Uncached HBM bytes read by event polls.
    pub sync_read_bytes: u64,
    /// Uncached HBM bytes written by GPU-scope atomics.
    pub sync_write_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Actor {
    Scheduler { xcd: u32 },
    Worker { xcd: u32, worker: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Action {
    /// Scheduler hands a task to its workers.
    Dispatch { task: TaskId },
    /// A worker performs the first access of its part of a task.
    Start { task: TaskId },
    /// A worker finishes its share of a Chiplet-task.
    ShareDone { task: TaskId },
    Fence { task: TaskId, lines: u64 },
    Complete { task: TaskId },
    Fire { event: EventId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub actor: Actor,
    pub action: Action,
}

/// Configuration echoed into every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMeta {
    pub mode: Mode,
    pub batch: u64,
    pub num_xcds: u32,
    pub workers_per_xcd: u32,
    pub model: Option<ModelConfig>,
    pub options: SimOptions,
    pub llc_fill: crate::memsim::LlcFill,
    pub writeback: crate::memsim::WritebackTarget,
    pub polling: String,
    pub queue_depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: u32,
    pub label: String,
    pub hbm_bytes: u64,
    pub flops: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub schema_version: u32,
    pub meta: SimMeta,
    pub steps: u64,
    pub dispatches: u64,
    pub log: Vec<LogEntry>,
    pub memory: MemMetrics,
    pub sync: SyncCounters,
    pub stages: Vec<StageCost>,
    pub estimated_time_s: f64,
}

impl SimTrace {
    /// HBM reads including uncached event polls.
    pub fn hbm_read_bytes(&self) -> u64 {
        self.memory.hbm_read_bytes + self.sync.sync_read_bytes
    }

    /// HBM writes including GPU-scope atomics.
    pub fn hbm_write_bytes(&self) -> u64 {
        self.memory.hbm_write_bytes + self.sync.sync_write_bytes
    }

    pub fn l2_hit_rate(&self) -> f64 {
        self.memory.l2_hit_rate()
    }

    pub fn weight_l2_hit_rate(&self) -> f64 {
        self.memory.weight.l2.rate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// One access record of the optional JSONL trace.
#[derive(Serialize)]
struct TraceRecord {
    step: u64,
    xcd: u32,
    worker: u32,
    addr: u64,
    kind: AccessKind,
    modifier: AccessModifier,
    outcome: Outcome,
}

enum JobWork {
    Tiles { gemm: usize, tiles: Vec<TileCoord> },
    Stream,
}

struct Job {
    task: TaskId,
    share: bool,
    work: JobWork,
}

struct Active {
    job: Job,
    pos: usize,
    chunk: u32,
}

/// Reserved address space for queues and local counters, far above any
/// buffer the graph builders allocate.
const SYNC_BASE: u64 = 1 << 56;

struct Sim<'a> {
    g: &'a TaskGraph,
    mem: MemHierarchy,
    opts: &'a SimOptions,
    xcds: usize,
    workers: usize,
    line: u64,
    step: u64,
    log: Vec<LogEntry>,
    sync: SyncCounters,
    dispatches: u64,
    home: Vec<u32>,
    blocked: Vec<VecDeque<TaskId>>,
    ready: Vec<VecDeque<TaskId>>,
    rr: Vec<usize>,
    queues: Vec<Vec<VecDeque<Job>>>,
    active: Vec<Vec<Option<Active>>>,
    shares_left: Vec<u32>,
    fired: Vec<bool>,
    done: Vec<bool>,
    remaining: usize,
    stage_bytes: Vec<u64>,
    buf: Vec<Access>,
    trace: Option<&'a mut dyn Write>,
}

impl<'a> Sim<'a> {
    fn sync_line(&self, slot: u64) -> u64 {
        SYNC_BASE + slot * self.line
    }

    fn queue_addr(&self, x: usize, w: usize) -> u64 {
        self.sync_line((x * self.workers + w) as u64)
    }

    fn counter_addr(&self, task: TaskId) -> u64 {
        self.sync_line((self.xcds * self.workers) as u64 + u64::from(task.0))
    }

    fn sync_access(&mut self, x: usize, addr: u64, stage: u32) -> Result<(), SimError> {
        let before = self.mem.hbm_bytes();
        let a = Access::store(addr, AccessModifier::Default).with_role(Role::Sync);
        self.mem.access(x, &a)?;
        self.stage_bytes[stage as usize] += self.mem.hbm_bytes() - before;
        Ok(())
    }

    fn push_log(&mut self, actor: Actor, action: Action) {
        self.log.push(LogEntry {
            step: self.step,
            actor,
            action,
        });
    }

    fn waits_satisfied(&self, t: TaskId) -> bool {
        self.g.task(t).wait_events.iter().all(|e| self.fired[e.0 as usize])
    }

    fn scheduler_phase(&mut self, x: usize) -> Result<bool, SimError> {
        let mut progressed = false;
        if let Some(&front) = self.blocked[x].front() {
            self.sync.poll_count += 1;
            self.sync.sync_read_bytes += self.line;
            self.stage_bytes[self.g.task(front).stage as usize] += self.line;
            // tasks become ready in graph order
            let mut still = VecDeque::with_capacity(self.blocked[x].len());
            while let Some(t) = self.blocked[x].pop_front() {
                if self.waits_satisfied(t) {
                    self.ready[x].push_back(t);
                } else {
                    still.push_back(t);
                }
            }
            self.blocked[x] = still;
        }
        while let Some(t) = self.ready[x].pop_front() {
            progressed = true;
            self.dispatch(x, t)?;
        }
        Ok(progressed)
    }

    fn dispatch(&mut self, x: usize, t: TaskId) -> Result<(), SimError> {
        let task = self.g.task(t);
        self.dispatches += 1;
        self.push_log(Actor::Scheduler { xcd: x as u32 }, Action::Dispatch { task: t });
        match (task.level, &task.work) {
            (TaskLevel::Chiplet, Work::GemmShare { gemm }) => {
                let p = &self.g.gemms[*gemm];
                let s = schedule_windowed(
                    p,
                    self.workers,
                    self.opts.traversal,
                    self.opts.distribution,
                    x,
                    p.num_xcds,
                    self.opts.window,
                )?;
                let mut participants: Vec<(usize, Vec<TileCoord>)> = s
                    .workers
                    .into_iter()
                    .enumerate()
                    .filter(|(_, tiles)| !tiles.is_empty())
                    .collect();
                if participants.is_empty() {
                    // an empty share still completes through one worker so
                    // the XCD signals the event
                    participants.push((0, Vec::new()));
                }
                self.shares_left[t.0 as usize] = participants.len() as u32;
                for (w, tiles) in participants {
                    self.enqueue(x, w, t, true, JobWork::Tiles { gemm: *gemm, tiles })?;
                }
            }
            (TaskLevel::Chiplet, Work::GemmTile { gemm, tile }) => {
                self.shares_left[t.0 as usize] = 1;
                let w = self.next_worker(x);
                self.enqueue(x, w, t, true, JobWork::Tiles { gemm: *gemm, tiles: vec![*tile] })?;
            }
            (TaskLevel::Chiplet, Work::Stream { .. }) => {
                self.shares_left[t.0 as usize] = 1;
                let w = self.next_worker(x);
                self.enqueue(x, w, t, true, JobWork::Stream)?;
            }
            (TaskLevel::Device, _) => return Err(SimError::DeviceTask(t)),
            (_, work) => {
                let jw = match work {
                    Work::GemmTile { gemm, tile } => JobWork::Tiles {
                        gemm: *gemm,
                        tiles: vec![*tile],
                    },
                    Work::GemmShare { gemm } => {
                        let p = &self.g.gemms[*gemm];
                        let all = (0..p.m_tiles())
                            .flat_map(|m| (0..p.n_tiles_total()).map(move |n| TileCoord::new(m, n)))
                            .collect();
                        JobWork::Tiles { gemm: *gemm, tiles: all }
                    }
                    Work::Stream { .. } => JobWork::Stream,
                };
                let w = self.next_worker(x);
                self.enqueue(x, w, t, false, jw)?;
            }
        }
        Ok(())
    }

    fn next_worker(&mut self, x: usize) -> usize {
        let w = self.rr[x];
        self.rr[x] = (w + 1) % self.workers;
        w
    }

    fn enqueue(&mut self, x: usize, w: usize, task: TaskId, share: bool, work: JobWork) -> Result<(), SimError> {
        let stage = self.g.task(task).stage;
        self.sync_access(x, self.queue_addr(x, w), stage)?;
        self.queues[x][w].push_back(Job { task, share, work });
        Ok(())
    }

    fn worker_phase(&mut self, x: usize, w: usize) -> Result<bool, SimError> {
        if self.active[x][w].is_none() {
            let Some(job) = self.queues[x][w].pop_front() else {
                return Ok(false);
            };
            self.push_log(
                Actor::Worker {
                    xcd: x as u32,
                    worker: w as u32,
                },
                Action::Start { task: job.task },
            );
            self.active[x][w] = Some(Active { job, pos: 0, chunk: 0 });
        }
        let mut act = self.active[x][w].take().expect("worker has a job");
        let stage = self.g.task(act.job.task).stage;
        self.buf.clear();
        let finished = match &act.job.work {
            JobWork::Tiles { gemm, tiles } => {
                if tiles.is_empty() {
                    true
                } else {
                    let p = &self.g.gemms[*gemm];
                    p.emit_chunk(tiles[act.pos], act.chunk, self.line, &mut self.buf)?;
                    act.chunk += 1;
                    if act.chunk == p.k_chunks() {
                        act.chunk = 0;
                        act.pos += 1;
                    }
                    act.pos == tiles.len()
                }
            }
            JobWork::Stream => {
                if let Work::Stream { regions, .. } = &self.g.task(act.job.task).work {
                    for r in regions {
                        for row in 0..r.rows {
                            push_segment(&mut self.buf, r.base + row * r.row_stride, r.row_bytes, self.line, |a, b| Access {
                                addr: a,
                                bytes: b,
                                kind: r.kind,
                                modifier: r.modifier,
                                role: r.role,
                                elem_bytes: 1,
                            });
                        }
                    }
                }
                true
            }
        };
        let before = self.mem.hbm_bytes();
        for i in 0..self.buf.len() {
            let a = self.buf[i];
            let outcome = self.mem.access(x, &a)?;
            if let Some(out) = self.trace.as_mut() {
                let rec = TraceRecord {
                    step: self.step,
                    xcd: x as u32,
                    worker: w as u32,
                    addr: a.addr,
                    kind: a.kind,
                    modifier: a.modifier,
                    outcome,
                };
                serde_json::to_writer(&mut **out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        self.stage_bytes[stage as usize] += self.mem.hbm_bytes() - before;
        if finished {
            self.complete(x, w, act.job)?;
        } else {
            self.active[x][w] = Some(act);
        }
        Ok(true)
    }

    fn complete(&mut self, x: usize, w: usize, job: Job) -> Result<(), SimError> {
        let t = job.task;
        let task = self.g.task(t);
        let stage = task.stage;
        let actor = Actor::Worker {
            xcd: x as u32,
            worker: w as u32,
        };
        if job.share {
            self.sync.local_atomics += 1;
            self.sync_access(x, self.counter_addr(t), stage)?;
            if let Some(e) = task.signal_event {
                *self.sync.local[x].entry(e).or_default() += 1;
            }
            self.push_log(actor, Action::ShareDone { task: t });
            let left = &mut self.shares_left[t.0 as usize];
            *left -= 1;
            if *left > 0 {
                return Ok(());
            }
            let before = self.mem.hbm_bytes();
            let bytes = self.mem.flush_l2(x)?;
            self.stage_bytes[stage as usize] += self.mem.hbm_bytes() - before;
            let lines = bytes / self.line;
            self.sync.fences_issued += 1;
            self.sync.fence_lines += lines;
            self.push_log(actor, Action::Fence { task: t, lines });
        }
        self.sync.global_atomics += 1;
        self.sync.sync_write_bytes += self.line;
        self.stage_bytes[stage as usize] += self.line;
        self.done[t.0 as usize] = true;
        self.remaining -= 1;
        self.push_log(actor, Action::Complete { task: t });
        if let Some(e) = task.signal_event {
            let count = self.sync.global.entry(e).or_default();
            *count += 1;
            let event = &self.g.events[e.0 as usize];
            if *count == event.required_count && !self.fired[e.0 as usize] {
                self.fired[e.0 as usize] = true;
                self.push_log(actor, Action::Fire { event: e });
            }
        }
        Ok(())
    }

    fn stuck_events(&self) -> Vec<EventId> {
        let mut out: Vec<EventId> = self
            .g
            .tasks
            .iter()
            .filter(|t| !self.done[t.id.0 as usize])
            .flat_map(|t| t.wait_events.iter().copied())
            .filter(|e| !self.fired.get(e.0 as usize).copied().unwrap_or(false))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Runs a graph to completion on `mem`.
pub fn simulate(
    g: &TaskGraph,
    machine: &MachineConfig,
    mem: MemHierarchy,
    opts: &SimOptions,
) -> Result<SimTrace, SimError> {
    simulate_traced(g, machine, mem, opts, None)
}

/// As [`simulate`], additionally writing one JSON line per memory access.
pub fn simulate_traced<'a>(
    g: &'a TaskGraph,
    machine: &MachineConfig,
    mem: MemHierarchy,
    opts: &'a SimOptions,
    trace: Option<&'a mut dyn Write>,
) -> Result<SimTrace, SimError> {
    if opts.validate {
        g.validate()?;
    }
    let xcds = machine.num_xcds as usize;
    let workers = machine.workers_per_xcd as usize;
    if mem.config().num_xcds != xcds {
        return Err(SimError::HierarchyMismatch {
            found: mem.config().num_xcds,
            expected: xcds,
        });
    }
    if !g.tasks.is_empty() && (g.meta.num_xcds != machine.num_xcds || g.meta.workers_per_xcd != machine.workers_per_xcd) {
        return Err(SimError::MachineMismatch {
            graph: g.meta.num_xcds,
            graph_workers: g.meta.workers_per_xcd,
            machine: machine.num_xcds,
            machine_workers: machine.workers_per_xcd,
        });
    }
    let line = mem.line_bytes();
    let meta = SimMeta {
        mode: opts.mode,
        batch: g.meta.batch,
        num_xcds: machine.num_xcds,
        workers_per_xcd: machine.workers_per_xcd,
        model: g.meta.model.clone(),
        options: opts.clone(),
        llc_fill: mem.config().llc_fill,
        writeback: mem.config().writeback,
        polling: "every step while tasks are blocked".into(),
        queue_depth: "unbounded".into(),
    };

    // CU and wavefront tasks go to XCDs round-robin in graph order
    let mut home = Vec::with_capacity(g.tasks.len());
    let mut next = 0u32;
    for t in &g.tasks {
        match t.xcd_binding {
            Some(x) if t.level == TaskLevel::Chiplet => home.push(x),
            _ => {
                home.push(next);
                next = (next + 1) % machine.num_xcds.max(1);
            }
        }
    }
    let mut sim = Sim {
        g,
        mem,
        opts,
        xcds,
        workers,
        line,
        step: 0,
        log: Vec::new(),
        sync: SyncCounters {
            local: vec![BTreeMap::new(); xcds],
            ..SyncCounters::default()
        },
        dispatches: 0,
        home,
        blocked: vec![VecDeque::new(); xcds],
        ready: vec![VecDeque::new(); xcds],
        rr: vec![0; xcds],
        queues: (0..xcds).map(|_| (0..workers).map(|_| VecDeque::new()).collect()).collect(),
        active: (0..xcds).map(|_| (0..workers).map(|_| None).collect()).collect(),
        shares_left: vec![0; g.tasks.len()],
        fired: vec![false; g.events.len()],
        done: vec![false; g.tasks.len()],
        remaining: g.tasks.len(),
        stage_bytes: vec![0; g.stages.len().max(1)],
        buf: Vec::new(),
        trace,
    };
    for t in &g.tasks {
        let x = sim.home[t.id.0 as usize] as usize;
        if t.wait_events.is_empty() {
            sim.ready[x].push_back(t.id);
        } else {
            sim.blocked[x].push_back(t.id);
        }
    }

    while sim.remaining > 0 {
        let mut progressed = false;
        for x in 0..xcds {
            progressed |= sim.scheduler_phase(x)?;
        }
        for x in 0..xcds {
            for w in 0..workers {
                progressed |= sim.worker_phase(x, w)?;
            }
        }
        if !progressed {
            // nothing ran; progress is only possible if an event fired this
            // step and a later poll will pick it up
            let pending = (0..xcds).any(|x| sim.blocked[x].iter().any(|&t| sim.waits_satisfied(t)));
            if !pending {
                return Err(SimError::Deadlock {
                    step: sim.step,
                    events: sim.stuck_events(),
                });
            }
        }
        sim.step += 1;
    }
    if let Some(out) = sim.trace.as_mut() {
        out.flush()?;
    }

    let (bw, peak) = (machine.hbm_bandwidth_bytes_per_s, machine.peak_flops);
    let stages: Vec<StageCost> = g
        .stages
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let first = g.task(TaskId(st.first_task));
            let flops = match &first.work {
                Work::GemmTile { gemm, .. } | Work::GemmShare { gemm } => {
                    let p = &g.gemms[*gemm];
                    2.0 * p.m as f64 * p.k as f64 * p.n as f64
                }
                Work::Stream { .. } => g.tasks[st.first_task as usize..(st.first_task + st.num_tasks) as usize]
                    .iter()
                    .map(|t| match &t.work {
                        Work::Stream { flops, .. } => *flops as f64,
                        _ => 0.0,
                    })
                    .sum(),
            };
            let hbm_bytes = sim.stage_bytes[i];
            StageCost {
                stage: i as u32,
                label: format!("L{} {}", st.layer, st.op_kind.label()),
                hbm_bytes,
                flops,
                time_s: (hbm_bytes as f64 / bw).max(flops / peak),
            }
        })
        .collect();
    let estimated_time_s = stages.iter().map(|s| s.time_s).sum::<f64>()
        + opts.dispatch_overhead_s * sim.dispatches as f64
        + opts.fence_cost_per_line_s * sim.sync.fence_lines as f64;

    Ok(SimTrace {
        schema_version: crate::SCHEMA_VERSION,
        meta,
        steps: sim.step,
        dispatches: sim.dispatches,
        log: sim.log,
        memory: sim.mem.snapshot_metrics(),
        sync: sim.sync,
        stages,
        estimated_time_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b / a`; 1.0 when both are zero.
    pub ratio: f64,
}

/// Side-by-side metrics of two runs, normalized to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub batch: u64,
    pub rows: Vec<ComparisonRow>,
    /// Weight-role L2 hit rate of `b`, for checking against the weight-hit model.
    pub weight_l2_hit_rate_b: Option<f64>,
}

impl ComparisonReport {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

pub fn compare(a: &SimTrace, b: &SimTrace) -> Result<ComparisonReport, SimError> {
    if a.meta.batch != b.meta.batch {
        return Err(SimError::Mismatch("batch"));
    }
    if a.meta.model != b.meta.model {
        return Err(SimError::Mismatch("model"));
    }
    if a.meta.num_xcds != b.meta.num_xcds || a.meta.workers_per_xcd != b.meta.workers_per_xcd {
        return Err(SimError::Mismatch("machine"));
    }
    let pairs = [
        ("l2_hit_rate", a.l2_hit_rate(), b.l2_hit_rate()),
        ("hbm_read_bytes", a.hbm_read_bytes() as f64, b.hbm_read_bytes() as f64),
        ("hbm_write_bytes", a.hbm_write_bytes() as f64, b.hbm_write_bytes() as f64),
        ("fences", a.sync.fences_issued as f64, b.sync.fences_issued as f64),
        ("global_atomics", a.sync.global_atomics as f64, b.sync.global_atomics as f64),
        ("local_atomics", a.sync.local_atomics as f64, b.sync.local_atomics as f64),
        ("dispatches", a.dispatches as f64, b.dispatches as f64),
        ("est_time_s", a.estimated_time_s, b.estimated_time_s),
    ];
    let rows = pairs
        .into_iter()
        .map(|(m, x, y)| ComparisonRow {
            metric: m.into(),
            a: x,
            b: y,
            ratio: if x == 0.0 && y == 0.0 { 1.0 } else { y / x },
        })
        .collect();
    let weight = b.memory.weight.l2;
    Ok(ComparisonReport {
        schema_version: crate::SCHEMA_VERSION,
        mode_a: a.meta.mode,
        mode_b: b.meta.mode,
        batch: a.meta.batch,
        rows,
        weight_l2_hit_rate_b: (weight.total() > 0).then(|| weight.rate()),
    })
}
