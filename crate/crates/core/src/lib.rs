//! Trace-driven simulation of persistent-megakernel execution on chiplet GPUs.
//!
//! A decoder layer is lowered to a graph of tasks ([`taskgraph`]), the tasks
//! are dispatched by per-XCD schedulers ([`runtime`]), and every GEMM tile is
//! expanded into line-granular loads and stores ([`traversal`]) that drive a
//! private-L2 / shared-LLC / HBM model ([`memsim`]). [`analytics`] holds the
//! closed-form models the simulator is checked against.

pub mod analytics;
pub mod machine;
pub mod memsim;
pub mod runtime;
pub mod scenario;
pub mod taskgraph;
pub mod traversal;

/// Version stamped into every JSON and CSV export.
pub const SCHEMA_VERSION: u32 = 1;

pub use machine::{ConfigError, MachineConfig, ModelConfig};
pub use memsim::{MemConfig, MemHierarchy, MemMetrics};
pub use taskgraph::{BuildMode, TaskGraph, TileProfile};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/machine.md")]
    mod machine {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/traversal.md")]
    mod traversal {}
    #[doc = include_str!("../../../book/src/taskgraph.md")]
    mod taskgraph {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    mod runtime {}
    #[doc = include_str!("../../../book/src/analytics.md")]
    mod analytics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
