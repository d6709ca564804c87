//! Trace-driven simulation of composed dynamic memory managers.
//!
//! A [`DmmSpec`] is expanded into a [`Dmm`]: one allocator per spec entry,
//! each with its own size classes, free lists and address arena. Replaying
//! a [`ProfilingReport`] against it yields [`Metrics`]. Execution time is
//! not measured but counted in abstract time units according to a
//! [`CostModel`].

mod classes;
mod heap;
mod spec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ProfilingReport, ReplayOp};

pub use classes::{expand as expand_classes, fibonacci_sizes, SizeClass};
pub use heap::{AllocatorUsage, Block, Dmm, HeapAudit};
pub use spec::{
    AllocationMechanism, AllocationPolicy, AllocatorClass, AllocatorSpec, DataStructureKind,
    DmmSpec,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid DMM spec: {0}")]
    InvalidSpec(String),
    #[error("allocator range ({lo}, {hi}] has no representable size class")]
    EmptyRange { lo: u64, hi: u64 },
    #[error("request of {requested} bytes exceeds the largest servable size {max}")]
    OversizedRequest { requested: u64, max: u64 },
    #[error("zero-byte request")]
    ZeroRequest,
    #[error("block at {address:#x} is not live")]
    DoubleFree { address: u64 },
    #[error("free of object {object} which is not live")]
    UnknownObject { object: usize },
}

/// Cost charged per simulated operation. Only the free-list loop costs are
/// fixed by the reference first-fit loop; the rest are tunable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Time units per free-list element inspected.
    pub inspect_time: u64,
    /// Memory accesses per free-list element inspected.
    pub inspect_accesses: u64,
    pub split: u64,
    pub coalesce: u64,
    pub system_request: u64,
    /// Fixed cost of every allocate/deallocate call.
    pub base_call: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            inspect_time: 1,
            inspect_accesses: 2,
            split: 1,
            coalesce: 1,
            system_request: 1,
            base_call: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub cost: CostModel,
    /// Page size carved by simple segregated storage.
    pub page_size: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { cost: CostModel::default(), page_size: 4096 }
    }
}

/// Simulation output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Metrics {
    pub time_units: u64,
    pub memory_accesses: u64,
    /// High-water mark of bytes requested from the simulated system.
    pub peak_bytes: u64,
    pub current_bytes: u64,
    pub n_allocs: u64,
    pub n_frees: u64,
    pub n_splits: u64,
    pub n_coalesces: u64,
    pub n_system_requests: u64,
}

/// Step-wise replay of a report against a DMM.
pub struct Replay<'r> {
    ops: &'r [ReplayOp],
    dmm: Dmm,
    blocks: Vec<Option<Block>>,
    next: usize,
}

impl<'r> Replay<'r> {
    pub fn new(report: &'r ProfilingReport, spec: &DmmSpec, config: &SimConfig) -> Result<Self, SimError> {
        let dmm = Dmm::build(spec, report.distinct_sizes(), *config)?;
        if report.max_size() > spec.max_request() {
            return Err(SimError::OversizedRequest {
                requested: report.max_size(),
                max: spec.max_request(),
            });
        }
        Ok(Self { ops: report.ops(), dmm, blocks: vec![None; report.objects()], next: 0 })
    }

    /// Applies the next event. Returns `None` once the trace is exhausted.
    pub fn step(&mut self) -> Option<Result<(), SimError>> {
        let op = *self.ops.get(self.next)?;
        self.next += 1;
        Some(self.apply(op))
    }

    fn apply(&mut self, op: ReplayOp) -> Result<(), SimError> {
        match op {
            ReplayOp::Alloc { object, size } => {
                let block = self.dmm.allocate(size)?;
                self.blocks[object] = Some(block);
            }
            ReplayOp::Free { object } => {
                let block = self
                    .blocks
                    .get_mut(object)
                    .and_then(Option::take)
                    .ok_or(SimError::UnknownObject { object })?;
                self.dmm.deallocate(&block)?;
            }
        }
        debug_assert!(self.dmm.is_conserved(), "heap conservation violated");
        Ok(())
    }

    /// Number of events applied so far.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn dmm(&self) -> &Dmm {
        &self.dmm
    }

    pub fn run(mut self) -> Result<Metrics, SimError> {
        while let Some(result) = self.step() {
            result?;
        }
        Ok(self.dmm.metrics())
    }
}

/// Replays `report` against `spec` with the default configuration.
pub fn simulate(report: &ProfilingReport, spec: &DmmSpec) -> Result<Metrics, SimError> {
    simulate_with(report, spec, &SimConfig::default())
}

pub fn simulate_with(
    report: &ProfilingReport,
    spec: &DmmSpec,
    config: &SimConfig,
) -> Result<Metrics, SimError> {
    Replay::new(report, spec, config)?.run()
}
