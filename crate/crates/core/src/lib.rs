//! Trace-driven simulation of composable dynamic memory managers (DMMs) and a
//! grammatical-evolution search over the DMM design space.
//!
//! The pipeline is:
//!
//! 1. [`trace`]: parse an allocation trace into a [`trace::ProfilingReport`].
//! 2. [`grammar`]: generate a BNF grammar specialised to the trace's block sizes
//!    and decode integer genomes into [`heap_sim::DmmSpec`]s.
//! 3. [`heap_sim`]: replay the trace against a composed DMM and collect
//!    [`heap_sim::Metrics`] under a configurable operation cost model.
//! 4. [`evolution`]: search for the DMM minimising a weighted time/memory
//!    fitness normalised against the [`reference`] Kingsley and Lea managers.

pub mod evolution;
pub mod grammar;
pub mod heap_sim;
pub mod reference;
pub mod trace;

pub use evolution::{compare, evolve, fitness, normalize, Evolution, FitnessContext, GeaConfig, Individual};
pub use grammar::{decode, generate_grammar, parse_bnf, DecodeOutcome, Genome, Grammar};
pub use heap_sim::{simulate, AllocatorSpec, DmmSpec, Metrics, SimConfig};
pub use trace::{compute_stats, parse_trace, ProfilingReport, TraceStats};
