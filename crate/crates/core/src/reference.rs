//! General-purpose managers used as baselines: Kingsley, Lea, a Fibonacci
//! buddy, ten segregated lists and an exact segregated fit.

use crate::heap_sim::{
    AllocationMechanism as Mech, AllocationPolicy as Policy, AllocatorClass as Class,
    AllocatorSpec, DataStructureKind as Ds, DmmSpec,
};
use crate::trace::ProfilingReport;

/// Small-object limit of the Lea allocator.
pub const LEA_SMALL_LIMIT: u64 = 64;
/// Requests above this go to the mmap-style large-object allocator.
pub const LEA_MEDIUM_LIMIT: u64 = 128 * 1024;

/// Power-of-two buddy without splitting or coalescing.
pub fn kingsley(max_size: u64) -> DmmSpec {
    let ub = max_size.max(1).next_power_of_two();
    DmmSpec::new(vec![AllocatorSpec::new(
        Class::BuddySystemBinary,
        false,
        false,
        ub,
        Ds::Sll,
        Mech::First,
        Policy::Lifo,
    )])
}

/// Approximate best fit: exact 8-byte-granular lists for small objects,
/// a coalescing best-fit list for medium objects and system-backed large
/// objects. Tiers that lie wholly above `max_size` are omitted.
pub fn lea(max_size: u64) -> DmmSpec {
    let mut small = AllocatorSpec::new(
        Class::ExactSegregatedFit,
        false,
        false,
        LEA_SMALL_LIMIT,
        Ds::Sll,
        Mech::Exact,
        Policy::Fifo,
    );
    small.class_sizes = Some((8..=LEA_SMALL_LIMIT).step_by(8).collect());
    let mut allocators = vec![small];
    if max_size > LEA_SMALL_LIMIT {
        allocators.push(AllocatorSpec::new(
            Class::SegregatedFreeList,
            true,
            true,
            LEA_MEDIUM_LIMIT,
            Ds::Btree,
            Mech::Best,
            Policy::Fifo,
        ));
    }
    if max_size > LEA_MEDIUM_LIMIT {
        let mut large = AllocatorSpec::new(
            Class::SegregatedFreeList,
            false,
            false,
            max_size,
            Ds::Sll,
            Mech::Best,
            Policy::Fifo,
        );
        large.release_to_system = true;
        allocators.push(large);
    }
    DmmSpec::new(allocators)
}

pub fn fib_buddy(max_size: u64) -> DmmSpec {
    DmmSpec::new(vec![AllocatorSpec::new(
        Class::BuddySystemFibonacci,
        true,
        true,
        max_size.max(1),
        Ds::Sll,
        Mech::First,
        Policy::Fifo,
    )])
}

/// Upper bounds splitting `(0, max_size]` geometrically into ten ranges,
/// or into unit ranges when `max_size < 10`.
pub fn segregated10_bounds(max_size: u64) -> Vec<u64> {
    const RANGES: u64 = 10;
    let max_size = max_size.max(1);
    if max_size < RANGES {
        return (1..=max_size).collect();
    }
    let mut bounds = vec![max_size; RANGES as usize];
    for i in (1..RANGES).rev() {
        let geometric = (max_size as f64).powf(i as f64 / RANGES as f64).round() as u64;
        bounds[i as usize - 1] = geometric.clamp(i, bounds[i as usize] - 1);
    }
    bounds
}

pub fn segregated10(max_size: u64) -> DmmSpec {
    DmmSpec::new(
        segregated10_bounds(max_size)
            .into_iter()
            .map(|ub| {
                AllocatorSpec::new(Class::SegregatedFreeList, false, false, ub, Ds::Sll, Mech::First, Policy::Fifo)
            })
            .collect(),
    )
}

/// One exact-fit list per observed size.
pub fn exact_segfit(report: &ProfilingReport) -> DmmSpec {
    DmmSpec::new(vec![AllocatorSpec::new(
        Class::ExactSegregatedFit,
        false,
        false,
        report.max_size().max(1),
        Ds::Sll,
        Mech::Exact,
        Policy::Fifo,
    )])
}

/// CLI identifiers of the presets.
pub const PRESET_NAMES: [&str; 5] = ["kng", "lea", "fib", "s10", "exa"];

/// Builds a preset by CLI name for `report`.
pub fn preset(name: &str, report: &ProfilingReport) -> Option<DmmSpec> {
    let max = report.max_size().max(1);
    Some(match name {
        "kng" => kingsley(max),
        "lea" => lea(max),
        "fib" => fib_buddy(max),
        "s10" => segregated10(max),
        "exa" => exact_segfit(report),
        _ => return None,
    })
}
