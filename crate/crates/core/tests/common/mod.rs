#![allow(dead_code)]

pub mod oracle;

use dmm_core::evolution::{fitness, normalize, FitnessContext};
use dmm_core::heap_sim::{
    simulate, AllocationMechanism, AllocationPolicy, AllocatorClass, AllocatorSpec, DataStructureKind, DmmSpec,
    Metrics, Replay, SimConfig,
};
use dmm_core::trace::{synth_trace, Lifetime, ProfilingReport, SynthProfile, TraceEvent};
use rand::Rng;

/// Distinct sizes of the dealII-shaped grammar: 419 `<Size>` options that
/// begin `4|7|8`, then the maximum 7832240.
pub fn dealii_sizes() -> Vec<u64> {
    let mut sizes = vec![4, 7, 8];
    sizes.extend(9..=424);
    sizes.push(7_832_240);
    sizes
}

pub const DEALII_GENOME: [u32; 18] = [401, 213, 8, 151, 77, 2, 34, 60, 300, 114, 205, 7, 2, 122, 183, 197, 49, 136];

/// Every allocator the two-size grammar can produce for one upper bound.
pub fn allocator_choices(ub: u64) -> Vec<AllocatorSpec> {
    let mut out = Vec::with_capacity(360);
    for &class in AllocatorClass::ALL {
        for split in [true, false] {
            for coalesce in [true, false] {
                for &ds in DataStructureKind::ALL {
                    for &mech in AllocationMechanism::ALL {
                        for &policy in AllocationPolicy::ALL {
                            out.push(AllocatorSpec::new(class, split, coalesce, ub, ds, mech, policy));
                        }
                    }
                }
            }
        }
    }
    out
}

/// All DMMs with one or two allocators over sizes `small < large`.
pub fn two_size_specs(small: u64, large: u64) -> Vec<DmmSpec> {
    let lows = allocator_choices(small);
    let highs = allocator_choices(large);
    let mut out: Vec<DmmSpec> = highs.iter().map(|h| DmmSpec::new(vec![h.clone()])).collect();
    for l in &lows {
        for h in &highs {
            out.push(DmmSpec::new(vec![l.clone(), h.clone()]));
        }
    }
    out
}

/// Random trace over exactly the two sizes `{small, large}` with at most
/// `max_events` events, not necessarily fully freed.
pub fn two_size_trace(rng: &mut impl Rng, max_events: usize) -> ProfilingReport {
    let small = rng.random_range(1..=24u64);
    let large = rng.random_range(small + 1..=64);
    let n = rng.random_range(2..=max_events);
    let mut live: Vec<u64> = Vec::new();
    let mut next_addr = 0x10u64;
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let time = i as f64;
        if i >= 2 && !live.is_empty() && rng.random_bool(0.45) {
            let address = live.swap_remove(rng.random_range(0..live.len()));
            events.push(TraceEvent::Free { time, address });
        } else {
            let size = match i {
                0 => small,
                1 => large,
                _ if rng.random_bool(0.5) => small,
                _ => large,
            };
            events.push(TraceEvent::Alloc { time, size, address: next_addr });
            live.push(next_addr);
            next_addr += 0x10;
        }
    }
    let (report, diagnostics) = ProfilingReport::from_events(events);
    assert!(diagnostics.is_empty());
    report
}

/// Bimodal trace over sizes 8 and 4096.
pub fn bimodal_trace(events: usize, seed: u64) -> ProfilingReport {
    synth_trace(&SynthProfile {
        size_weights: vec![(8, 0.8), (4096, 0.2)],
        lifetime: Lifetime::Exponential { mean: 40.0 },
        event_count: events,
        seed,
    })
}

/// Best fitness over every one- and two-allocator DMM of the two-size
/// grammar, simulating each candidate in full. Also returns one minimiser.
pub fn enumerate_direct(report: &ProfilingReport) -> (f64, DmmSpec) {
    let ctx = normalize(report).unwrap();
    let sizes = report.distinct_sizes();
    let mut best = (f64::MAX, None);
    for spec in two_size_specs(sizes[0], sizes[1]) {
        if let Ok(m) = simulate(report, &spec) {
            let f = fitness(&m, &ctx);
            if f < best.0 {
                best = (f, Some(spec));
            }
        }
    }
    (best.0, best.1.unwrap())
}

/// Per-event pool bytes and total time of allocator `index` of `spec`.
pub fn trajectory(report: &ProfilingReport, spec: &DmmSpec, index: usize) -> (Vec<u64>, u64) {
    let mut replay = Replay::new(report, spec, &SimConfig::default()).unwrap();
    let mut pool = Vec::with_capacity(report.len());
    while let Some(step) = replay.step() {
        step.unwrap();
        pool.push(replay.dmm().usage(index).pool_bytes);
    }
    (pool, replay.dmm().usage(index).time_units)
}

/// Same optimum as [`enumerate_direct`], computed by composing allocator
/// trajectories. Allocators own disjoint arenas and only see requests in
/// their range, so a two-allocator DMM costs the sum of both allocators'
/// time and its pool is the event-wise sum of both pools.
pub struct Enumeration {
    pub best: f64,
    pub argmin: DmmSpec,
    lows: Vec<(AllocatorSpec, Vec<u64>, u64)>,
    highs: Vec<(AllocatorSpec, Vec<u64>, u64)>,
    ctx: FitnessContext,
}

impl Enumeration {
    pub fn run(report: &ProfilingReport) -> Self {
        let ctx = normalize(report).unwrap();
        let sizes = report.distinct_sizes();
        let (small, large) = (sizes[0], sizes[1]);
        let anchor_low = allocator_choices(small).swap_remove(0);
        let anchor_high = allocator_choices(large).swap_remove(0);
        let lows: Vec<_> = allocator_choices(small)
            .into_iter()
            .map(|a| {
                let (pool, time) = trajectory(report, &DmmSpec::new(vec![a.clone(), anchor_high.clone()]), 0);
                (a, pool, time)
            })
            .collect();
        let highs: Vec<_> = allocator_choices(large)
            .into_iter()
            .map(|a| {
                let (pool, time) = trajectory(report, &DmmSpec::new(vec![anchor_low.clone(), a.clone()]), 1);
                (a, pool, time)
            })
            .collect();

        let mut best = f64::MAX;
        let mut argmin = None;
        for a in allocator_choices(large) {
            let m = simulate(report, &DmmSpec::new(vec![a.clone()])).unwrap();
            let f = fitness(&m, &ctx);
            if f < best {
                best = f;
                argmin = Some(DmmSpec::new(vec![a]));
            }
        }
        let mut this = Self { best, argmin: argmin.unwrap(), lows, highs, ctx };
        for i in 0..this.lows.len() {
            for j in 0..this.highs.len() {
                let f = this.pair_fitness(i, j);
                if f < this.best {
                    this.best = f;
                    this.argmin = DmmSpec::new(vec![this.lows[i].0.clone(), this.highs[j].0.clone()]);
                }
            }
        }
        this
    }

    pub fn pairs(&self) -> (usize, usize) {
        (self.lows.len(), self.highs.len())
    }

    pub fn pair_spec(&self, i: usize, j: usize) -> DmmSpec {
        DmmSpec::new(vec![self.lows[i].0.clone(), self.highs[j].0.clone()])
    }

    pub fn pair_metrics(&self, i: usize, j: usize) -> (u64, u64) {
        let (_, pl, tl) = &self.lows[i];
        let (_, ph, th) = &self.highs[j];
        let peak = pl.iter().zip(ph).map(|(a, b)| a + b).max().unwrap_or(0);
        (tl + th, peak)
    }

    pub fn pair_fitness(&self, i: usize, j: usize) -> f64 {
        let (time_units, peak_bytes) = self.pair_metrics(i, j);
        fitness(&Metrics { time_units, peak_bytes, ..Metrics::default() }, &self.ctx)
    }
}
