//! Expansion of an allocator's byte range into its size classes.

use super::spec::{AllocatorClass, AllocatorSpec};
use super::SimError;

/// A size class serving requests in `(lo, hi]`. Blocks carved for the class
/// have `capacity` bytes; for a [`AllocatorClass::SegregatedFreeList`]
/// the capacity is only nominal, fresh blocks are sized to the request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeClass {
    pub lo: u64,
    pub hi: u64,
    pub capacity: u64,
}

/// Fibonacci block sizes used by Fibonacci buddies: 1, 2, 3, 5, 8, ...
pub fn fibonacci_sizes() -> impl Iterator<Item = u64> {
    std::iter::successors(Some((1u64, 2u64)), |&(a, b)| a.checked_add(b).map(|c| (b, c)))
        .map(|(a, _)| a)
}

/// Splits the range `(lo, spec.upper_bound]` into classes. `observed` is the
/// ascending list of trace sizes, used by exact and simple segregated classes
/// unless the spec carries explicit sizes.
pub fn expand(spec: &AllocatorSpec, lo: u64, observed: &[u64]) -> Result<Vec<SizeClass>, SimError> {
    let hi = spec.upper_bound;
    if hi <= lo {
        return Err(SimError::EmptyRange { lo, hi });
    }
    let classes = match spec.class {
        AllocatorClass::SegregatedFreeList => vec![SizeClass { lo, hi, capacity: hi }],
        AllocatorClass::BuddySystemBinary => {
            let mut out = Vec::new();
            let mut cap = (lo + 1).next_power_of_two();
            loop {
                out.push(SizeClass { lo: lo.max(cap / 2), hi: hi.min(cap), capacity: cap });
                if cap >= hi {
                    break;
                }
                cap *= 2;
            }
            out
        }
        AllocatorClass::BuddySystemFibonacci => {
            let mut out = Vec::new();
            let mut prev = 0;
            for f in fibonacci_sizes() {
                if f > lo {
                    out.push(SizeClass { lo: lo.max(prev), hi: hi.min(f), capacity: f });
                    if f >= hi {
                        break;
                    }
                }
                prev = f;
            }
            out
        }
        AllocatorClass::ExactSegregatedFit | AllocatorClass::SimpleSegregatedStorage => {
            let sizes = spec.class_sizes.as_deref().unwrap_or(observed);
            let mut out = Vec::new();
            let mut prev = lo;
            for &s in sizes.iter().filter(|&&s| s > lo && s <= hi) {
                out.push(SizeClass { lo: prev, hi: s, capacity: s });
                prev = s;
            }
            out
        }
    };
    if classes.is_empty() {
        return Err(SimError::EmptyRange { lo, hi });
    }
    Ok(classes)
}
