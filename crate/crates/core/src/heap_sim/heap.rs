//! Simulated heap: allocators, free lists and the system pool.

use std::collections::{BTreeMap, HashMap, VecDeque};

use super::classes::{expand, fibonacci_sizes, SizeClass};
use super::spec::{
    AllocationMechanism, AllocationPolicy, AllocatorClass, AllocatorSpec, DataStructureKind,
    DmmSpec,
};
use super::{CostModel, Metrics, SimConfig, SimError};

/// Each allocator owns a disjoint address arena starting at `index << ARENA_SHIFT`.
const ARENA_SHIFT: u32 = 48;

/// A block handed out by [`Dmm::allocate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub sim_address: u64,
    /// Capacity of the block.
    pub class_size: u64,
    pub requested_size: u64,
    pub allocator: usize,
}

impl Block {
    pub fn internal_fragmentation(&self) -> u64 {
        self.class_size - self.requested_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FreeBlock {
    addr: u64,
    cap: u64,
}

/// Parent and sibling of a block produced by a Fibonacci split.
#[derive(Debug, Clone, Copy)]
struct Lineage {
    parent: (u64, u64),
    sibling: (u64, u64),
}

#[derive(Debug, Default)]
struct Charges {
    inspections: u64,
    splits: u64,
    coalesces: u64,
    system_requests: u64,
}

/// Per-allocator share of the pool and of the time units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocatorUsage {
    pub pool_bytes: u64,
    pub free_bytes: u64,
    pub time_units: u64,
}

/// Byte totals recomputed from the heap structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapAudit {
    pub pool_break: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
    /// Number of live blocks that also sit on a free list. Always 0.
    pub live_and_free: usize,
}

impl HeapAudit {
    pub fn conserved(&self) -> bool {
        self.live_bytes + self.free_bytes == self.pool_break && self.live_and_free == 0
    }
}

#[derive(Debug)]
struct Allocator {
    spec: AllocatorSpec,
    lo: u64,
    base: u64,
    classes: Vec<SizeClass>,
    lists: Vec<VecDeque<FreeBlock>>,
    /// Free blocks by address: `addr -> (capacity, class index)`.
    free_index: BTreeMap<u64, (u64, usize)>,
    lineage: HashMap<(u64, u64), Lineage>,
    /// Fibonacci sizes up to the top class (Fibonacci buddies only).
    fib: Vec<u64>,
    cursor: u64,
    usage: AllocatorUsage,
}

fn ceil_log2_plus_one(n: usize) -> u64 {
    // ceil(log2(n + 1))
    (usize::BITS - n.leading_zeros()) as u64
}

impl Allocator {
    fn new(spec: &AllocatorSpec, index: usize, lo: u64, observed: &[u64]) -> Result<Self, SimError> {
        let classes = expand(spec, lo, observed)?;
        let top = classes.last().map_or(0, |c| c.capacity);
        let fib = if spec.class == AllocatorClass::BuddySystemFibonacci {
            fibonacci_sizes().take_while(|&f| f <= top).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spec: spec.clone(),
            lo,
            base: (index as u64) << ARENA_SHIFT,
            lists: vec![VecDeque::new(); classes.len()],
            classes,
            free_index: BTreeMap::new(),
            lineage: HashMap::new(),
            fib,
            cursor: 0,
            usage: AllocatorUsage::default(),
        })
    }

    fn top_capacity(&self) -> u64 {
        self.classes.last().map_or(0, |c| c.capacity)
    }

    fn class_for_request(&self, requested: u64) -> usize {
        self.classes.partition_point(|c| c.hi < requested)
    }

    /// Class a free block of `cap` bytes is filed under.
    fn class_for_capacity(&self, cap: u64) -> usize {
        match self.spec.class {
            AllocatorClass::SegregatedFreeList => 0,
            AllocatorClass::BuddySystemBinary | AllocatorClass::BuddySystemFibonacci => self
                .classes
                .binary_search_by_key(&cap, |c| c.capacity)
                .expect("buddy block capacity matches a class"),
            AllocatorClass::ExactSegregatedFit | AllocatorClass::SimpleSegregatedStorage => {
                self.classes.partition_point(|c| c.capacity <= cap).saturating_sub(1)
            }
        }
    }

    /// Smallest remainder worth splitting off a non-buddy block.
    fn min_remainder(&self) -> u64 {
        match self.spec.class {
            AllocatorClass::SegregatedFreeList => self.lo + 1,
            AllocatorClass::ExactSegregatedFit => self.classes[0].capacity,
            _ => u64::MAX,
        }
    }

    fn search(
        &self,
        class: usize,
        target: u64,
        mechanism: AllocationMechanism,
        charges: &mut Charges,
    ) -> Option<usize> {
        let list = &self.lists[class];
        let (found, scanned) = match mechanism {
            AllocationMechanism::First => match list.iter().position(|b| b.cap >= target) {
                Some(p) => (Some(p), p + 1),
                None => (None, list.len()),
            },
            AllocationMechanism::Exact => match list.iter().position(|b| b.cap == target) {
                Some(p) => (Some(p), p + 1),
                None => (None, list.len()),
            },
            AllocationMechanism::Best => {
                let mut best: Option<usize> = None;
                let mut scanned = list.len();
                for (i, b) in list.iter().enumerate() {
                    if b.cap == target {
                        best = Some(i);
                        scanned = i + 1;
                        break;
                    }
                    if b.cap > target && best.is_none_or(|j| b.cap < list[j].cap) {
                        best = Some(i);
                    }
                }
                (best, scanned)
            }
        };
        charges.inspections += match self.spec.data_structure {
            DataStructureKind::Btree => ceil_log2_plus_one(list.len()),
            DataStructureKind::Sll | DataStructureKind::Dll => scanned as u64,
        };
        found
    }

    fn take(&mut self, class: usize, pos: usize) -> FreeBlock {
        let block = self.lists[class].remove(pos).expect("position from search");
        self.free_index.remove(&block.addr);
        self.usage.free_bytes -= block.cap;
        block
    }

    /// Removes a specific free block (a coalescing partner) from its list.
    fn unlink(&mut self, addr: u64, charges: &mut Charges) -> u64 {
        let (cap, class) = self.free_index.remove(&addr).expect("free block indexed");
        let list = &mut self.lists[class];
        let n = list.len();
        let pos = list.iter().position(|b| b.addr == addr).expect("indexed block is listed");
        charges.inspections += match self.spec.data_structure {
            DataStructureKind::Sll => pos as u64 + 1,
            DataStructureKind::Dll => 0,
            DataStructureKind::Btree => ceil_log2_plus_one(n),
        };
        list.remove(pos);
        self.usage.free_bytes -= cap;
        cap
    }

    fn file(&mut self, addr: u64, cap: u64) {
        let class = self.class_for_capacity(cap);
        let block = FreeBlock { addr, cap };
        match self.spec.policy {
            AllocationPolicy::Fifo => self.lists[class].push_back(block),
            AllocationPolicy::Lifo => self.lists[class].push_front(block),
        }
        self.free_index.insert(addr, (cap, class));
        self.usage.free_bytes += cap;
    }

    /// Returns `(address, capacity)` of the block serving `requested`, and the
    /// number of bytes newly drawn from the system.
    fn allocate(&mut self, requested: u64, page_size: u64, charges: &mut Charges) -> (u64, u64, u64) {
        let class = self.class_for_request(requested);
        let target = match self.spec.class {
            AllocatorClass::SegregatedFreeList => requested,
            _ => self.classes[class].capacity,
        };

        if let Some(pos) = self.search(class, target, self.spec.mechanism, charges) {
            let block = self.take(class, pos);
            let (addr, cap) = self.trim(block, target, charges);
            return (addr, cap, 0);
        }

        if self.spec.allow_splitting && self.spec.class != AllocatorClass::SimpleSegregatedStorage {
            // An exact match is impossible in a larger class.
            let mechanism = match self.spec.mechanism {
                AllocationMechanism::Best => AllocationMechanism::Best,
                _ => AllocationMechanism::First,
            };
            for larger in class + 1..self.classes.len() {
                if let Some(pos) = self.search(larger, target, mechanism, charges) {
                    let block = self.take(larger, pos);
                    let (addr, cap) = match self.spec.class {
                        AllocatorClass::BuddySystemBinary => self.split_binary(block, target, charges),
                        AllocatorClass::BuddySystemFibonacci => self.split_fibonacci(block, target, charges),
                        _ => self.trim(block, target, charges),
                    };
                    return (addr, cap, 0);
                }
            }
        }

        charges.system_requests += 1;
        let (addr, bytes) = match self.spec.class {
            AllocatorClass::SimpleSegregatedStorage => {
                let slots = (page_size / target).max(1);
                let addr = self.base + self.cursor;
                let bytes = slots * target;
                self.cursor += bytes;
                self.usage.pool_bytes += bytes;
                let carve = |s: u64| addr + s * target;
                match self.spec.policy {
                    AllocationPolicy::Fifo => (1..slots).for_each(|s| self.file(carve(s), target)),
                    AllocationPolicy::Lifo => (1..slots).rev().for_each(|s| self.file(carve(s), target)),
                }
                (addr, bytes)
            }
            AllocatorClass::BuddySystemBinary => {
                self.cursor = self.cursor.next_multiple_of(target);
                let addr = self.base + self.cursor;
                self.cursor += target;
                self.usage.pool_bytes += target;
                (addr, target)
            }
            _ => {
                let addr = self.base + self.cursor;
                self.cursor += target;
                self.usage.pool_bytes += target;
                (addr, target)
            }
        };
        (addr, target, bytes)
    }

    /// Splits the tail off a non-buddy block when the remainder is usable.
    fn trim(&mut self, block: FreeBlock, target: u64, charges: &mut Charges) -> (u64, u64) {
        let splittable = self.spec.allow_splitting && !self.spec.class.is_buddy();
        if splittable && block.cap > target && block.cap - target >= self.min_remainder() {
            self.file(block.addr + target, block.cap - target);
            charges.splits += 1;
            (block.addr, target)
        } else {
            (block.addr, block.cap)
        }
    }

    fn split_binary(&mut self, block: FreeBlock, target: u64, charges: &mut Charges) -> (u64, u64) {
        let FreeBlock { addr, mut cap } = block;
        while cap > target {
            cap /= 2;
            self.file(addr + cap, cap);
            charges.splits += 1;
        }
        (addr, cap)
    }

    fn split_fibonacci(&mut self, block: FreeBlock, target: u64, charges: &mut Charges) -> (u64, u64) {
        let FreeBlock { mut addr, mut cap } = block;
        let smallest = self.classes[0].capacity;
        while cap > target {
            let k = self.fib.iter().position(|&f| f == cap).expect("Fibonacci capacity");
            if k < 2 || self.fib[k - 2] < smallest {
                break;
            }
            let (left, right) = (self.fib[k - 1], self.fib[k - 2]);
            let (l, r) = ((addr, left), (addr + left, right));
            self.lineage.insert(l, Lineage { parent: (addr, cap), sibling: r });
            self.lineage.insert(r, Lineage { parent: (addr, cap), sibling: l });
            charges.splits += 1;
            if right >= target {
                self.file(l.0, l.1);
                (addr, cap) = r;
            } else {
                self.file(r.0, r.1);
                (addr, cap) = l;
            }
        }
        (addr, cap)
    }

    /// Returns a block to the allocator. Yields the number of bytes released
    /// back to the system.
    fn deallocate(&mut self, addr: u64, cap: u64, charges: &mut Charges) -> u64 {
        if self.spec.release_to_system {
            self.usage.pool_bytes -= cap;
            return cap;
        }
        let (mut addr, mut cap) = (addr, cap);
        if self.spec.allow_coalescing {
            match self.spec.class {
                AllocatorClass::BuddySystemBinary => {
                    let top = self.top_capacity();
                    while cap * 2 <= top {
                        let buddy = self.base + ((addr - self.base) ^ cap);
                        if self.free_index.get(&buddy).map(|&(c, _)| c) != Some(cap) {
                            break;
                        }
                        self.unlink(buddy, charges);
                        charges.coalesces += 1;
                        addr = addr.min(buddy);
                        cap *= 2;
                    }
                }
                AllocatorClass::BuddySystemFibonacci => {
                    while let Some(&Lineage { parent, sibling }) = self.lineage.get(&(addr, cap)) {
                        if self.free_index.get(&sibling.0).map(|&(c, _)| c) != Some(sibling.1) {
                            break;
                        }
                        self.unlink(sibling.0, charges);
                        self.lineage.remove(&(addr, cap));
                        self.lineage.remove(&sibling);
                        charges.coalesces += 1;
                        (addr, cap) = parent;
                    }
                }
                AllocatorClass::SegregatedFreeList | AllocatorClass::ExactSegregatedFit => {
                    let left = self.free_index.range(..addr).next_back().map(|(&a, &(c, _))| (a, c));
                    if let Some((la, lc)) = left.filter(|&(a, c)| a + c == addr) {
                        self.unlink(la, charges);
                        charges.coalesces += 1;
                        addr = la;
                        cap += lc;
                    }
                    if self.free_index.contains_key(&(addr + cap)) {
                        cap += self.unlink(addr + cap, charges);
                        charges.coalesces += 1;
                    }
                }
                AllocatorClass::SimpleSegregatedStorage => {}
            }
        }
        self.file(addr, cap);
        0
    }
}

/// A DMM instance with its heap state.
#[derive(Debug)]
pub struct Dmm {
    allocators: Vec<Allocator>,
    bounds: Vec<u64>,
    live: HashMap<u64, Block>,
    live_bytes: u64,
    pool_break: u64,
    metrics: Metrics,
    config: SimConfig,
}

impl Dmm {
    /// Expands every allocator of `spec` into its size classes.
    pub fn build(spec: &DmmSpec, observed_sizes: &[u64], config: SimConfig) -> Result<Self, SimError> {
        spec.validate()?;
        let allocators = (0..spec.allocators.len())
            .map(|i| Allocator::new(&spec.allocators[i], i, spec.range(i).0, observed_sizes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            allocators,
            bounds: spec.allocators.iter().map(|a| a.upper_bound).collect(),
            live: HashMap::new(),
            live_bytes: 0,
            pool_break: 0,
            metrics: Metrics::default(),
            config,
        })
    }

    /// Size classes of allocator `i`.
    pub fn classes(&self, i: usize) -> &[SizeClass] {
        &self.allocators[i].classes
    }

    pub fn allocator_count(&self) -> usize {
        self.allocators.len()
    }

    pub fn usage(&self, i: usize) -> AllocatorUsage {
        self.allocators[i].usage
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { current_bytes: self.pool_break, ..self.metrics }
    }

    pub fn pool_break(&self) -> u64 {
        self.pool_break
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = &Block> {
        self.live.values()
    }

    fn charge(&mut self, allocator: usize, charges: &Charges) {
        let cost: CostModel = self.config.cost;
        let time = cost.base_call
            + charges.inspections * cost.inspect_time
            + charges.splits * cost.split
            + charges.coalesces * cost.coalesce
            + charges.system_requests * cost.system_request;
        self.metrics.time_units += time;
        self.metrics.memory_accesses += charges.inspections * cost.inspect_accesses;
        self.metrics.n_splits += charges.splits;
        self.metrics.n_coalesces += charges.coalesces;
        self.metrics.n_system_requests += charges.system_requests;
        self.allocators[allocator].usage.time_units += time;
    }

    pub fn allocate(&mut self, requested: u64) -> Result<Block, SimError> {
        if requested == 0 {
            return Err(SimError::ZeroRequest);
        }
        let index = self.bounds.partition_point(|&b| b < requested);
        if index == self.bounds.len() {
            return Err(SimError::OversizedRequest {
                requested,
                max: self.bounds.last().copied().unwrap_or(0),
            });
        }
        let mut charges = Charges::default();
        let (addr, cap, grown) =
            self.allocators[index].allocate(requested, self.config.page_size, &mut charges);
        self.charge(index, &charges);
        self.metrics.n_allocs += 1;
        self.pool_break += grown;
        self.metrics.peak_bytes = self.metrics.peak_bytes.max(self.pool_break);

        let block = Block { sim_address: addr, class_size: cap, requested_size: requested, allocator: index };
        self.live_bytes += cap;
        self.live.insert(addr, block);
        Ok(block)
    }

    pub fn deallocate(&mut self, block: &Block) -> Result<(), SimError> {
        match self.live.get(&block.sim_address) {
            Some(live) if live == block => {}
            _ => return Err(SimError::DoubleFree { address: block.sim_address }),
        }
        self.live.remove(&block.sim_address);
        self.live_bytes -= block.class_size;
        let mut charges = Charges::default();
        let released =
            self.allocators[block.allocator].deallocate(block.sim_address, block.class_size, &mut charges);
        self.charge(block.allocator, &charges);
        self.metrics.n_frees += 1;
        self.pool_break -= released;
        Ok(())
    }

    /// Cheap check of the running byte counters.
    pub fn is_conserved(&self) -> bool {
        let free: u64 = self.allocators.iter().map(|a| a.usage.free_bytes).sum();
        self.live_bytes + free == self.pool_break
    }

    /// Recomputes live and free byte totals from the block structures.
    pub fn audit(&self) -> HeapAudit {
        let live_bytes = self.live.values().map(|b| b.class_size).sum();
        let free_bytes = self
            .allocators
            .iter()
            .flat_map(|a| a.lists.iter().flatten())
            .map(|b| b.cap)
            .sum();
        let live_and_free = self
            .live
            .values()
            .filter(|b| self.allocators[b.allocator].free_index.contains_key(&b.sim_address))
            .count();
        HeapAudit { pool_break: self.pool_break, live_bytes, free_bytes, live_and_free }
    }
}
