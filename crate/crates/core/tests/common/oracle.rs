//! Explicit byte-map replay used to cross-check the simulator's pool growth.
//!
//! Every allocator arena is a vector of cells, one per byte, holding the id
//! of the block that covers it (0 for alignment padding). Free lists are not
//! kept as lists: a free block remembers its class and an insertion stamp,
//! and list order is recovered by sorting on the stamp. Neighbours and
//! buddies are found by looking at cells. Costs are ignored, so the data
//! structure of a spec has no effect here.

use std::collections::{BTreeSet, HashMap};

use dmm_core::heap_sim::{AllocationMechanism, AllocationPolicy, AllocatorClass, AllocatorSpec, DmmSpec};
use dmm_core::trace::{ProfilingReport, ReplayOp};

#[derive(Clone, Debug)]
struct Piece {
    arena: usize,
    off: usize,
    len: usize,
    /// `(class, stamp)` while free.
    free: Option<(usize, u64)>,
    /// Fibonacci split history, innermost last: `(parent off, parent len,
    /// sibling off, sibling len)`.
    history: Vec<(usize, usize, usize, usize)>,
}

struct Arena {
    spec: AllocatorSpec,
    lo: u64,
    /// Capacity of each class, ascending.
    caps: Vec<u64>,
    /// Largest request each class serves.
    his: Vec<u64>,
    cells: Vec<u32>,
}

fn fib_upto(limit: u64) -> Vec<u64> {
    let mut out = vec![1, 2];
    while *out.last().unwrap() < limit {
        let n = out[out.len() - 1] + out[out.len() - 2];
        out.push(n);
    }
    out
}

impl Arena {
    fn new(spec: &AllocatorSpec, lo: u64, sizes: &[u64]) -> Option<Self> {
        let ub = spec.upper_bound;
        let (caps, his): (Vec<u64>, Vec<u64>) = match spec.class {
            AllocatorClass::SegregatedFreeList => (vec![ub], vec![ub]),
            AllocatorClass::BuddySystemBinary => {
                let mut caps = vec![];
                let mut p = 1u64;
                while p <= lo {
                    p *= 2;
                }
                loop {
                    caps.push(p);
                    if p >= ub {
                        break;
                    }
                    p *= 2;
                }
                let his = caps.iter().map(|&c| c.min(ub)).collect();
                (caps, his)
            }
            AllocatorClass::BuddySystemFibonacci => {
                let mut caps: Vec<u64> = fib_upto(ub).into_iter().filter(|&f| f > lo).collect();
                while caps.len() > 1 && caps[caps.len() - 2] >= ub {
                    caps.pop();
                }
                let his = caps.iter().map(|&c| c.min(ub)).collect();
                (caps, his)
            }
            AllocatorClass::ExactSegregatedFit | AllocatorClass::SimpleSegregatedStorage => {
                let sizes = spec.class_sizes.as_deref().unwrap_or(sizes);
                let caps: Vec<u64> = sizes.iter().copied().filter(|&s| s > lo && s <= ub).collect();
                (caps.clone(), caps)
            }
        };
        if caps.is_empty() {
            return None;
        }
        Some(Self { spec: spec.clone(), lo, caps, his, cells: Vec::new() })
    }

    fn class_of_request(&self, size: u64) -> usize {
        (0..self.his.len()).find(|&c| self.his[c] >= size).unwrap()
    }

    fn class_of_free(&self, len: u64) -> usize {
        match self.spec.class {
            AllocatorClass::SegregatedFreeList => 0,
            AllocatorClass::BuddySystemBinary | AllocatorClass::BuddySystemFibonacci => {
                self.caps.iter().position(|&c| c == len).unwrap()
            }
            _ => (0..self.caps.len()).rev().find(|&c| self.caps[c] <= len).unwrap_or(0),
        }
    }
}

struct Heap {
    arenas: Vec<Arena>,
    pieces: Vec<Piece>,
    /// Ids of the pieces currently on a free list.
    free_ids: BTreeSet<usize>,
    stamp: u64,
    page: u64,
}

impl Heap {
    fn new_piece(&mut self, arena: usize, off: usize, len: usize, history: Vec<(usize, usize, usize, usize)>) -> usize {
        self.pieces.push(Piece { arena, off, len, free: None, history });
        let id = self.pieces.len() - 1;
        let cells = &mut self.arenas[arena].cells;
        if cells.len() < off + len {
            cells.resize(off + len, 0);
        }
        for c in &mut cells[off..off + len] {
            *c = id as u32;
        }
        id
    }

    fn release(&mut self, id: usize) {
        let class = self.arenas[self.pieces[id].arena].class_of_free(self.pieces[id].len as u64);
        self.stamp += 1;
        self.pieces[id].free = Some((class, self.stamp));
        self.free_ids.insert(id);
    }

    fn unfree(&mut self, id: usize) {
        self.pieces[id].free = None;
        self.free_ids.remove(&id);
    }

    /// Free piece ids of one class in list order, front first.
    fn list(&self, arena: usize, class: usize) -> Vec<usize> {
        let mut ids: Vec<(u64, usize)> = self
            .free_ids
            .iter()
            .copied()
            .filter(|&i| self.pieces[i].arena == arena && self.pieces[i].free.map(|f| f.0) == Some(class))
            .map(|i| (self.pieces[i].free.unwrap().1, i))
            .collect();
        ids.sort();
        if self.arenas[arena].spec.policy == AllocationPolicy::Lifo {
            ids.reverse();
        }
        ids.into_iter().map(|(_, i)| i).collect()
    }

    fn pick(&self, list: &[usize], want: u64, mech: AllocationMechanism) -> Option<usize> {
        let len = |i: usize| self.pieces[i].len as u64;
        match mech {
            AllocationMechanism::First => list.iter().copied().find(|&i| len(i) >= want),
            AllocationMechanism::Exact => list.iter().copied().find(|&i| len(i) == want),
            AllocationMechanism::Best => list.iter().copied().find(|&i| len(i) == want).or_else(|| {
                let mut best: Option<usize> = None;
                for &i in list {
                    if len(i) > want && best.is_none_or(|b| len(i) < len(b)) {
                        best = Some(i);
                    }
                }
                best
            }),
        }
    }

    fn valid(&self, id: usize) -> bool {
        let p = &self.pieces[id];
        self.arenas[p.arena].cells.get(p.off) == Some(&(id as u32))
            && self.arenas[p.arena].cells[p.off + p.len - 1] == id as u32
    }

    /// Free piece that starts at `off` in `arena`, if any.
    fn free_at(&self, arena: usize, off: usize) -> Option<usize> {
        let id = *self.arenas[arena].cells.get(off)? as usize;
        (id != 0 && self.pieces[id].off == off && self.pieces[id].free.is_some()).then_some(id)
    }

    fn allocate(&mut self, arena: usize, size: u64) -> usize {
        let a = &self.arenas[arena];
        let class = a.class_of_request(size);
        let want = if a.spec.class == AllocatorClass::SegregatedFreeList { size } else { a.caps[class] };
        let mech = a.spec.mechanism;
        let may_split = a.spec.allow_splitting && a.spec.class != AllocatorClass::SimpleSegregatedStorage;
        let classes = a.caps.len();

        let own = self.list(arena, class);
        if let Some(id) = self.pick(&own, want, mech) {
            return self.shape(id, want);
        }
        if may_split {
            let mech = if mech == AllocationMechanism::Best { mech } else { AllocationMechanism::First };
            for bigger in class + 1..classes {
                let list = self.list(arena, bigger);
                if let Some(id) = self.pick(&list, want, mech) {
                    return self.shape(id, want);
                }
            }
        }

        let a = &self.arenas[arena];
        let end = a.cells.len();
        match a.spec.class {
            AllocatorClass::SimpleSegregatedStorage => {
                let slots = (self.page / want).max(1) as usize;
                let w = want as usize;
                let ids: Vec<usize> = (0..slots).map(|s| self.new_piece(arena, end + s * w, w, vec![])).collect();
                // Lowest address at the front of the list.
                let order: Vec<usize> = match self.arenas[arena].spec.policy {
                    AllocationPolicy::Fifo => ids[1..].to_vec(),
                    AllocationPolicy::Lifo => ids[1..].iter().rev().copied().collect(),
                };
                for id in order {
                    self.release(id);
                }
                ids[0]
            }
            AllocatorClass::BuddySystemBinary => {
                let w = want as usize;
                let start = end.div_ceil(w) * w;
                self.arenas[arena].cells.resize(start, 0);
                self.new_piece(arena, start, w, vec![])
            }
            _ => self.new_piece(arena, end, want as usize, vec![]),
        }
    }

    /// Takes free piece `id` off its list and cuts it down towards `want`.
    fn shape(&mut self, id: usize, want: u64) -> usize {
        self.unfree(id);
        let arena = self.pieces[id].arena;
        let spec = self.arenas[arena].spec.clone();
        let (off, len) = (self.pieces[id].off, self.pieces[id].len as u64);
        match spec.class {
            AllocatorClass::BuddySystemBinary => {
                let mut cur = id;
                while (self.pieces[cur].len as u64) > want {
                    let half = self.pieces[cur].len / 2;
                    let o = self.pieces[cur].off;
                    let keep = self.new_piece(arena, o, half, vec![]);
                    let rest = self.new_piece(arena, o + half, half, vec![]);
                    self.release(rest);
                    cur = keep;
                }
                cur
            }
            AllocatorClass::BuddySystemFibonacci => {
                let fib = fib_upto(len);
                let smallest = self.arenas[arena].caps[0];
                let mut cur = id;
                loop {
                    let p = self.pieces[cur].clone();
                    if (p.len as u64) <= want {
                        break;
                    }
                    let k = fib.iter().position(|&f| f == p.len as u64).unwrap();
                    if k < 2 || fib[k - 2] < smallest {
                        break;
                    }
                    let (l, r) = (fib[k - 1] as usize, fib[k - 2] as usize);
                    let mut hl = p.history.clone();
                    hl.push((p.off, p.len, p.off + l, r));
                    let mut hr = p.history.clone();
                    hr.push((p.off, p.len, p.off, l));
                    let left = self.new_piece(arena, p.off, l, hl);
                    let right = self.new_piece(arena, p.off + l, r, hr);
                    if r as u64 >= want {
                        self.release(left);
                        cur = right;
                    } else {
                        self.release(right);
                        cur = left;
                    }
                }
                cur
            }
            AllocatorClass::SimpleSegregatedStorage => id,
            _ => {
                let min_rest = match spec.class {
                    AllocatorClass::SegregatedFreeList => self.arenas[arena].lo + 1,
                    _ => self.arenas[arena].caps[0],
                };
                if spec.allow_splitting && len > want && len - want >= min_rest {
                    let keep = self.new_piece(arena, off, want as usize, vec![]);
                    let rest = self.new_piece(arena, off + want as usize, (len - want) as usize, vec![]);
                    self.release(rest);
                    keep
                } else {
                    id
                }
            }
        }
    }

    fn free(&mut self, id: usize) {
        let arena = self.pieces[id].arena;
        let spec = self.arenas[arena].spec.clone();
        if spec.release_to_system {
            let p = &self.pieces[id];
            self.arenas[arena].cells[p.off..p.off + p.len].fill(0);
            return;
        }
        let mut cur = id;
        if spec.allow_coalescing {
            match spec.class {
                AllocatorClass::BuddySystemBinary => {
                    let top = *self.arenas[arena].caps.last().unwrap() as usize;
                    loop {
                        let (off, len) = (self.pieces[cur].off, self.pieces[cur].len);
                        if len * 2 > top {
                            break;
                        }
                        let buddy = off ^ len;
                        match self.free_at(arena, buddy) {
                            Some(b) if self.pieces[b].len == len => {
                                self.unfree(b);
                                cur = self.new_piece(arena, off.min(buddy), len * 2, vec![]);
                            }
                            _ => break,
                        }
                    }
                }
                AllocatorClass::BuddySystemFibonacci => {
                    while let Some(&(po, pl, so, sl)) = self.pieces[cur].history.last() {
                        match self.free_at(arena, so) {
                            Some(s) if self.pieces[s].len == sl => {
                                self.unfree(s);
                                let mut h = self.pieces[cur].history.clone();
                                h.pop();
                                cur = self.new_piece(arena, po, pl, h);
                            }
                            _ => break,
                        }
                    }
                }
                AllocatorClass::SegregatedFreeList | AllocatorClass::ExactSegregatedFit => {
                    let (off, len) = (self.pieces[cur].off, self.pieces[cur].len);
                    let (mut start, mut end) = (off, off + len);
                    if off > 0 {
                        let left = self.arenas[arena].cells[off - 1] as usize;
                        if left != 0 && self.pieces[left].free.is_some() {
                            self.unfree(left);
                            start = self.pieces[left].off;
                        }
                    }
                    if let Some(right) = self.free_at(arena, end) {
                        self.unfree(right);
                        end += self.pieces[right].len;
                    }
                    if (start, end) != (off, off + len) {
                        cur = self.new_piece(arena, start, end - start, vec![]);
                    }
                }
                AllocatorClass::SimpleSegregatedStorage => {}
            }
        }
        debug_assert!(self.valid(cur));
        self.release(cur);
    }

    fn pool(&self) -> u64 {
        self.arenas.iter().map(|a| a.cells.iter().filter(|&&c| c != 0).count() as u64).sum()
    }
}

/// Peak pool bytes of replaying `report` on `spec`, or `None` when the spec
/// cannot be instantiated for the trace.
pub fn peak_bytes(report: &ProfilingReport, spec: &DmmSpec, page_size: u64) -> Option<u64> {
    let sizes = report.distinct_sizes();
    let mut arenas = Vec::new();
    let mut lo = 0;
    for a in &spec.allocators {
        arenas.push(Arena::new(a, lo, sizes)?);
        lo = a.upper_bound;
    }
    if report.max_size() > lo {
        return None;
    }
    let mut heap = Heap {
        arenas,
        // Id 0 marks padding.
        pieces: vec![Piece { arena: usize::MAX, off: 0, len: 0, free: None, history: vec![] }],
        free_ids: BTreeSet::new(),
        stamp: 0,
        page: page_size,
    };
    let mut objects: HashMap<usize, usize> = HashMap::new();
    let mut peak = 0;
    for op in report.ops() {
        match *op {
            ReplayOp::Alloc { object, size } => {
                let arena = spec.allocators.iter().position(|a| a.upper_bound >= size)?;
                objects.insert(object, heap.allocate(arena, size));
            }
            ReplayOp::Free { object } => heap.free(objects.remove(&object)?),
        }
        peak = peak.max(heap.pool());
    }
    Some(peak)
}
