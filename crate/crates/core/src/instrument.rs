//! Thread-local accounting hooks used to check the cost model against the
//! code that actually runs.
//!
//! Every dense kernel in [`crate::linalg`] reports its arithmetic to a FLOP
//! counter (multiply-add = 2, softmax = 5 per position), and decode paths
//! report each transient buffer they allocate. Both are always compiled in;
//! the allocation log is only kept while a [`Probe`] is active.

use std::cell::{Cell, RefCell};

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static ALLOCS: RefCell<Vec<Allocation>> = const { RefCell::new(Vec::new()) };
}

/// One transient buffer allocated inside an instrumented code path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub label: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl Allocation {
    pub fn elements(&self) -> usize {
        self.rows * self.cols
    }
}

#[inline]
pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
}

pub(crate) fn record_alloc(label: &'static str, rows: usize, cols: usize) {
    if TRACKING.with(Cell::get) {
        ALLOCS.with(|a| a.borrow_mut().push(Allocation { label, rows, cols }));
    }
}

/// Counts accumulated by a [`Probe`].
#[derive(Debug, Clone, Default)]
pub struct Measurement {
    pub flops: u64,
    pub allocations: Vec<Allocation>,
}

impl Measurement {
    /// Largest single allocation whose label is not in `exclude`.
    pub fn largest_excluding(&self, exclude: &[&str]) -> usize {
        self.allocations
            .iter()
            .filter(|a| !exclude.contains(&a.label))
            .map(Allocation::elements)
            .max()
            .unwrap_or(0)
    }

    pub fn total_elements(&self) -> usize {
        self.allocations.iter().map(Allocation::elements).sum()
    }
}

/// Measures the FLOPs and transient allocations of `f` on the current thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Measurement) {
    let probe = Probe::start();
    let out = f();
    (out, probe.finish())
}

struct Probe {
    flops_at_start: u64,
    was_tracking: bool,
    allocs_at_start: usize,
}

impl Probe {
    fn start() -> Self {
        let was_tracking = TRACKING.with(|t| t.replace(true));
        Probe {
            flops_at_start: FLOPS.with(Cell::get),
            was_tracking,
            allocs_at_start: ALLOCS.with(|a| a.borrow().len()),
        }
    }

    fn finish(self) -> Measurement {
        let flops = FLOPS.with(Cell::get).wrapping_sub(self.flops_at_start);
        let allocations = ALLOCS.with(|a| {
            let mut log = a.borrow_mut();
            let taken = log[self.allocs_at_start..].to_vec();
            if !self.was_tracking {
                log.clear();
            }
            taken
        });
        TRACKING.with(|t| t.set(self.was_tracking));
        Measurement { flops, allocations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_probes_see_their_own_work() {
        let (_, outer) = measure(|| {
            add_flops(3);
            record_alloc("a", 2, 2);
            let (_, inner) = measure(|| {
                add_flops(5);
                record_alloc("b", 1, 7);
            });
            assert_eq!(inner.flops, 5);
            assert_eq!(inner.allocations.len(), 1);
        });
        assert_eq!(outer.flops, 8);
        assert_eq!(outer.allocations.len(), 2);
        assert_eq!(outer.largest_excluding(&["b"]), 4);
    }

    #[test]
    fn allocations_outside_a_probe_are_dropped() {
        record_alloc("ignored", 10, 10);
        let (_, m) = measure(|| ());
        assert!(m.allocations.is_empty());
    }
}
