//! Instrumented allocation counter: the desk-scale stand-in for VRAM.
//!
//! While enabled, the tensor engine reports every graph buffer it
//! allocates or frees (node data and gradient buffers alike), in units
//! of scalar elements. Attention mechanisms additionally tag their
//! mechanism-defining intermediate — the N×N score matrix for vanilla
//! attention, the (D/J)×(D/J) key–value product for the linear
//! mechanisms — as the "core" term so its size can be asserted exactly.
//!
//! Counters are thread-local: a probe observes the graph work done on
//! its own thread only, which is exactly the single-worker benchmarking
//! contract.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static CORE_CURRENT: Cell<usize> = const { Cell::new(0) };
    static CORE_PEAK: Cell<usize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
}

/// Point-in-time view of the probe counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbeSnapshot {
    /// Live elements right now.
    pub current: usize,
    /// High-water mark of live elements.
    pub peak: usize,
    /// Live elements tagged as the mechanism-core intermediate.
    pub core_current: usize,
    /// High-water mark of the core term.
    pub core_peak: usize,
    /// Largest single buffer seen.
    pub largest_alloc: usize,
}

/// Enables counting for the current thread; disabled on drop.
pub struct ProbeGuard {
    _private: (),
}

impl ProbeGuard {
    pub fn snapshot(&self) -> ProbeSnapshot {
        snapshot()
    }
}

impl Drop for ProbeGuard {
    fn drop(&mut self) {
        ENABLED.with(|e| e.set(false));
    }
}

/// Resets all counters and starts counting on this thread.
pub fn start() -> ProbeGuard {
    CURRENT.with(|c| c.set(0));
    PEAK.with(|c| c.set(0));
    CORE_CURRENT.with(|c| c.set(0));
    CORE_PEAK.with(|c| c.set(0));
    LARGEST.with(|c| c.set(0));
    ENABLED.with(|e| e.set(true));
    ProbeGuard { _private: () }
}

pub fn snapshot() -> ProbeSnapshot {
    ProbeSnapshot {
        current: CURRENT.with(Cell::get),
        peak: PEAK.with(Cell::get),
        core_current: CORE_CURRENT.with(Cell::get),
        core_peak: CORE_PEAK.with(Cell::get),
        largest_alloc: LARGEST.with(Cell::get),
    }
}

#[inline]
pub(crate) fn on_alloc(elements: usize) {
    if !ENABLED.with(Cell::get) {
        return;
    }
    let cur = CURRENT.with(|c| {
        let v = c.get() + elements;
        c.set(v);
        v
    });
    PEAK.with(|p| {
        if cur > p.get() {
            p.set(cur);
        }
    });
    LARGEST.with(|l| {
        if elements > l.get() {
            l.set(elements);
        }
    });
}

#[inline]
pub(crate) fn on_free(elements: usize) {
    if !ENABLED.with(Cell::get) {
        return;
    }
    CURRENT.with(|c| c.set(c.get().saturating_sub(elements)));
}

/// Tags `elements` already counted by [`on_alloc`] as the mechanism-core
/// intermediate. Called by attention implementations right after creating
/// the score matrix / key–value product.
#[inline]
pub(crate) fn on_core_alloc(elements: usize) {
    if !ENABLED.with(Cell::get) {
        return;
    }
    let cur = CORE_CURRENT.with(|c| {
        let v = c.get() + elements;
        c.set(v);
        v
    });
    CORE_PEAK.with(|p| {
        if cur > p.get() {
            p.set(cur);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_peak_and_current() {
        let probe = start();
        on_alloc(100);
        on_alloc(50);
        on_free(100);
        on_alloc(10);
        let s = probe.snapshot();
        assert_eq!(s.current, 60);
        assert_eq!(s.peak, 150);
        assert_eq!(s.largest_alloc, 100);
    }

    #[test]
    fn core_term_tracked_separately() {
        let probe = start();
        on_alloc(64);
        on_core_alloc(64);
        on_alloc(1000);
        let s = probe.snapshot();
        assert_eq!(s.core_peak, 64);
        assert_eq!(s.peak, 1064);
    }

    #[test]
    fn disabled_outside_guard() {
        {
            let _p = start();
            on_alloc(5);
        }
        on_alloc(1000);
        assert_eq!(snapshot().current, 5);
    }
}
