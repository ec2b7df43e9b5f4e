//! Per-thread heap accounting.
//!
//! Binaries that want byte counts install [`CountingAllocator`] as their
//! global allocator; [`measure_peak`] then reports the peak number of live
//! bytes allocated by the current thread while a closure runs. Without the
//! allocator installed, `measure_peak` returns `None`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct CountingAllocator;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

#[inline]
fn record(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

fn live() -> isize {
    LIVE.with(Cell::get)
}

/// True when the counting allocator is the process's global allocator.
pub fn is_installed() -> bool {
    let before = live();
    let probe = std::hint::black_box(Vec::<u8>::with_capacity(64));
    let during = live();
    drop(probe);
    during - before >= 64
}

/// Runs `f` and returns its result with the peak bytes that were live on this
/// thread during the call, measured above the level at entry.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    if !is_installed() {
        return (f(), None);
    }
    let base = live();
    let saved_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, Some((peak - base).max(0) as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_a_known_allocation() {
        let (_, peak) = measure_peak(|| {
            let v = std::hint::black_box(vec![0u8; 10_000]);
            v.len()
        });
        let peak = peak.expect("unit tests install the counting allocator");
        assert!((10_000..10_000 + 1024).contains(&peak), "peak {peak}");
    }

    #[test]
    fn nested_measurements_are_independent() {
        let (inner, outer) = measure_peak(|| {
            let _a = std::hint::black_box(vec![0u8; 4096]);
            measure_peak(|| std::hint::black_box(vec![0u8; 100]).len()).1.unwrap()
        });
        assert!(inner >= 100 && inner < 4096);
        assert!(outer.unwrap() >= 4096 + 100);
    }
}
