//! A counting allocator for benchmark and test instrumentation.
//!
//! Install it as the global allocator in a binary or test target:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: margin_engine::alloc::CountingAllocator =
//!     margin_engine::alloc::CountingAllocator;
//! ```
//!
//! The counters are process-global statics, so library code (e.g. the bench
//! module) can read them whether or not the hook is installed; without the
//! hook they simply stay at zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicU64, Ordering};

static BYTES_ALLOCATED: AtomicU64 = AtomicU64::new(0);
static ALLOCATION_COUNT: AtomicU64 = AtomicU64::new(0);

/// Global-allocator wrapper around [`System`] that counts allocated bytes.
pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            BYTES_ALLOCATED.fetch_add(layout.size() as u64, Ordering::Relaxed);
            ALLOCATION_COUNT.fetch_add(1, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() && new_size > layout.size() {
            BYTES_ALLOCATED.fetch_add((new_size - layout.size()) as u64, Ordering::Relaxed);
            ALLOCATION_COUNT.fetch_add(1, Ordering::Relaxed);
        }
        p
    }
}

/// Total bytes allocated since process start (or the last differencing
/// point; callers should take before/after snapshots).
pub fn bytes_allocated() -> u64 {
    BYTES_ALLOCATED.load(Ordering::SeqCst)
}

/// Total allocation calls since process start.
pub fn allocation_count() -> u64 {
    ALLOCATION_COUNT.load(Ordering::SeqCst)
}
