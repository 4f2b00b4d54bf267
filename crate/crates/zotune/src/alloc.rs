//! Process-global accounting of tensor buffer memory.
//!
//! Every buffer that backs a [`Tensor`](crate::tensor::Tensor) or a token
//! batch is a [`TrackedVec`], which registers its byte size here on creation
//! and unregisters on drop. The counters answer the two questions the
//! benchmarks care about: how many bytes are live right now, and what the
//! high-water mark has been since the last reset.
//!
//! Accounting is exact rather than sampled: `live_bytes` returns to its prior
//! value once every buffer allocated after a snapshot has been dropped.
//! Counters are atomics, so concurrent readers are safe; for the peak value
//! to be reproducible run-to-run, all tracked allocations are made on the
//! thread orchestrating a step (worker threads only fill buffers that are
//! already allocated — this is a crate-wide convention, see the module docs
//! of [`tensor`](crate::tensor)).
//!
//! An optional soft limit supports out-of-memory simulation in benchmark
//! sweeps: when a tracked allocation would push `live_bytes` past the limit,
//! the allocation panics with a recognizable message that the sweep runner
//! catches and records as a failed cell.

use std::sync::atomic::{AtomicU64, Ordering};

static LIVE_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);
/// 0 means "no limit".
static LIMIT_BYTES: AtomicU64 = AtomicU64::new(0);

/// Panic message prefix used when the soft allocation limit is exceeded.
/// The benchmark runner matches on this to classify a cell as out-of-memory.
pub const LIMIT_PANIC: &str = "tracked allocation limit exceeded";

/// Snapshot of the tracked-memory counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Bytes currently held by live tracked buffers.
    pub live_bytes: u64,
    /// High-water mark of `live_bytes` since the last [`reset_peak`].
    pub peak_bytes: u64,
}

/// Current counter values.
pub fn stats() -> AllocStats {
    AllocStats {
        live_bytes: LIVE_BYTES.load(Ordering::SeqCst),
        peak_bytes: PEAK_BYTES.load(Ordering::SeqCst),
    }
}

/// Reset the high-water mark to the current live byte count.
pub fn reset_peak() {
    let live = LIVE_BYTES.load(Ordering::SeqCst);
    PEAK_BYTES.store(live, Ordering::SeqCst);
}

/// Install (or clear, with `None`) the soft allocation limit.
///
/// This is a test and benchmark hook: a tracked allocation that would push
/// live bytes past the limit panics with [`LIMIT_PANIC`].
pub fn set_limit(limit: Option<u64>) {
    LIMIT_BYTES.store(limit.unwrap_or(0), Ordering::SeqCst);
}

fn on_alloc(bytes: u64) {
    let limit = LIMIT_BYTES.load(Ordering::SeqCst);
    let new_live = LIVE_BYTES.fetch_add(bytes, Ordering::SeqCst) + bytes;
    if limit != 0 && new_live > limit {
        // Roll back before unwinding so a caught panic leaves the books
        // balanced.
        LIVE_BYTES.fetch_sub(bytes, Ordering::SeqCst);
        panic!("{LIMIT_PANIC}: {new_live} > {limit} bytes");
    }
    PEAK_BYTES.fetch_max(new_live, Ordering::SeqCst);
}

fn on_free(bytes: u64) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::SeqCst);
}

/// A `Vec<T>` whose byte footprint is registered with the global counters
/// for as long as it is alive.
///
/// The registered size is `len * size_of::<T>()` at construction time; the
/// vector must not grow afterwards (all tensor buffers are fixed-size). The
/// type deliberately exposes only slice access.
#[derive(Debug)]
pub struct TrackedVec<T: Copy> {
    data: Vec<T>,
    bytes: u64,
}

impl<T: Copy> TrackedVec<T> {
    /// Allocate a tracked buffer of `len` copies of `fill`.
    pub fn filled(fill: T, len: usize) -> Self {
        let bytes = (len * std::mem::size_of::<T>()) as u64;
        on_alloc(bytes);
        TrackedVec { data: vec![fill; len], bytes }
    }

    /// Take ownership of an existing vector and start tracking it.
    pub fn from_vec(data: Vec<T>) -> Self {
        let bytes = (data.len() * std::mem::size_of::<T>()) as u64;
        on_alloc(bytes);
        TrackedVec { data, bytes }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Copy> Clone for TrackedVec<T> {
    fn clone(&self) -> Self {
        TrackedVec::from_vec(self.data.clone())
    }
}

impl<T: Copy> Drop for TrackedVec<T> {
    fn drop(&mut self) {
        on_free(self.bytes);
    }
}

impl<T: Copy> std::ops::Index<usize> for TrackedVec<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Copy> std::ops::IndexMut<usize> for TrackedVec<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}
