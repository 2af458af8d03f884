//! Shared worker pool for intra-operator parallelism.
//!
//! `MATFREE_THREADS` caps the pool size (default: all available cores).
//! Results never depend on the pool size: every parallel pass writes
//! exclusively owned output slots and every reduction has a fixed shape, so
//! reruns are bitwise identical for any thread count.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn configured_threads() -> usize {
    match std::env::var("MATFREE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(configured_threads())
            .thread_name(|i| format!("matfree-{i}"))
            .build()
            .expect("worker pool construction cannot fail with a positive thread count")
    })
}

/// Serial cutoff: passes with fewer work items than this skip the pool.
/// Purely a latency optimization; the summation order is identical either way.
pub const PAR_THRESHOLD: usize = 8192;

/// Runs `body` on chunk `[start, end)` ranges covering `0..n`, in parallel when
/// worthwhile. `body` must only write state it exclusively owns for its range.
pub fn for_each_range<F>(n: usize, chunk: usize, body: F)
where
    F: Fn(usize, usize) + Send + Sync,
{
    for_each_range_weighted(n, 1, chunk, body)
}

/// Like [`for_each_range`] for passes whose items are heavier than one flop
/// each: the serial cutoff compares `n * item_weight` against the threshold,
/// so a pass of few-but-heavy groups still reaches the pool.
pub fn for_each_range_weighted<F>(n: usize, item_weight: usize, chunk: usize, body: F)
where
    F: Fn(usize, usize) + Send + Sync,
{
    if n == 0 {
        return;
    }
    if n.saturating_mul(item_weight.max(1)) < PAR_THRESHOLD || configured_threads() == 1 {
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            body(start, end);
            start = end;
        }
    } else {
        use rayon::prelude::*;
        let ranges: Vec<(usize, usize)> = (0..n.div_ceil(chunk))
            .map(|i| (i * chunk, ((i + 1) * chunk).min(n)))
            .collect();
        pool().install(|| {
            ranges.par_iter().for_each(|&(s, e)| body(s, e));
        });
    }
}

/// Shared mutable output for scatter passes whose write sets are disjoint by
/// construction (one writer per slot, validated by the plan audits in tests).
pub struct ExclusiveSlots<'a, S> {
    ptr: *mut S,
    len: usize,
    _marker: std::marker::PhantomData<&'a mut [S]>,
}

// SAFETY: every write targets a slot owned by exactly one work item (the
// schedule audits in operator::plan prove disjointness), so concurrent use
// never aliases a slot.
unsafe impl<S: Send> Sync for ExclusiveSlots<'_, S> {}
unsafe impl<S: Send> Send for ExclusiveSlots<'_, S> {}

impl<'a, S> ExclusiveSlots<'a, S> {
    pub fn new(slice: &'a mut [S]) -> Self {
        Self {
            ptr: slice.as_mut_ptr(),
            len: slice.len(),
            _marker: std::marker::PhantomData,
        }
    }

    /// # Safety
    /// The caller must guarantee `idx < len` and that no other work item
    /// writes `idx` during the same pass.
    #[inline(always)]
    pub unsafe fn write(&self, idx: usize, value: S) {
        debug_assert!(idx < self.len);
        unsafe { *self.ptr.add(idx) = value }
    }
}
