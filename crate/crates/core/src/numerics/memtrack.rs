//! Byte counter for tensor storage.
//!
//! Every tensor buffer reports its size here on creation and on drop. The
//! counters are thread-local: a measurement only sees buffers allocated on
//! the thread that takes it, so concurrently running code does not pollute
//! the peak.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    CURRENT.with(|cur| {
        let now = cur.get() + bytes;
        cur.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|cur| cur.set(cur.get().saturating_sub(bytes)));
}

/// Bytes of tensor storage currently live on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// Highest value of [`current_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Sets the peak to the current live byte count.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|peak| peak.set(now));
}

/// Runs `f` and returns its result with the peak number of tensor bytes
/// that were live above the starting baseline.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = current_bytes();
    reset_peak();
    let out = f();
    (out, peak_bytes().saturating_sub(base))
}
