//! Per-thread operation counters incremented by the forward kernels.
//!
//! Only forward computation is counted. A multiply-add is counted once per
//! executed multiply-accumulate; softmax and normalization layers add
//! [`ELEMENTWISE_FLOPS`] per element they normalize. Backward kernels,
//! ReLU, residual adds and gathers are not counted.

use std::cell::Cell;

/// Flops charged per element by softmax, layer norm and batch norm.
pub const ELEMENTWISE_FLOPS: u64 = 5;

thread_local! {
    static MADDS: Cell<u64> = const { Cell::new(0) };
    static ELEMENTWISE: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub madds: u64,
    pub elementwise_flops: u64,
}

pub fn reset() {
    MADDS.with(|c| c.set(0));
    ELEMENTWISE.with(|c| c.set(0));
}

pub fn snapshot() -> OpCount {
    OpCount {
        madds: MADDS.with(Cell::get),
        elementwise_flops: ELEMENTWISE.with(Cell::get),
    }
}

pub(crate) fn add_madds(n: u64) {
    MADDS.with(|c| c.set(c.get() + n));
}

/// Charge `elements` normalized elements.
pub(crate) fn add_elementwise(elements: u64) {
    ELEMENTWISE.with(|c| c.set(c.get() + elements * ELEMENTWISE_FLOPS));
}

/// Run `f` with fresh counters and return what it executed.
///
/// Counters of the enclosing scope are restored (and incremented) afterwards.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCount) {
    let outer = snapshot();
    reset();
    let out = f();
    let inner = snapshot();
    MADDS.with(|c| c.set(outer.madds + inner.madds));
    ELEMENTWISE.with(|c| c.set(outer.elementwise_flops + inner.elementwise_flops));
    (out, inner)
}
