//! In-memory write buffer with fetch-and-add space reservation.
//!
//! The whole buffer state lives in one word: the reserve offset in the high
//! half and the number of outstanding holds in the low half. A reservation is
//! a single `fetch_add(size << 32 | 1)`. The reservation that first pushes
//! the offset past capacity seals the buffer; whoever drops the hold count to
//! zero on a sealed buffer flushes it.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::StorageLocation;

use super::format::FILE_HEADER_LEN;

const HOLD_MASK: u64 = 0xffff_ffff;
const NOT_SEALED: u64 = u64::MAX;

pub struct LogBuffer {
    pub(crate) segment: u64,
    capacity: u64,
    state: AtomicU64,
    sealed_end: AtomicU64,
    flushed: AtomicBool,
    frames: AtomicU64,
    data: UnsafeCell<Box<[u8]>>,
}

// Reservations write disjoint ranges of `data`; the flush reads it only after
// every hold has been released.
unsafe impl Sync for LogBuffer {}
unsafe impl Send for LogBuffer {}

pub(crate) enum ReserveOutcome {
    Granted(u64),
    /// The buffer is (now) sealed; `released_last` is true when this call's
    /// own hold release left the sealed buffer without holds.
    Full { released_last: bool },
}

impl LogBuffer {
    pub(crate) fn new(segment: u64, capacity: usize) -> LogBuffer {
        LogBuffer {
            segment,
            capacity: capacity as u64,
            state: AtomicU64::new(0),
            sealed_end: AtomicU64::new(NOT_SEALED),
            flushed: AtomicBool::new(false),
            frames: AtomicU64::new(0),
            data: UnsafeCell::new(vec![0u8; capacity].into_boxed_slice()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity as usize
    }

    pub fn segment(&self) -> u64 {
        self.segment
    }

    pub fn reserve_offset(&self) -> u64 {
        self.state.load(Ordering::SeqCst) >> 32
    }

    pub fn holds(&self) -> u64 {
        self.state.load(Ordering::SeqCst) & HOLD_MASK
    }

    pub fn is_sealed(&self) -> bool {
        self.reserve_offset() > self.capacity
    }

    /// Byte length of valid data once sealed.
    pub(crate) fn sealed_end(&self) -> Option<u64> {
        let e = self.sealed_end.load(Ordering::SeqCst);
        (e != NOT_SEALED).then_some(e)
    }

    pub(crate) fn try_reserve(&self, size: u64) -> ReserveOutcome {
        debug_assert!(size > 0);
        let prev = self.state.fetch_add((size << 32) | 1, Ordering::SeqCst);
        let off = prev >> 32;
        if off + size <= self.capacity {
            return ReserveOutcome::Granted(off);
        }
        if off <= self.capacity {
            // first reservation past the end: seal at our own start
            self.sealed_end.store(off, Ordering::SeqCst);
        }
        ReserveOutcome::Full { released_last: self.drop_hold() }
    }

    /// Seals the buffer unless it is already sealed. Returns true when the
    /// caller's hold was the last one, i.e. the caller must flush.
    pub(crate) fn force_seal(&self) -> bool {
        match self.try_reserve(self.capacity + 1) {
            ReserveOutcome::Granted(_) => unreachable!("oversized reservation granted"),
            ReserveOutcome::Full { released_last } => released_last,
        }
    }

    /// Returns true if this release left a sealed buffer without holds.
    pub(crate) fn drop_hold(&self) -> bool {
        let prev = self.state.fetch_sub(1, Ordering::SeqCst);
        debug_assert!(prev & HOLD_MASK > 0);
        prev & HOLD_MASK == 1 && (prev >> 32) > self.capacity
    }

    /// Claims the right to flush; true exactly once.
    pub(crate) fn claim_flush(&self) -> bool {
        self.sealed_end().is_some()
            && self
                .flushed
                .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
    }

    pub fn is_flushed(&self) -> bool {
        self.flushed.load(Ordering::SeqCst)
    }

    pub(crate) fn count_frames(&self, n: u64) {
        self.frames.fetch_add(n, Ordering::Relaxed);
    }

    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    /// # Safety
    /// The range must belong to a reservation held by the caller.
    #[allow(clippy::mut_from_ref)]
    unsafe fn range_mut(&self, off: u64, len: u64) -> &mut [u8] {
        let base = (*self.data.get()).as_mut_ptr();
        std::slice::from_raw_parts_mut(base.add(off as usize), len as usize)
    }

    /// # Safety
    /// The range must be fully written and not concurrently written.
    pub(crate) unsafe fn range(&self, off: u64, len: u64) -> &[u8] {
        let base = (*self.data.get()).as_ptr();
        std::slice::from_raw_parts(base.add(off as usize), len as usize)
    }
}

const HELD: u8 = 0;
const WRITING: u8 = 1;
const RELEASED: u8 = 2;

/// An exclusive byte range in a buffer. Holding it keeps the buffer from
/// being flushed.
pub struct Reservation {
    pub(crate) buffer: Arc<LogBuffer>,
    pub(crate) offset: u64,
    pub(crate) size: u64,
    state: AtomicU8,
}

impl std::fmt::Debug for Reservation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reservation")
            .field("segment", &self.buffer.segment)
            .field("offset", &self.offset)
            .field("size", &self.size)
            .finish()
    }
}

impl Reservation {
    pub(crate) fn new(buffer: Arc<LogBuffer>, offset: u64, size: u64) -> Reservation {
        Reservation { buffer, offset, size, state: AtomicU8::new(HELD) }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn segment(&self) -> u64 {
        self.buffer.segment
    }

    pub fn location(&self) -> StorageLocation {
        StorageLocation {
            segment: self.buffer.segment,
            offset: FILE_HEADER_LEN as u64 + self.offset,
            length: self.size as u32,
        }
    }

    /// Takes exclusive ownership of the range for writing. Exactly one
    /// caller wins; used when several threads may complete the same split.
    pub fn claim(&self) -> bool {
        self.state.compare_exchange(HELD, WRITING, Ordering::SeqCst, Ordering::SeqCst).is_ok()
    }

    pub fn is_released(&self) -> bool {
        self.state.load(Ordering::SeqCst) == RELEASED
    }

    /// Mutable view of the reserved range. Only the claimer may call this.
    #[allow(clippy::mut_from_ref)]
    pub(crate) fn bytes_mut(&self) -> &mut [u8] {
        debug_assert_eq!(self.state.load(Ordering::SeqCst), WRITING);
        unsafe { self.buffer.range_mut(self.offset, self.size) }
    }

    /// Marks the reservation released. Errors on a second release.
    pub(crate) fn mark_released(&self) -> Result<()> {
        let prev = self.state.swap(RELEASED, Ordering::SeqCst);
        if prev == RELEASED {
            return Err(Error::DoubleRelease);
        }
        Ok(())
    }
}
