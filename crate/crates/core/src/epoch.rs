//! Epoch-based deferred reclamation.
//!
//! Every accessor pins a slot with the epoch it observed on entry. A resource
//! retired while the global epoch was `r` is reclaimed only once every pinned
//! slot carries an epoch greater than `r`; such accessors started after the
//! resource became unreachable and cannot hold a reference to it.
//!
//! The global epoch also serves as the clock for notice timeouts.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};

use crossbeam_queue::SegQueue;

const INACTIVE: u64 = u64::MAX;
const PINNING: u64 = u64::MAX - 1;
const DEFAULT_SLOTS: usize = 512;

/// A deferred reclamation action.
pub struct Deferred(Box<dyn FnOnce() + Send>);

impl Deferred {
    pub fn new(f: impl FnOnce() + Send + 'static) -> Deferred {
        Deferred(Box::new(f))
    }

    fn run(self) {
        (self.0)()
    }
}

struct Retired {
    epoch: u64,
    item: Deferred,
}

#[repr(align(64))]
struct Slot(AtomicU64);

pub struct EpochManager {
    current: AtomicU64,
    slots: Box<[Slot]>,
    retired: SegQueue<Retired>,
    draining: AtomicBool,
    deferred_total: AtomicU64,
    reclaimed_total: AtomicU64,
    drains: AtomicU64,
}

impl Default for EpochManager {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static SLOT_HINT: usize = {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        NEXT.fetch_add(7, Ordering::Relaxed)
    };
}

impl EpochManager {
    pub fn new() -> EpochManager {
        Self::with_slots(DEFAULT_SLOTS)
    }

    pub fn with_slots(n: usize) -> EpochManager {
        let slots = (0..n.max(1)).map(|_| Slot(AtomicU64::new(INACTIVE))).collect();
        EpochManager {
            current: AtomicU64::new(1),
            slots,
            retired: SegQueue::new(),
            draining: AtomicBool::new(false),
            deferred_total: AtomicU64::new(0),
            reclaimed_total: AtomicU64::new(0),
            drains: AtomicU64::new(0),
        }
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    /// Pins the calling accessor to the current epoch.
    pub fn enter(&self) -> EpochGuard<'_> {
        let n = self.slots.len();
        let start = SLOT_HINT.with(|h| *h) % n;
        let mut i = start;
        let slot = loop {
            let s = &self.slots[i].0;
            if s.load(Ordering::Relaxed) == INACTIVE
                && s.compare_exchange(INACTIVE, PINNING, Ordering::SeqCst, Ordering::Relaxed).is_ok()
            {
                break i;
            }
            i = (i + 1) % n;
            if i == start {
                // every slot pinned; wait for one to free up
                std::thread::yield_now();
            }
        };
        let s = &self.slots[slot].0;
        let epoch = loop {
            let e = self.current.load(Ordering::SeqCst);
            s.store(e, Ordering::SeqCst);
            if self.current.load(Ordering::SeqCst) == e {
                break e;
            }
        };
        EpochGuard { mgr: self, slot, epoch }
    }

    /// Queues `item` until no accessor that might still see the resource
    /// remains pinned. The resource must already be unreachable.
    pub fn defer_free(&self, item: Deferred, _guard: &EpochGuard<'_>) {
        self.defer_unguarded(item);
    }

    pub(crate) fn defer_unguarded(&self, item: Deferred) {
        let epoch = self.current.load(Ordering::SeqCst);
        self.deferred_total.fetch_add(1, Ordering::Relaxed);
        self.retired.push(Retired { epoch, item });
    }

    /// Increments the epoch and drains whatever became reclaimable.
    pub fn advance(&self) -> u64 {
        let e = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.drain();
        e
    }

    /// Reclaims every queued resource that no pinned accessor can reach.
    /// Single-winner: a concurrent caller returns 0 immediately.
    pub fn drain(&self) -> usize {
        if self
            .draining
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            return 0;
        }
        // Snapshot the queue before scanning slots: anything pushed later may
        // have been unlinked after an accessor pinned.
        let mut batch = Vec::new();
        while let Some(r) = self.retired.pop() {
            batch.push(r);
        }
        let min_active = self.min_active();
        let mut ready = Vec::new();
        for r in batch {
            if r.epoch < min_active {
                ready.push(r.item);
            } else {
                self.retired.push(r);
            }
        }
        self.drains.fetch_add(1, Ordering::Relaxed);
        self.draining.store(false, Ordering::Release);
        let n = ready.len();
        for item in ready {
            item.run();
        }
        self.reclaimed_total.fetch_add(n as u64, Ordering::Relaxed);
        n
    }

    fn min_active(&self) -> u64 {
        let mut min = INACTIVE;
        for s in self.slots.iter() {
            match s.0.load(Ordering::SeqCst) {
                INACTIVE => {}
                PINNING => return 0,
                e => min = min.min(e),
            }
        }
        min
    }

    pub fn active_guards(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.0.load(Ordering::SeqCst) != INACTIVE)
            .count()
    }

    pub fn pending(&self) -> usize {
        self.retired.len()
    }

    pub fn deferred_total(&self) -> u64 {
        self.deferred_total.load(Ordering::Relaxed)
    }

    pub fn reclaimed_total(&self) -> u64 {
        self.reclaimed_total.load(Ordering::Relaxed)
    }
}

impl Drop for EpochManager {
    fn drop(&mut self) {
        while let Some(r) = self.retired.pop() {
            r.item.run();
        }
    }
}

/// Pin on the epoch observed at entry. Released on drop.
pub struct EpochGuard<'a> {
    mgr: &'a EpochManager,
    slot: usize,
    epoch: u64,
}

impl EpochGuard<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn manager(&self) -> &EpochManager {
        self.mgr
    }
}

impl Drop for EpochGuard<'_> {
    fn drop(&mut self) {
        self.mgr.slots[self.slot].0.store(INACTIVE, Ordering::SeqCst);
    }
}
