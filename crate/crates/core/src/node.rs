//! Chain nodes. A node holds its link and its payload in one allocation.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::epoch::{Deferred, EpochGuard, EpochManager};
use crate::model::{BasePage, Delta, FrameHalf, Key, PageId, StorageLocation};

pub(crate) const LIVE: u64 = 0x4c49_5645_4c49_5645;
pub(crate) const POISON: u64 = 0xdead_beef_dead_beef;

/// Chain tail standing in for a page image on storage. Carries the routing
/// metadata so blind updates never need the image.
#[derive(Clone, Debug)]
pub struct Stub {
    pub loc: StorageLocation,
    pub half: FrameHalf,
    pub is_leaf: bool,
    pub high_key: Option<Key>,
    pub side_link: Option<PageId>,
}

pub(crate) enum Body {
    Delta(Delta),
    /// A base page, plus the location of an identical image on storage when
    /// the page is clean.
    Base(BasePage, Option<(StorageLocation, FrameHalf)>),
    Stub(Stub),
}

pub struct Node {
    pub(crate) next: AtomicPtr<Node>,
    canary: AtomicU64,
    pub(crate) body: Body,
}

impl Node {
    pub(crate) fn new(body: Body) -> Node {
        Node { next: AtomicPtr::new(std::ptr::null_mut()), canary: AtomicU64::new(LIVE), body }
    }

    pub(crate) fn boxed(body: Body) -> *mut Node {
        Box::into_raw(Box::new(Node::new(body)))
    }

    pub(crate) fn delta(&self) -> Option<&Delta> {
        match &self.body {
            Body::Delta(d) => Some(d),
            _ => None,
        }
    }

    pub(crate) fn next_ptr(&self) -> *mut Node {
        self.next.load(Ordering::Acquire)
    }

    pub(crate) fn is_poisoned(&self) -> bool {
        self.canary.load(Ordering::Relaxed) == POISON
    }
}

/// Sentinel stored in a mapping entry between retirement and reclamation.
pub(crate) const RETIRED: *mut Node = std::ptr::without_provenance_mut(1);

pub(crate) fn is_real(p: *mut Node) -> bool {
    !p.is_null() && p != RETIRED
}

/// Raw pointer that may cross threads inside deferred closures.
#[derive(Clone, Copy)]
pub(crate) struct SendPtr(pub *mut Node);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

/// Frees nodes, or poisons and quarantines them when poison checking is on.
pub(crate) struct NodeReclaimer {
    poison: bool,
    quarantine: Mutex<Vec<SendPtr>>,
    poison_reads: AtomicU64,
    freed: AtomicU64,
    digest_check: AtomicBool,
    digest_mismatches: AtomicU64,
    digests: Mutex<std::collections::HashMap<usize, u64>>,
}

impl NodeReclaimer {
    pub(crate) fn new(poison: bool) -> NodeReclaimer {
        NodeReclaimer {
            poison,
            quarantine: Mutex::new(Vec::new()),
            poison_reads: AtomicU64::new(0),
            freed: AtomicU64::new(0),
            digest_check: AtomicBool::new(false),
            digest_mismatches: AtomicU64::new(0),
            digests: Mutex::new(Default::default()),
        }
    }

    /// Dereferences a chain pointer for the lifetime of `guard`, counting any
    /// access to poisoned memory.
    ///
    /// # Safety
    /// `p` must be a real node pointer obtained from a mapping entry or a
    /// chain link while `guard` was held.
    pub(crate) unsafe fn deref<'g>(&self, p: *mut Node, _guard: &'g EpochGuard<'_>) -> &'g Node {
        let n = &*p;
        if self.poison && n.is_poisoned() {
            self.poison_reads.fetch_add(1, Ordering::Relaxed);
        }
        n
    }

    pub(crate) fn poison_reads(&self) -> u64 {
        self.poison_reads.load(Ordering::Relaxed)
    }

    pub(crate) fn freed(&self) -> u64 {
        self.freed.load(Ordering::Relaxed)
    }

    pub(crate) fn enable_digest_check(&self) {
        self.digest_check.store(true, Ordering::SeqCst);
    }

    pub(crate) fn digest_mismatches(&self) -> u64 {
        self.digest_mismatches.load(Ordering::Relaxed)
    }

    /// Records a delta's digest at publication when digest checking is on.
    pub(crate) fn on_publish(&self, p: *mut Node) {
        if !self.digest_check.load(Ordering::Relaxed) {
            return;
        }
        let n = unsafe { &*p };
        if let Body::Delta(d) = &n.body {
            self.digests.lock().insert(p as usize, d.digest());
        }
    }

    fn on_reclaim(&self, n: &Node, p: *mut Node) {
        if !self.digest_check.load(Ordering::Relaxed) {
            return;
        }
        if let Body::Delta(d) = &n.body {
            if let Some(expected) = self.digests.lock().remove(&(p as usize)) {
                if expected != d.digest() {
                    self.digest_mismatches.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    /// # Safety
    /// `p` must be unreachable by every accessor and freed at most once.
    pub(crate) unsafe fn reclaim_node(&self, p: *mut Node) {
        let n = &*p;
        self.on_reclaim(n, p);
        self.freed.fetch_add(1, Ordering::Relaxed);
        if self.poison {
            n.canary.store(POISON, Ordering::Relaxed);
            self.quarantine.lock().push(SendPtr(p));
        } else {
            drop(Box::from_raw(p));
        }
    }

    /// Frees the run of nodes from `start` following `next` until the end or
    /// `stop`. The walk happens at reclamation time, after every thread that
    /// could have relinked part of the run has unpinned.
    ///
    /// # Safety
    /// The run must be unreachable and owned by the caller.
    pub(crate) unsafe fn reclaim_run(&self, start: *mut Node, stop: *mut Node) {
        let mut p = start;
        while is_real(p) && p != stop {
            let next = (*p).next.load(Ordering::Acquire);
            self.reclaim_node(p);
            p = next;
        }
    }
}

impl Drop for NodeReclaimer {
    fn drop(&mut self) {
        for p in self.quarantine.get_mut().drain(..) {
            unsafe { drop(Box::from_raw(p.0)) };
        }
    }
}

/// Defers freeing a run of nodes (`start` up to `stop`, exclusive).
pub(crate) fn retire_run(
    epoch: &EpochManager,
    reclaimer: &Arc<NodeReclaimer>,
    start: *mut Node,
    stop: *mut Node,
) {
    if !is_real(start) {
        return;
    }
    let r = reclaimer.clone();
    let (s, e) = (SendPtr(start), SendPtr(stop));
    epoch.defer_unguarded(Deferred::new(move || {
        let (s, e) = (s, e);
        unsafe { r.reclaim_run(s.0, e.0) }
    }));
}

/// Defers freeing exactly one node.
pub(crate) fn retire_node(epoch: &EpochManager, reclaimer: &Arc<NodeReclaimer>, p: *mut Node) {
    if !is_real(p) {
        return;
    }
    let r = reclaimer.clone();
    let s = SendPtr(p);
    epoch.defer_unguarded(Deferred::new(move || {
        let s = s;
        unsafe { r.reclaim_node(s.0) }
    }));
}

/// Frees every node reachable from the given heads, each once. Used at
/// teardown when no accessor remains.
///
/// # Safety
/// No other thread may access the nodes.
pub(crate) unsafe fn free_all(heads: impl Iterator<Item = *mut Node>, reclaimer: &NodeReclaimer) {
    let mut seen: HashSet<usize> = HashSet::new();
    for head in heads {
        let mut p = head;
        while is_real(p) && seen.insert(p as usize) {
            let next = (*p).next.load(Ordering::Acquire);
            if !(*p).is_poisoned() {
                reclaimer.on_reclaim(&*p, p);
                drop(Box::from_raw(p));
            }
            p = next;
        }
    }
}
