//! The mapping table: the only path from a [`PageId`] to page state.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crossbeam_queue::SegQueue;

use crate::epoch::{Deferred, EpochGuard, EpochManager};
use crate::error::{Error, Result};
use crate::model::{PageId, StorageLocation};
use crate::node::{self, Body, Node, NodeReclaimer, RETIRED};

const FREE: u8 = 0;
const LIVE: u8 = 1;
const RETIRING: u8 = 2;

pub const DEFAULT_CAPACITY: usize = 1 << 20;

/// Snapshot of a mapping entry, valid while the guard it was read under is
/// held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryHandle<'g> {
    Unmapped,
    InMemory(ChainHead<'g>),
    OnStorage(StorageLocation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainHead<'g> {
    ptr: *mut Node,
    _guard: PhantomData<&'g ()>,
}

pub struct MappingTable {
    entries: Box<[AtomicPtr<Node>]>,
    states: Box<[AtomicU8]>,
    next_fresh: AtomicU64,
    free: SegQueue<PageId>,
    double_retires: AtomicU64,
    successful_installs: AtomicU64,
}

impl MappingTable {
    pub fn new(capacity: usize) -> MappingTable {
        assert!(capacity >= 2, "mapping table needs room for the root and one page");
        let entries = (0..capacity).map(|_| AtomicPtr::new(std::ptr::null_mut())).collect();
        let states: Box<[AtomicU8]> = (0..capacity).map(|_| AtomicU8::new(FREE)).collect();
        states[0].store(LIVE, Ordering::Relaxed);
        MappingTable {
            entries,
            states,
            next_fresh: AtomicU64::new(1),
            free: SegQueue::new(),
            double_retires: AtomicU64::new(0),
            successful_installs: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    /// Hands out an unused slot whose entry is Unmapped.
    pub fn allocate_page(&self) -> Result<PageId> {
        if let Some(id) = self.free.pop() {
            self.states[id.index()].store(LIVE, Ordering::SeqCst);
            return Ok(id);
        }
        let mut cur = self.next_fresh.load(Ordering::Relaxed);
        loop {
            if cur as usize >= self.entries.len() {
                return Err(Error::CapacityExhausted);
            }
            match self.next_fresh.compare_exchange_weak(cur, cur + 1, Ordering::SeqCst, Ordering::Relaxed) {
                Ok(_) => break,
                Err(v) => cur = v,
            }
        }
        self.states[cur as usize].store(LIVE, Ordering::SeqCst);
        Ok(PageId(cur))
    }

    /// Marks a recovered page id as live (recovery only; single-threaded).
    pub(crate) fn claim_recovered(&self, id: PageId) {
        self.states[id.index()].store(LIVE, Ordering::SeqCst);
        let fresh = self.next_fresh.load(Ordering::SeqCst);
        if id.0 >= fresh {
            self.next_fresh.store(id.0 + 1, Ordering::SeqCst);
        }
    }

    /// Pushes every never-claimed id below the high-water mark onto the free
    /// list (recovery only).
    pub(crate) fn finish_recovery(&self) {
        let fresh = self.next_fresh.load(Ordering::SeqCst);
        for i in 1..fresh {
            if self.states[i as usize].load(Ordering::SeqCst) == FREE {
                self.free.push(PageId(i));
            }
        }
    }

    fn check(&self, id: PageId) -> Result<()> {
        if id.index() >= self.entries.len() || self.states[id.index()].load(Ordering::SeqCst) == FREE {
            return Err(Error::UnknownPage(id));
        }
        Ok(())
    }

    pub fn is_live(&self, id: PageId) -> bool {
        id.index() < self.entries.len() && self.states[id.index()].load(Ordering::SeqCst) == LIVE
    }

    /// Raw head pointer; null for Unmapped, [`RETIRED`] for a retired slot.
    pub(crate) fn head(&self, id: PageId) -> Result<*mut Node> {
        self.check(id)?;
        Ok(self.entries[id.index()].load(Ordering::Acquire))
    }

    pub fn read_entry<'g>(&self, id: PageId, guard: &'g EpochGuard<'_>) -> Result<EntryHandle<'g>> {
        let p = self.head(id)?;
        let _ = guard;
        if p.is_null() {
            return Ok(EntryHandle::Unmapped);
        }
        if p == RETIRED {
            return Err(Error::PageRetired(id));
        }
        // SAFETY: the pointer came from the entry while the guard is held.
        let n = unsafe { &*p };
        Ok(match &n.body {
            Body::Stub(s) => EntryHandle::OnStorage(s.loc),
            _ => EntryHandle::InMemory(ChainHead { ptr: p, _guard: PhantomData }),
        })
    }

    /// Single-winner conditional replacement of an entry.
    pub(crate) fn install(&self, id: PageId, expected: *mut Node, new: *mut Node) -> bool {
        let ok = self.entries[id.index()]
            .compare_exchange(expected, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok();
        if ok {
            self.successful_installs.fetch_add(1, Ordering::Relaxed);
        }
        ok
    }

    /// Unconditional store used while the table is not shared (recovery,
    /// open).
    pub(crate) fn store_initial(&self, id: PageId, p: *mut Node) {
        self.entries[id.index()].store(p, Ordering::Release);
    }

    /// Unlinks the page and queues its slot for recycling once no accessor
    /// can still hold its id. The chain reachable from the entry is freed
    /// with it. Retiring an already retired page is a counted no-op.
    pub(crate) fn retire_page(
        self: &Arc<Self>,
        id: PageId,
        epoch: &EpochManager,
        reclaimer: &Arc<NodeReclaimer>,
    ) -> Result<*mut Node> {
        if id.index() >= self.entries.len() {
            return Err(Error::UnknownPage(id));
        }
        if self.states[id.index()]
            .compare_exchange(LIVE, RETIRING, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            if self.states[id.index()].load(Ordering::SeqCst) == FREE && id.0 >= self.next_fresh.load(Ordering::SeqCst) {
                return Err(Error::UnknownPage(id));
            }
            self.double_retires.fetch_add(1, Ordering::Relaxed);
            return Ok(std::ptr::null_mut());
        }
        let old = self.entries[id.index()].swap(RETIRED, Ordering::AcqRel);
        node::retire_run(epoch, reclaimer, old, std::ptr::null_mut());
        let table = self.clone();
        epoch.defer_unguarded(Deferred::new(move || {
            table.entries[id.index()].store(std::ptr::null_mut(), Ordering::Release);
            table.states[id.index()].store(FREE, Ordering::SeqCst);
            table.free.push(id);
        }));
        Ok(old)
    }

    pub fn double_retires(&self) -> u64 {
        self.double_retires.load(Ordering::Relaxed)
    }

    pub fn successful_installs(&self) -> u64 {
        self.successful_installs.load(Ordering::Relaxed)
    }

    /// Number of ids ever handed out (exclusive upper bound on live ids).
    pub fn high_water(&self) -> u64 {
        self.next_fresh.load(Ordering::SeqCst)
    }

    pub(crate) fn raw_entries(&self) -> impl Iterator<Item = (PageId, *mut Node)> + '_ {
        self.entries
            .iter()
            .take(self.high_water() as usize)
            .enumerate()
            .map(|(i, e)| (PageId(i as u64), e.load(Ordering::Acquire)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BasePage, Delta, Key, Record, Value};
    use std::collections::HashSet;
    use std::sync::Barrier;

    fn base_node() -> *mut Node {
        Node::boxed(Body::Base(BasePage::empty_leaf(), None))
    }

    fn put_node(k: &str) -> *mut Node {
        Node::boxed(Body::Delta(Delta::put(Record::new(Key::try_from(k).unwrap(), Value::from("v")))))
    }

    fn env(cap: usize) -> (Arc<MappingTable>, EpochManager, Arc<NodeReclaimer>) {
        (Arc::new(MappingTable::new(cap)), EpochManager::new(), Arc::new(NodeReclaimer::new(false)))
    }

    #[test]
    fn first_allocation_is_one_and_unmapped() {
        let (t, e, _) = env(16);
        let id = t.allocate_page().unwrap();
        assert_eq!(id, PageId(1));
        let g = e.enter();
        assert_eq!(t.read_entry(id, &g).unwrap(), EntryHandle::Unmapped);
    }

    #[test]
    fn exhaustion_boundary() {
        let (t, _, _) = env(5);
        for _ in 0..4 {
            t.allocate_page().unwrap();
        }
        assert!(matches!(t.allocate_page(), Err(Error::CapacityExhausted)));
    }

    #[test]
    fn unknown_page_read() {
        let (t, e, _) = env(8);
        let g = e.enter();
        assert!(matches!(t.read_entry(PageId(3), &g), Err(Error::UnknownPage(_))));
        assert!(matches!(t.read_entry(PageId(99), &g), Err(Error::UnknownPage(_))));
    }

    #[test]
    fn concurrent_allocations_are_distinct() {
        let (t, _, _) = env(9000);
        let ids: Vec<Vec<PageId>> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8)
                .map(|_| s.spawn(|| (0..1000).map(|_| t.allocate_page().unwrap()).collect::<Vec<_>>()))
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let set: HashSet<PageId> = ids.into_iter().flatten().collect();
        assert_eq!(set.len(), 8000);
    }

    #[test]
    fn install_expected_and_stale() {
        let (t, e, r) = env(8);
        let id = t.allocate_page().unwrap();
        let b = base_node();
        assert!(t.install(id, std::ptr::null_mut(), b));
        let g = e.enter();
        match t.read_entry(id, &g).unwrap() {
            EntryHandle::InMemory(h) => assert_eq!(h.ptr, b),
            other => panic!("{other:?}"),
        }
        let d = put_node("a");
        assert!(!t.install(id, std::ptr::null_mut(), d), "stale expected must fail");
        assert_eq!(t.head(id).unwrap(), b);
        unsafe {
            r.reclaim_node(d);
        }
        drop(g);
        t.retire_page(id, &e, &r).unwrap();
        e.advance();
    }

    #[test]
    fn sixteen_racers_one_winner() {
        let (t, e, r) = env(8);
        let id = t.allocate_page().unwrap();
        for _ in 0..200 {
            let expected = t.head(id).unwrap() as usize;
            let barrier = Barrier::new(16);
            let wins: usize = std::thread::scope(|s| {
                let hs: Vec<_> = (0..16)
                    .map(|_| {
                        s.spawn(|| {
                            let mine = put_node("k");
                            let expected = expected as *mut Node;
                            unsafe { (*mine).next.store(expected, Ordering::Relaxed) };
                            barrier.wait();
                            if t.install(id, expected, mine) {
                                1
                            } else {
                                unsafe { r.reclaim_node(mine) };
                                0
                            }
                        })
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().unwrap()).sum()
            });
            assert_eq!(wins, 1);
        }
        t.retire_page(id, &e, &r).unwrap();
        e.advance();
    }

    #[test]
    fn retire_recycles_after_drain_and_respects_guards() {
        let (t, e, r) = env(4);
        let a = t.allocate_page().unwrap();
        let b = t.allocate_page().unwrap();
        let c = t.allocate_page().unwrap();
        assert!(t.install(b, std::ptr::null_mut(), base_node()));
        let reader = e.enter();
        t.retire_page(b, &e, &r).unwrap();
        assert!(matches!(t.read_entry(b, &reader), Err(Error::PageRetired(_))));
        e.advance();
        assert!(matches!(t.allocate_page(), Err(Error::CapacityExhausted)), "recycled under a live guard");
        drop(reader);
        e.advance();
        assert_eq!(t.allocate_page().unwrap(), b);
        let _ = (a, c);
    }

    #[test]
    fn double_retire_is_counted_noop() {
        let (t, e, r) = env(4);
        let a = t.allocate_page().unwrap();
        t.retire_page(a, &e, &r).unwrap();
        t.retire_page(a, &e, &r).unwrap();
        assert_eq!(t.double_retires(), 1);
        e.advance();
    }

    #[test]
    fn successful_installs_strictly_ordered() {
        // Version-stamp each successful install; the sequence observed per
        // entry must be strictly increasing.
        let (t, e, r) = env(4);
        let id = t.allocate_page().unwrap();
        assert!(t.install(id, std::ptr::null_mut(), base_node()));
        let stamps = parking_lot::Mutex::new(Vec::new());
        let counter = AtomicU64::new(0);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..500 {
                        let g = e.enter();
                        loop {
                            let head = t.head(id).unwrap();
                            let n = put_node("x");
                            unsafe { (*n).next.store(head, Ordering::Relaxed) };
                            // stamp is taken under the same order the CAS linearizes in
                            let mut st = stamps.lock();
                            if t.install(id, head, n) {
                                st.push(counter.fetch_add(1, Ordering::SeqCst));
                                break;
                            }
                            drop(st);
                            unsafe { r.reclaim_node(n) };
                        }
                        drop(g);
                    }
                });
            }
        });
        let st = stamps.into_inner();
        assert_eq!(st.len(), 2000);
        assert!(st.windows(2).all(|w| w[0] < w[1]));
        t.retire_page(id, &e, &r).unwrap();
        e.advance();
    }
}
