//! The public store: point operations, range scans, maintenance, eviction
//! and recovery.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::chain::{IndexInfo, IndexStep, LeafStep, MergeCtx, Mode, RouteKey};
use crate::config::Config;
use crate::engine::Engine;
use crate::epoch::EpochGuard;
use crate::error::{Error, Result};
use crate::fsck::{self, FsckReport, PageSource};
use crate::lss::{scan_dir, LogStore};
use crate::mapping::MappingTable;
use crate::model::{BasePage, DeltaKind, Key, PageContent, PageId, Record, Value};
use crate::node::{is_real, Body, Node, Stub};
use crate::smo::MergeOutcome;
use crate::stats::{Stats, StatsSnapshot};

/// Restarts tolerated by one operation before it reports corruption.
const RESTART_LIMIT: usize = 1 << 22;

pub struct Store {
    eng: Engine,
    closed: AtomicBool,
}

/// What one maintenance pass did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaintenanceReport {
    pub pages: usize,
    pub takeovers: usize,
    pub consolidations: usize,
    pub splits: usize,
    pub terms_completed: usize,
}

enum Kind {
    Put(Value),
    Delete,
}

impl Store {
    /// Opens the store in `cfg.data_dir`, recovering every page found there.
    pub fn open(cfg: Config) -> Result<Store> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.data_dir)?;
        let scan = scan_dir(&cfg.data_dir)?;
        let table = MappingTable::new(cfg.mapping_capacity);
        let first_segment = scan.max_segment.map_or(1, |s| s + 1);
        let lss = LogStore::open(&cfg.data_dir, cfg.buffer_bytes, cfg.sync_writes, first_segment, scan.max_lsn + 1)?;
        let live: Vec<_> = scan.live_pages().collect();
        if live.is_empty() {
            let leaf = table.allocate_page()?;
            let root = BasePage {
                content: PageContent::Index { first: leaf, terms: Vec::new() },
                high_key: None,
                side_link: None,
                lsn: 0,
            };
            table.store_initial(PageId::ROOT, Node::boxed(Body::Base(root, None)));
            table.store_initial(leaf, Node::boxed(Body::Base(BasePage::empty_leaf(), None)));
        } else {
            if !scan.latest.get(&PageId::ROOT).is_some_and(|f| f.image.is_some()) {
                return Err(Error::Corrupt("no root page on storage".into()));
            }
            for (id, f) in live {
                if id.index() >= table.capacity() {
                    return Err(Error::CapacityExhausted);
                }
                let img = f.image.as_ref().unwrap();
                if *id != PageId::ROOT {
                    table.claim_recovered(*id);
                }
                let stub = Stub {
                    loc: f.loc,
                    half: f.half,
                    is_leaf: img.is_leaf(),
                    high_key: img.high_key.clone(),
                    side_link: img.side_link,
                };
                table.store_initial(*id, Node::boxed(Body::Stub(stub)));
            }
            table.finish_recovery();
        }
        Ok(Store { eng: Engine::new(cfg, table, lss), closed: AtomicBool::new(false) })
    }

    pub fn config(&self) -> &Config {
        &self.eng.cfg
    }

    fn check_open(&self) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Err(Error::Closed);
        }
        Ok(())
    }

    fn tick(&self) {
        let n = self.eng.stats.ops.fetch_add(1, Ordering::Relaxed) + 1;
        if n.is_multiple_of(self.eng.cfg.epoch_op_interval) {
            self.eng.epoch.advance();
        }
    }

    fn key(&self, key: &[u8]) -> Result<Key> {
        Key::new(key)
    }

    /// Leaf responsible for `rk`, plus the index pages passed on the way.
    fn descend(&self, rk: RouteKey<'_>, restarts: &mut usize, g: &EpochGuard<'_>) -> Result<(PageId, Vec<PageId>)> {
        let mut pid = PageId::ROOT;
        let mut path = Vec::new();
        loop {
            let head = match self.eng.table.head(pid) {
                Ok(h) if is_real(h) => h,
                _ => {
                    self.restart(restarts)?;
                    pid = PageId::ROOT;
                    path.clear();
                    continue;
                }
            };
            let mut info = IndexInfo::default();
            match self.eng.walk_index(pid, head, rk, &mut info, g)? {
                IndexStep::Leaf => return Ok((pid, path)),
                IndexStep::Child(c) => {
                    path.push(pid);
                    pid = c;
                }
                IndexStep::Side(s, high) => {
                    if let Some(&parent) = path.last() {
                        self.eng.complete_term(parent, &high, s, pid, g)?;
                    }
                    pid = s;
                }
                IndexStep::Redirect(n) => pid = n,
                IndexStep::Restart => {
                    self.restart(restarts)?;
                    pid = PageId::ROOT;
                    path.clear();
                }
            }
        }
    }

    fn restart(&self, restarts: &mut usize) -> Result<()> {
        *restarts += 1;
        if *restarts > RESTART_LIMIT {
            return Err(Error::Corrupt("operation did not converge".into()));
        }
        if restarts.is_multiple_of(64) {
            std::thread::yield_now();
        }
        self.eng.hook("op.restart")
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Value>> {
        self.check_open()?;
        let key = self.key(key)?;
        self.tick();
        let g = self.eng.epoch.enter();
        let mut restarts = 0;
        'outer: loop {
            let (mut pid, path) = self.descend(RouteKey::At(&key), &mut restarts, &g)?;
            let mut ctx: Option<MergeCtx> = None;
            loop {
                let (step, _) = self.eng.walk_leaf(pid, &key, Mode::Read, ctx.as_ref(), &g)?;
                match step {
                    LeafStep::Found(v) => return Ok(v),
                    LeafStep::Redirect(p, c) => {
                        pid = p;
                        ctx = c;
                    }
                    LeafStep::Side(s, high) => {
                        if let Some(&parent) = path.last() {
                            self.eng.complete_term(parent, &high, s, pid, &g)?;
                        }
                        pid = s;
                        ctx = None;
                    }
                    LeafStep::HelpMerge(d) | LeafStep::AbortMerge(d) => {
                        self.eng.abort_or_help(&d, &g)?;
                        self.restart(&mut restarts)?;
                        continue 'outer;
                    }
                    LeafStep::Target { .. } | LeafStep::Restart => {
                        self.restart(&mut restarts)?;
                        continue 'outer;
                    }
                }
            }
        }
    }

    /// Inserts or replaces `key`, returning the previous value.
    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<Option<Value>> {
        self.update(key, Kind::Put(Value::new(value)), Mode::Update)
    }

    /// Inserts or replaces `key` without reading the page from storage.
    pub fn put_blind(&self, key: &[u8], value: &[u8]) -> Result<()> {
        self.update(key, Kind::Put(Value::new(value)), Mode::Blind).map(|_| ())
    }

    /// Removes `key`, returning the previous value. Absent keys are a no-op.
    pub fn delete(&self, key: &[u8]) -> Result<Option<Value>> {
        self.update(key, Kind::Delete, Mode::Update)
    }

    /// Removes `key` without reading the page from storage.
    pub fn delete_blind(&self, key: &[u8]) -> Result<()> {
        self.update(key, Kind::Delete, Mode::Blind).map(|_| ())
    }

    fn update(&self, key: &[u8], kind: Kind, mode: Mode) -> Result<Option<Value>> {
        self.check_open()?;
        let key = self.key(key)?;
        if let Kind::Put(v) = &kind {
            let size = key.len() + v.len();
            if size > self.eng.cfg.max_record_bytes() {
                return Err(Error::OversizedRecord { size, capacity: self.eng.cfg.max_record_bytes() });
            }
        }
        self.tick();
        let is_delete = matches!(kind, Kind::Delete);
        let delta = match kind {
            Kind::Put(v) => DeltaKind::Put(Record::new(key.clone(), v)),
            Kind::Delete => DeltaKind::Delete(key.clone()),
        };
        let node = self.eng.delta_node(delta);
        self.update_with(&key, node, is_delete, mode)
    }

    /// Drives one update to completion. `node` is freed here if it is never
    /// published.
    fn update_with(&self, key: &Key, node: *mut Node, is_delete: bool, mode: Mode) -> Result<Option<Value>> {
        let eng = &self.eng;
        let g = eng.epoch.enter();
        let mut restarts = 0;
        let auto = eng.cfg.auto_maintenance;
        let fail = |e: Error| {
            eng.discard(node);
            Err(e)
        };
        'outer: loop {
            let (mut pid, path) = match self.descend(RouteKey::At(key), &mut restarts, &g) {
                Ok(x) => x,
                Err(e) => return fail(e),
            };
            let mut ctx: Option<MergeCtx> = None;
            loop {
                let (step, head) = match eng.walk_leaf(pid, key, mode, ctx.as_ref(), &g) {
                    Ok(x) => x,
                    Err(e) => return fail(e),
                };
                match step {
                    LeafStep::Target { prev, len, base_entries, base_bytes, live_notice } => {
                        if let Err(e) = eng.hook("put.resolved") {
                            return fail(e);
                        }
                        if is_delete && prev.is_none() && mode != Mode::Blind {
                            eng.discard(node);
                            return Ok(None);
                        }
                        eng.stats.sample_chain(len + 1);
                        let piggy = auto && !live_notice && len + 1 >= eng.cfg.consolidate_threshold;
                        if piggy {
                            let cn = eng.delta_node(DeltaKind::CNotice);
                            unsafe {
                                (*node).next.store(head, Ordering::Relaxed);
                                (*cn).next.store(node, Ordering::Relaxed);
                            }
                            if eng.table.install(pid, head, cn) {
                                eng.reclaimer.on_publish(node);
                                eng.reclaimer.on_publish(cn);
                                Stats::bump(&eng.stats.notices_won);
                                eng.hook("put.installed")?;
                                eng.hook("cnotice.posted")?;
                                eng.consolidate(pid, cn, &g)?;
                                self.after_update(pid, is_delete, &g)?;
                                return Ok(prev);
                            }
                            eng.discard(cn);
                            continue;
                        }
                        if eng.try_prepend(pid, node, head) {
                            eng.hook("put.installed")?;
                            if auto {
                                if live_notice && len + 1 >= eng.cfg.consolidate_threshold {
                                    if let Some(n) = eng.live_notice(pid, eng.table.head(pid)?, &g) {
                                        eng.help_if_expired(pid, n, &g)?;
                                    }
                                }
                                let big = base_entries + 1 >= eng.cfg.split_record_threshold
                                    || base_bytes >= eng.cfg.split_bytes_threshold;
                                if big && !is_delete {
                                    eng.try_split(pid, false, &g)?;
                                } else if is_delete && base_entries <= eng.cfg.merge_record_threshold + len {
                                    eng.try_merge(pid, false, &g)?;
                                }
                            }
                            return Ok(prev);
                        }
                    }
                    LeafStep::Found(_) => unreachable!("update walk returned a read result"),
                    LeafStep::Redirect(p, c) => {
                        pid = p;
                        ctx = c;
                    }
                    LeafStep::Side(s, high) => {
                        if let Some(&parent) = path.last() {
                            if let Err(e) = eng.complete_term(parent, &high, s, pid, &g) {
                                return fail(e);
                            }
                        }
                        pid = s;
                        ctx = None;
                    }
                    LeafStep::HelpMerge(d) => {
                        match eng.run_merge(&d, &g) {
                            Ok(MergeOutcome::Yield) => std::thread::yield_now(),
                            Ok(_) => {}
                            Err(e) => return fail(e),
                        }
                        if let Err(e) = self.restart(&mut restarts) {
                            return fail(e);
                        }
                        continue 'outer;
                    }
                    LeafStep::AbortMerge(d) => {
                        if let Err(e) = eng.abort_or_help(&d, &g) {
                            return fail(e);
                        }
                        if let Err(e) = self.restart(&mut restarts) {
                            return fail(e);
                        }
                        continue 'outer;
                    }
                    LeafStep::Restart => {
                        if let Err(e) = self.restart(&mut restarts) {
                            return fail(e);
                        }
                        continue 'outer;
                    }
                }
            }
        }
    }

    fn after_update(&self, pid: PageId, is_delete: bool, g: &EpochGuard<'_>) -> Result<()> {
        let eng = &self.eng;
        let Ok(head) = eng.table.head(pid) else { return Ok(()) };
        if !is_real(head) {
            return Ok(());
        }
        if let Body::Base(b, _) = &eng.node(head, g).body {
            if is_delete || b.entry_count() < eng.cfg.merge_record_threshold {
                if b.entry_count() < eng.cfg.merge_record_threshold {
                    eng.try_merge(pid, false, g)?;
                }
                return Ok(());
            }
        }
        eng.maintain_page(pid, g)
    }

    /// Records with `from <= key <= to` (unbounded above when `to` is
    /// `None`), in key order.
    pub fn scan(&self, from: &[u8], to: Option<&[u8]>) -> Result<Vec<(Key, Value)>> {
        self.check_open()?;
        let to = to.map(Key::new).transpose()?;
        self.tick();
        let eng = &self.eng;
        let g = eng.epoch.enter();
        let mut out = Vec::new();
        let mut restarts = 0;
        // cursor: everything at or after `cur` (or strictly after when
        // `after`) still needs to be returned
        let mut cur: Option<Key> = if from.is_empty() { None } else { Some(Key::new(from)?) };
        let mut after = false;
        let min_key = Key::new([0u8])?;
        'outer: loop {
            let ck = cur.clone().unwrap_or_else(|| min_key.clone());
            let rk = if after { RouteKey::After(&ck) } else { RouteKey::At(&ck) };
            let (mut pid, path) = self.descend(rk, &mut restarts, &g)?;
            loop {
                let head = match eng.table.head(pid) {
                    Ok(h) if is_real(h) => h,
                    _ => {
                        self.restart(&mut restarts)?;
                        continue 'outer;
                    }
                };
                if let Some(n) = eng.live_notice(pid, head, &g) {
                    if let Some(DeltaKind::DNotice(d)) = eng.node(n, &g).delta().map(|d| &d.kind) {
                        if d.removed_id == pid {
                            if let MergeOutcome::Yield = eng.run_merge(d, &g)? {
                                std::thread::yield_now();
                            }
                            self.restart(&mut restarts)?;
                            continue 'outer;
                        }
                    }
                } else {
                    eng.make_resident(pid, &g)?;
                }
                let head = match eng.table.head(pid) {
                    Ok(h) if is_real(h) => h,
                    _ => {
                        self.restart(&mut restarts)?;
                        continue 'outer;
                    }
                };
                let view = eng.collect(pid, head, &g)?;
                if !view.is_leaf {
                    self.restart(&mut restarts)?;
                    continue 'outer;
                }
                if let (Some(h), Some(s)) = (&view.high, view.side) {
                    if rk.exceeds(h) {
                        if let Some(&parent) = path.last() {
                            eng.complete_term(parent, h, s, pid, &g)?;
                        }
                        pid = s;
                        continue;
                    }
                }
                for r in view.records {
                    let admitted = match &cur {
                        None => true,
                        Some(c) => {
                            if after {
                                &r.key > c
                            } else {
                                &r.key >= c
                            }
                        }
                    };
                    if !admitted {
                        continue;
                    }
                    if to.as_ref().is_some_and(|t| &r.key > t) {
                        return Ok(out);
                    }
                    out.push((r.key, r.value));
                }
                match view.high {
                    None => return Ok(out),
                    Some(h) => {
                        if to.as_ref().is_some_and(|t| t <= &h) {
                            return Ok(out);
                        }
                        cur = Some(h);
                        after = true;
                        continue 'outer;
                    }
                }
            }
        }
    }

    /// Every record in key order.
    pub fn scan_all(&self) -> Result<Vec<(Key, Value)>> {
        self.scan(&[], None)
    }

    /// Takes over expired notices, consolidates long chains, splits
    /// oversized pages and posts missing index terms.
    pub fn maintain(&self) -> Result<MaintenanceReport> {
        self.check_open()?;
        let eng = &self.eng;
        let mut rep = MaintenanceReport::default();
        let ids: Vec<PageId> = eng.table.raw_entries().filter(|(_, p)| is_real(*p)).map(|(id, _)| id).collect();
        for pid in ids {
            let g = eng.epoch.enter();
            let Ok(head) = eng.table.head(pid) else { continue };
            if !is_real(head) {
                continue;
            }
            rep.pages += 1;
            if let Some(n) = eng.live_notice(pid, head, &g) {
                if eng.help_if_expired(pid, n, &g)? {
                    rep.takeovers += 1;
                }
                continue;
            }
            let len = eng.chain_length(pid, &g);
            if len >= eng.cfg.consolidate_threshold && eng.try_consolidate(pid, eng.cfg.consolidate_threshold, &g)? {
                rep.consolidations += 1;
            }
            let Ok(head) = eng.table.head(pid) else { continue };
            if !is_real(head) || matches!(eng.node(head, &g).body, Body::Stub(_)) {
                continue;
            }
            let view = eng.collect(pid, head, &g)?;
            if eng.over_split_threshold(&view) && eng.try_split(pid, false, &g)? {
                rep.splits += 1;
            }
        }
        rep.terms_completed = self.complete_terms()?;
        eng.epoch.drain();
        Ok(rep)
    }

    /// Walks every level left to right and posts index terms that lazy
    /// completion has not posted yet.
    fn complete_terms(&self) -> Result<usize> {
        let eng = &self.eng;
        let g = eng.epoch.enter();
        let mut posted = 0;
        let mut level_start = PageId::ROOT;
        loop {
            let Some((_, _, is_leaf)) = eng.base_bounds(level_start, &g) else { return Ok(posted) };
            if level_start != PageId::ROOT {
                let mut pid = level_start;
                let mut hops = 0;
                while let Some((Some(high), Some(side), _)) = eng.base_bounds(pid, &g) {
                    hops += 1;
                    if hops > eng.table.capacity() {
                        break;
                    }
                    if let Some(path) = eng.find_path(pid, &high, &g)? {
                        if let Some(&parent) = path.last() {
                            let already = self.term_present(parent, &high, side, &g)?;
                            if !already && eng.complete_term(parent, &high, side, pid, &g)? {
                                posted += 1;
                            }
                        }
                    }
                    pid = side;
                }
            }
            if is_leaf {
                return Ok(posted);
            }
            let (view, _) = eng.view(level_start, &g)?;
            let Some(first) = view.first else { return Ok(posted) };
            level_start = first;
        }
    }

    fn term_present(&self, parent: PageId, sep: &Key, child: PageId, g: &EpochGuard<'_>) -> Result<bool> {
        let mut p = parent;
        for _ in 0..64 {
            let head = match self.eng.table.head(p) {
                Ok(h) if is_real(h) => h,
                _ => return Ok(false),
            };
            let mut info = IndexInfo::default();
            match self.eng.walk_index(p, head, RouteKey::After(sep), &mut info, g)? {
                IndexStep::Child(c) => return Ok(c == child),
                IndexStep::Side(s, _) | IndexStep::Redirect(s) => p = s,
                _ => return Ok(false),
            }
        }
        Ok(false)
    }

    /// Advances the global epoch and reclaims what became unreachable.
    pub fn advance_epoch(&self) -> u64 {
        self.eng.epoch.advance()
    }

    pub fn current_epoch(&self) -> u64 {
        self.eng.epoch.current()
    }

    pub fn stats(&self) -> StatsSnapshot {
        let eng = &self.eng;
        let mut s = StatsSnapshot::default();
        eng.stats.fill(&mut s);
        let c = eng.lss.counters();
        s.physical_writes = c.physical_writes;
        s.physical_reads = c.physical_reads;
        s.pages_flushed = c.pages_flushed;
        s.bytes_flushed = c.bytes_flushed;
        s.outstanding_reservations = c.outstanding_reservations;
        s.double_retires = eng.table.double_retires();
        s.poison_reads = eng.reclaimer.poison_reads();
        s.nodes_freed = eng.reclaimer.freed();
        s.epoch = eng.epoch.current();
        s
    }

    /// Verifies that published deltas are never modified: every delta's
    /// digest is recorded at publication and compared when it is reclaimed.
    pub fn enable_digest_check(&self) {
        self.eng.reclaimer.enable_digest_check();
    }

    pub fn digest_mismatches(&self) -> u64 {
        self.eng.reclaimer.digest_mismatches()
    }

    /// Leaf currently responsible for `key`.
    pub fn leaf_of(&self, key: &[u8]) -> Result<PageId> {
        let key = self.key(key)?;
        let g = self.eng.epoch.enter();
        let mut restarts = 0;
        loop {
            let (mut pid, _) = self.descend(RouteKey::At(&key), &mut restarts, &g)?;
            for _ in 0..64 {
                let (step, _) = self.eng.walk_leaf(pid, &key, Mode::Blind, None, &g)?;
                match step {
                    LeafStep::Target { .. } => return Ok(pid),
                    LeafStep::Redirect(p, _) | LeafStep::Side(p, _) => pid = p,
                    _ => break,
                }
            }
            self.restart(&mut restarts)?;
        }
    }

    /// Splits the leaf holding `key` regardless of its size.
    pub fn split_leaf(&self, key: &[u8]) -> Result<bool> {
        let pid = self.leaf_of(key)?;
        let g = self.eng.epoch.enter();
        self.eng.try_split(pid, true, &g)
    }

    /// Merges the leaf holding `key` with its right sibling regardless of
    /// size.
    pub fn merge_leaf(&self, key: &[u8]) -> Result<bool> {
        let pid = self.leaf_of(key)?;
        let g = self.eng.epoch.enter();
        self.eng.try_merge(pid, true, &g)
    }

    /// Consolidates the leaf holding `key` if its chain has any delta.
    pub fn consolidate_leaf(&self, key: &[u8]) -> Result<bool> {
        let pid = self.leaf_of(key)?;
        let g = self.eng.epoch.enter();
        self.eng.try_consolidate(pid, 1, &g)
    }

    /// Writes the leaf holding `key` to storage and drops it from memory.
    pub fn evict_leaf(&self, key: &[u8]) -> Result<bool> {
        let pid = self.leaf_of(key)?;
        self.evict(pid)
    }

    pub fn evict(&self, pid: PageId) -> Result<bool> {
        self.check_open()?;
        let g = self.eng.epoch.enter();
        self.eng.evict_page(pid, &g)
    }

    /// Ids of every page currently in the mapping table.
    pub fn live_pages(&self) -> Vec<PageId> {
        self.eng.table.raw_entries().filter(|(_, p)| is_real(*p)).map(|(id, _)| id).collect()
    }

    /// Delta chain length of every live page.
    pub fn chain_lengths(&self) -> Vec<(PageId, usize)> {
        let g = self.eng.epoch.enter();
        self.live_pages().into_iter().map(|id| (id, self.eng.chain_length(id, &g))).collect()
    }

    /// Evicts every page and seals the active buffer, so that the whole
    /// tree is on storage.
    pub fn checkpoint(&self) -> Result<()> {
        self.check_open()?;
        for pid in self.live_pages() {
            self.evict(pid)?;
        }
        self.eng.lss.seal_active()
    }

    /// Writes out whatever the active buffer holds.
    pub fn flush(&self) -> Result<()> {
        self.check_open()?;
        self.eng.lss.seal_active()
    }

    /// Simulates a crash: storage writes stop (after sealing and flushing
    /// the active buffer when `flush_first`). The store stays usable in
    /// memory but nothing more reaches disk.
    pub fn crash(&self, flush_first: bool) {
        self.eng.lss.crash(flush_first);
    }

    pub fn is_crashed(&self) -> bool {
        self.eng.lss.is_crashed()
    }

    /// Checkpoints and closes. Idempotent.
    pub fn close(&self) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Ok(());
        }
        let r = if self.eng.lss.is_crashed() { Ok(()) } else { self.checkpoint() };
        self.closed.store(true, Ordering::Release);
        r
    }

    /// Structural check of the in-memory tree.
    pub fn validate(&self) -> Result<FsckReport> {
        let g = self.eng.epoch.enter();
        let mut src = MemSource { eng: &self.eng, g: &g };
        let known = self.live_pages();
        Ok(fsck::check_tree(&mut src, Some(&known)))
    }

    pub fn outstanding_reservations(&self) -> i64 {
        self.eng.lss.counters().outstanding_reservations
    }

    pub fn pending_reclaims(&self) -> usize {
        self.eng.epoch.pending()
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

struct MemSource<'a, 'g> {
    eng: &'a Engine,
    g: &'a EpochGuard<'g>,
}

impl PageSource for MemSource<'_, '_> {
    fn page(&mut self, id: PageId) -> std::result::Result<Option<BasePage>, String> {
        match self.eng.table.head(id) {
            Ok(h) if is_real(h) => {}
            _ => return Ok(None),
        }
        match self.eng.view(id, self.g) {
            Ok((v, _)) => Ok(Some(v.to_base())),
            Err(Error::PageRetired(_)) | Err(Error::UnknownPage(_)) => Ok(None),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl Engine {
    /// Replaces a stub tail with the page it stands for, when no notice is
    /// on the chain.
    pub(crate) fn make_resident(&self, pid: PageId, g: &EpochGuard<'_>) -> Result<()> {
        let Ok(mut p) = self.table.head(pid) else { return Ok(()) };
        let mut above: *mut Node = std::ptr::null_mut();
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(d) => {
                    if d.kind.is_notice() {
                        return Ok(());
                    }
                    above = p;
                    p = n.next_ptr();
                }
                Body::Base(..) => return Ok(()),
                Body::Stub(_) => {
                    self.materialize_at(pid, above, p, g)?;
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}
