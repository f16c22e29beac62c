//! Delta chains: prepending, searching, collecting consolidated views and
//! replacing notices.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::engine::Engine;
use crate::epoch::EpochGuard;
use crate::error::{Error, Result};
use crate::lss::format;
use crate::model::{
    BasePage, DeltaKind, FrameHalf, Key, MergeDescriptor, NoticeId, PageContent, PageId, Record, StorageLocation,
    Value,
};
use crate::node::{is_real, Body, Node, Stub};

/// A routing key: either an exact key or the point just above a key.
#[derive(Clone, Copy, Debug)]
pub(crate) enum RouteKey<'a> {
    At(&'a Key),
    After(&'a Key),
}

impl RouteKey<'_> {
    /// True if the key lies strictly above `bound`.
    pub fn exceeds(&self, bound: &Key) -> bool {
        match self {
            RouteKey::At(k) => *k > bound,
            RouteKey::After(k) => *k >= bound,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Mode {
    Read,
    Update,
    /// Routing only; never touches storage.
    Blind,
}

/// Carried by an accessor redirected from a page under a dNOTICE.
#[derive(Clone)]
pub(crate) struct MergeCtx {
    pub desc: Arc<MergeDescriptor>,
    pub dnotice: *mut Node,
}

pub(crate) enum LeafStep {
    Found(Option<Value>),
    Target { prev: Option<Value>, len: usize, base_entries: usize, base_bytes: usize, live_notice: bool },
    Redirect(PageId, Option<MergeCtx>),
    Side(PageId, Key),
    HelpMerge(Arc<MergeDescriptor>),
    AbortMerge(Arc<MergeDescriptor>),
    Restart,
}

pub(crate) enum IndexStep {
    Leaf,
    Child(PageId),
    Side(PageId, Key),
    Redirect(PageId),
    Restart,
}

/// Extra facts gathered while routing through an index page.
#[derive(Default)]
pub(crate) struct IndexInfo {
    pub live_notice: bool,
    pub root_split_live: bool,
    pub pnotices: Vec<Arc<MergeDescriptor>>,
    pub entries: usize,
    pub len: usize,
}

/// A consolidated view of one page's state.
#[derive(Debug, Default)]
pub(crate) struct View {
    pub is_leaf: bool,
    pub records: Vec<Record>,
    pub first: Option<PageId>,
    pub terms: Vec<(Key, PageId)>,
    pub high: Option<Key>,
    pub side: Option<PageId>,
    /// Topmost live notice in the page's own chain.
    pub live_notice: Option<*mut Node>,
    pub len: usize,
    /// Storage location of an identical image, when the view is exactly a
    /// clean base.
    pub clean: Option<(StorageLocation, FrameHalf)>,
}

impl View {
    pub fn entry_count(&self) -> usize {
        if self.is_leaf {
            self.records.len()
        } else {
            self.terms.len() + 1
        }
    }

    pub fn to_base(&self) -> BasePage {
        BasePage {
            content: self.content(),
            high_key: self.high.clone(),
            side_link: self.side,
            lsn: 0,
        }
    }

    fn content(&self) -> PageContent {
        if self.is_leaf {
            PageContent::Leaf(self.records.clone())
        } else {
            PageContent::Index { first: self.first.unwrap(), terms: self.terms.clone() }
        }
    }
}

/// A base reached at the end of a chain, either in memory or read through
/// from storage.
enum Tail<'g> {
    Mem(&'g BasePage, Option<(StorageLocation, FrameHalf)>),
    Owned(BasePage),
}

impl Tail<'_> {
    fn page(&self) -> &BasePage {
        match self {
            Tail::Mem(p, _) => p,
            Tail::Owned(p) => p,
        }
    }
}

fn is_voided(voided: &[NoticeId], id: NoticeId) -> bool {
    voided.contains(&id)
}

/// Picks the child for `rk` from base terms overridden by delta term ops
/// (first occurrence per separator wins; `None` removes).
pub(crate) fn route_terms(first: PageId, terms: &[(Key, PageId)], ops: &[(Key, Option<PageId>)], rk: RouteKey<'_>) -> PageId {
    let mut best: Option<(&Key, PageId)> = None;
    for (i, (sep, child)) in ops.iter().enumerate() {
        if ops[..i].iter().any(|(s, _)| s == sep) {
            continue;
        }
        if let Some(c) = child {
            if rk.exceeds(sep) && best.is_none_or(|(b, _)| sep > b) {
                best = Some((sep, *c));
            }
        }
    }
    let idx = terms.partition_point(|(sep, _)| rk.exceeds(sep));
    for (sep, child) in terms[..idx].iter().rev() {
        if ops.iter().any(|(s, _)| s == sep) {
            continue;
        }
        if best.is_none_or(|(b, _)| sep > b) {
            best = Some((sep, *child));
        }
        break;
    }
    best.map_or(first, |(_, c)| c)
}

impl Engine {
    /// Publishes `node` on top of `expected`. Single-winner.
    pub(crate) fn try_prepend(&self, pid: PageId, node: *mut Node, expected: *mut Node) -> bool {
        unsafe { (*node).next.store(expected, Ordering::Relaxed) };
        if self.table.install(pid, expected, node) {
            self.reclaimer.on_publish(node);
            true
        } else {
            false
        }
    }

    /// Replaces the chain segment starting at `notice` with `new`, keeping
    /// whatever was prepended above the notice. Fails if the notice is no
    /// longer in the chain.
    pub(crate) fn replace_notice(&self, pid: PageId, notice: *mut Node, new: *mut Node, g: &EpochGuard<'_>) -> bool {
        'retry: loop {
            let Ok(head) = self.table.head(pid) else { return false };
            if !is_real(head) {
                return false;
            }
            if head == notice {
                if self.table.install(pid, notice, new) {
                    return true;
                }
                continue;
            }
            let mut p = head;
            loop {
                let n = self.node(p, g);
                if !matches!(n.body, Body::Delta(_)) {
                    return false;
                }
                let next = n.next_ptr();
                if next == notice {
                    if n.next.compare_exchange(notice, new, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                        return true;
                    }
                    continue 'retry;
                }
                if !is_real(next) {
                    return false;
                }
                p = next;
            }
        }
    }

    /// Finds the node carrying notice `id` in `pid`'s chain.
    pub(crate) fn find_notice(&self, pid: PageId, id: NoticeId, g: &EpochGuard<'_>) -> Option<*mut Node> {
        let head = self.table.head(pid).ok()?;
        let mut p = head;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(d) if d.notice_id == id && d.kind.is_notice() => return Some(p),
                Body::Delta(_) => p = n.next_ptr(),
                _ => return None,
            }
        }
        None
    }

    /// Number of deltas (notices included) above the base or storage tail.
    pub(crate) fn chain_length(&self, pid: PageId, g: &EpochGuard<'_>) -> usize {
        let Ok(mut p) = self.table.head(pid) else { return 0 };
        let mut len = 0;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(_) => {
                    len += 1;
                    p = n.next_ptr();
                }
                _ => break,
            }
        }
        len
    }

    /// Replaces the stub at `stub` (linked from `above`, or the entry when
    /// `above` is null) with the fetched base. Returns the pointer now in
    /// that link, or `None` if the entry moved and the walk should restart.
    pub(crate) fn materialize_at(&self, pid: PageId, above: *mut Node, stub: *mut Node, g: &EpochGuard<'_>) -> Result<Option<*mut Node>> {
        let Body::Stub(s) = &self.node(stub, g).body else { unreachable!() };
        let page = self.lss.read_page(s.loc, s.half)?;
        let base = Node::boxed(Body::Base(page, Some((s.loc, s.half))));
        let ok = if above.is_null() {
            self.table.install(pid, stub, base)
        } else {
            let a = self.node(above, g);
            a.next.compare_exchange(stub, base, Ordering::AcqRel, Ordering::Acquire).is_ok()
        };
        if ok {
            self.retire_node(stub);
            crate::stats::Stats::bump(&self.stats.pages_assembled);
            return Ok(Some(base));
        }
        self.discard(base);
        if above.is_null() {
            return Ok(None);
        }
        Ok(Some(self.node(above, g).next_ptr()))
    }

    fn read_through(&self, s: &Stub) -> Result<BasePage> {
        self.lss.read_page(s.loc, s.half)
    }

    /// Walks `pid`'s chain to resolve `key`, or to pick where an update for
    /// it must go.
    pub(crate) fn walk_leaf(
        &self,
        pid: PageId,
        key: &Key,
        mode: Mode,
        ctx: Option<&MergeCtx>,
        g: &EpochGuard<'_>,
    ) -> Result<(LeafStep, *mut Node)> {
        let head = match self.table.head(pid) {
            Ok(h) if is_real(h) => h,
            _ => return Ok((LeafStep::Restart, std::ptr::null_mut())),
        };
        let mut p = head;
        let mut above: *mut Node = std::ptr::null_mut();
        let mut voided: Vec<NoticeId> = Vec::new();
        let mut found: Option<Option<Value>> = None;
        let mut len = 0usize;
        let mut notice_on_path = false;
        let mut live_notice = false;
        // true once we walk D's frozen state from M
        let mut frozen = false;
        loop {
            if !is_real(p) {
                return Ok((LeafStep::Restart, head));
            }
            let n = self.node(p, g);
            let tail = match &n.body {
                Body::Delta(d) => {
                    if !frozen {
                        len += 1;
                    }
                    match &d.kind {
                        DeltaKind::Put(r) if mode != Mode::Blind && found.is_none() && r.key == *key => {
                            if mode == Mode::Read {
                                return Ok((LeafStep::Found(Some(r.value.clone())), head));
                            }
                            found = Some(Some(r.value.clone()));
                        }
                        DeltaKind::Delete(k) if mode != Mode::Blind && found.is_none() && k == key => {
                            if mode == Mode::Read {
                                return Ok((LeafStep::Found(None), head));
                            }
                            found = Some(None);
                        }
                        DeltaKind::VoidMarker(id) => voided.push(*id),
                        DeltaKind::CNotice => {
                            notice_on_path = true;
                            if !frozen && !is_voided(&voided, d.notice_id) {
                                live_notice = true;
                            }
                        }
                        DeltaKind::SNotice(desc) => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) && !frozen {
                                live_notice = true;
                                if desc.old_id == pid && !desc.is_root_split() && key > &desc.split_key {
                                    if let Some(c) = ctx {
                                        if mode != Mode::Read {
                                            return Ok((LeafStep::AbortMerge(c.desc.clone()), head));
                                        }
                                        p = c.dnotice;
                                        frozen = true;
                                        p = self.node(p, g).next_ptr();
                                        continue;
                                    }
                                    return Ok((LeafStep::Redirect(desc.new_id, None), head));
                                }
                            }
                        }
                        DeltaKind::DNotice(desc) => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) && desc.removed_id == pid && !frozen {
                                let c = MergeCtx { desc: desc.clone(), dnotice: p };
                                return Ok((LeafStep::Redirect(desc.survivor_id, Some(c)), head));
                            }
                        }
                        DeltaKind::MNotice(desc) => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) && desc.survivor_id == pid && !frozen {
                                live_notice = true;
                                if key > &desc.sep_key {
                                    let dn = desc.removed_notice.load(Ordering::Acquire);
                                    frozen = true;
                                    p = self.node(dn, g).next_ptr();
                                    continue;
                                }
                            }
                        }
                        _ => {}
                    }
                    above = p;
                    p = n.next_ptr();
                    continue;
                }
                Body::Base(page, clean) => Tail::Mem(page, *clean),
                Body::Stub(s) => {
                    if let Some(h) = &s.high_key {
                        if key > h {
                            match self.side_step(s.side_link.unwrap(), h, ctx, frozen, mode, g) {
                                SideDecision::Step(step) => return Ok((step, head)),
                                SideDecision::WalkFrozen(next) => {
                                    frozen = true;
                                    p = next;
                                    continue;
                                }
                            }
                        }
                    }
                    if mode == Mode::Blind || (mode == Mode::Update && found.is_some()) {
                        return Ok((
                            LeafStep::Target { prev: found.flatten(), len, base_entries: 0, base_bytes: 0, live_notice },
                            head,
                        ));
                    }
                    if !notice_on_path && !frozen {
                        match self.materialize_at(pid, above, p, g)? {
                            Some(np) => {
                                p = np;
                                continue;
                            }
                            None => return Ok((LeafStep::Restart, head)),
                        }
                    }
                    Tail::Owned(self.read_through(s)?)
                }
            };
            let page = tail.page();
            if let Some(h) = &page.high_key {
                if key > h {
                    match self.side_step(page.side_link.unwrap(), h, ctx, frozen, mode, g) {
                        SideDecision::Step(step) => return Ok((step, head)),
                        SideDecision::WalkFrozen(next) => {
                            frozen = true;
                            p = next;
                            continue;
                        }
                    }
                }
            }
            if found.is_none() && mode != Mode::Blind {
                found = Some(page.lookup(key).cloned());
            }
            if mode == Mode::Read {
                return Ok((LeafStep::Found(found.flatten()), head));
            }
            let base_entries = page.entry_count();
            let base_bytes = if base_entries >= 2 { format::image_len(page) } else { 0 };
            return Ok((LeafStep::Target { prev: found.flatten(), len, base_entries, base_bytes, live_notice }, head));
        }
    }

    fn side_step(
        &self,
        side: PageId,
        high: &Key,
        ctx: Option<&MergeCtx>,
        frozen: bool,
        mode: Mode,
        g: &EpochGuard<'_>,
    ) -> SideDecision {
        if let (Some(c), false) = (ctx, frozen) {
            // We were sent here from D: the key belongs to M ∪ D.
            if mode == Mode::Read {
                return SideDecision::WalkFrozen(self.node(c.dnotice, g).next_ptr());
            }
            if side == c.desc.removed_id {
                return SideDecision::Step(LeafStep::HelpMerge(c.desc.clone()));
            }
            return SideDecision::Step(LeafStep::AbortMerge(c.desc.clone()));
        }
        SideDecision::Step(LeafStep::Side(side, high.clone()))
    }

    /// Routes `rk` through index page `pid`.
    pub(crate) fn walk_index(
        &self,
        pid: PageId,
        head: *mut Node,
        rk: RouteKey<'_>,
        info: &mut IndexInfo,
        g: &EpochGuard<'_>,
    ) -> Result<IndexStep> {
        let mut p = head;
        let mut above: *mut Node = std::ptr::null_mut();
        let mut voided: Vec<NoticeId> = Vec::new();
        let mut ops: Vec<(Key, Option<PageId>)> = Vec::new();
        let mut notice_on_path = false;
        loop {
            if !is_real(p) {
                return Ok(IndexStep::Restart);
            }
            let n = self.node(p, g);
            let tail = match &n.body {
                Body::Delta(d) => {
                    info.len += 1;
                    match &d.kind {
                        DeltaKind::Put(_)
                        | DeltaKind::Delete(_)
                        | DeltaKind::DNotice(_)
                        | DeltaKind::MNotice(_) => return Ok(IndexStep::Leaf),
                        DeltaKind::IndexTermPost { sep, child } => ops.push((sep.clone(), Some(*child))),
                        DeltaKind::IndexTermRemove { sep } => ops.push((sep.clone(), None)),
                        DeltaKind::VoidMarker(id) => voided.push(*id),
                        DeltaKind::CNotice => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) {
                                info.live_notice = true;
                            }
                        }
                        DeltaKind::PNotice(desc) => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) {
                                info.live_notice = true;
                                info.pnotices.push(desc.clone());
                                ops.push((desc.sep_key.clone(), None));
                            }
                        }
                        DeltaKind::SNotice(desc) => {
                            notice_on_path = true;
                            if !is_voided(&voided, d.notice_id) {
                                info.live_notice = true;
                                if desc.is_root_split() {
                                    info.root_split_live = true;
                                } else if desc.old_id == pid && rk.exceeds(&desc.split_key) {
                                    return Ok(IndexStep::Redirect(desc.new_id));
                                }
                            }
                        }
                    }
                    above = p;
                    p = n.next_ptr();
                    continue;
                }
                Body::Base(page, clean) => Tail::Mem(page, *clean),
                Body::Stub(s) => {
                    if s.is_leaf {
                        return Ok(IndexStep::Leaf);
                    }
                    if let Some(h) = &s.high_key {
                        if rk.exceeds(h) {
                            return Ok(IndexStep::Side(s.side_link.unwrap(), h.clone()));
                        }
                    }
                    if !notice_on_path {
                        match self.materialize_at(pid, above, p, g)? {
                            Some(np) => {
                                p = np;
                                continue;
                            }
                            None => return Ok(IndexStep::Restart),
                        }
                    }
                    Tail::Owned(self.read_through(s)?)
                }
            };
            let page = tail.page();
            let PageContent::Index { first, terms } = &page.content else {
                return Ok(IndexStep::Leaf);
            };
            if let Some(h) = &page.high_key {
                if rk.exceeds(h) {
                    return Ok(IndexStep::Side(page.side_link.unwrap(), h.clone()));
                }
            }
            info.entries = terms.len() + 1;
            return Ok(IndexStep::Child(route_terms(*first, terms, &ops, rk)));
        }
    }

    /// Consolidated view of the state reachable from `start`, as seen by
    /// page `pid`. Stubs are read through without being installed.
    pub(crate) fn collect(&self, pid: PageId, start: *mut Node, g: &EpochGuard<'_>) -> Result<View> {
        let mut view = View::default();
        let mut voided: Vec<NoticeId> = Vec::new();
        let mut recs: BTreeMap<Key, Option<Value>> = BTreeMap::new();
        let mut ops: Vec<(Key, Option<PageId>)> = Vec::new();
        let mut low: Option<Key> = None;
        let mut cap: Option<(Key, PageId)> = None;
        // D's frozen state to fold in after M's base, when M carries a live
        // mNOTICE
        let mut fold: Option<(*mut Node, Key)> = None;
        let mut p = start;
        let mut counting = true;
        let mut deltas_seen = false;
        loop {
            if !is_real(p) {
                return Err(Error::PageRetired(pid));
            }
            let n = self.node(p, g);
            let tail = match &n.body {
                Body::Delta(d) => {
                    deltas_seen = true;
                    if counting {
                        view.len += 1;
                    }
                    let live = !is_voided(&voided, d.notice_id);
                    match &d.kind {
                        DeltaKind::Put(r) => {
                            view.is_leaf = true;
                            recs.entry(r.key.clone()).or_insert_with(|| Some(r.value.clone()));
                        }
                        DeltaKind::Delete(k) => {
                            view.is_leaf = true;
                            recs.entry(k.clone()).or_insert(None);
                        }
                        DeltaKind::IndexTermPost { sep, child } => ops.push((sep.clone(), Some(*child))),
                        DeltaKind::IndexTermRemove { sep } => ops.push((sep.clone(), None)),
                        DeltaKind::VoidMarker(id) => voided.push(*id),
                        DeltaKind::CNotice if live => {
                            view.live_notice.get_or_insert(p);
                        }
                        DeltaKind::SNotice(desc) if live => {
                            view.live_notice.get_or_insert(p);
                            if !desc.is_root_split() {
                                if desc.old_id == pid && cap.is_none() {
                                    cap = Some((desc.split_key.clone(), desc.new_id));
                                } else if desc.new_id == pid && low.is_none() {
                                    low = Some(desc.split_key.clone());
                                }
                            }
                        }
                        DeltaKind::PNotice(desc) if live => {
                            view.live_notice.get_or_insert(p);
                            ops.push((desc.sep_key.clone(), None));
                        }
                        DeltaKind::DNotice(_) if live => {
                            view.is_leaf = true;
                            view.live_notice.get_or_insert(p);
                        }
                        DeltaKind::MNotice(desc) if live && desc.survivor_id == pid && fold.is_none() => {
                            view.is_leaf = true;
                            view.live_notice.get_or_insert(p);
                            let dn = desc.removed_notice.load(Ordering::Acquire);
                            fold = Some((self.node(dn, g).next_ptr(), desc.sep_key.clone()));
                        }
                        _ => {}
                    }
                    p = n.next_ptr();
                    continue;
                }
                Body::Base(page, clean) => Tail::Mem(page, *clean),
                Body::Stub(s) => Tail::Owned(self.read_through(s)?),
            };
            let page = tail.page();
            if counting {
                if !deltas_seen {
                    if let Tail::Mem(_, clean) = &tail {
                        view.clean = *clean;
                    }
                }
                match &page.content {
                    PageContent::Leaf(_) => view.is_leaf = true,
                    PageContent::Index { first, .. } => {
                        view.is_leaf = false;
                        view.first = Some(*first);
                    }
                }
            }
            if fold.is_none() || !counting {
                view.high = page.high_key.clone();
                view.side = page.side_link;
            }
            match &page.content {
                PageContent::Leaf(base) => {
                    for r in base {
                        recs.entry(r.key.clone()).or_insert_with(|| Some(r.value.clone()));
                    }
                }
                PageContent::Index { terms, .. } => {
                    let mut merged: BTreeMap<Key, PageId> = terms.iter().cloned().collect();
                    let mut seen: Vec<&Key> = Vec::new();
                    for (sep, child) in &ops {
                        if seen.contains(&sep) {
                            continue;
                        }
                        seen.push(sep);
                        match child {
                            Some(c) => merged.insert(sep.clone(), *c),
                            None => merged.remove(sep),
                        };
                    }
                    view.terms = merged.into_iter().collect();
                }
            }
            if counting {
                if let Some((dstart, _)) = fold {
                    counting = false;
                    deltas_seen = true;
                    p = dstart;
                    continue;
                }
            }
            break;
        }
        if view.is_leaf {
            view.records = recs.into_iter().filter_map(|(k, v)| v.map(|v| Record::new(k, v))).collect();
        }
        if let Some((split, new)) = cap {
            view.high = Some(split);
            view.side = Some(new);
        }
        if let Some(h) = &view.high {
            view.records.retain(|r| &r.key <= h);
            view.terms.retain(|(s, _)| s < h);
        }
        if let Some(l) = &low {
            view.records.retain(|r| &r.key > l);
        }
        if view.len > 0 || view.live_notice.is_some() {
            view.clean = None;
        }
        Ok(view)
    }

    /// View of `pid` from its current head.
    pub(crate) fn view(&self, pid: PageId, g: &EpochGuard<'_>) -> Result<(View, *mut Node)> {
        let head = self.table.head(pid)?;
        if !is_real(head) {
            return Err(Error::PageRetired(pid));
        }
        Ok((self.collect(pid, head, g)?, head))
    }

    /// Base high key and side link at the end of `pid`'s chain, skipping all
    /// deltas. Never reads storage.
    pub(crate) fn base_bounds(&self, pid: PageId, g: &EpochGuard<'_>) -> Option<(Option<Key>, Option<PageId>, bool)> {
        let mut p = self.table.head(pid).ok()?;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(_) => p = n.next_ptr(),
                Body::Base(b, _) => return Some((b.high_key.clone(), b.side_link, b.is_leaf())),
                Body::Stub(s) => return Some((s.high_key.clone(), s.side_link, s.is_leaf)),
            }
        }
        None
    }

    /// Topmost live notice in `pid`'s own chain.
    pub(crate) fn live_notice(&self, pid: PageId, head: *mut Node, g: &EpochGuard<'_>) -> Option<*mut Node> {
        let _ = pid;
        let mut voided: Vec<NoticeId> = Vec::new();
        let mut p = head;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(d) => {
                    if let DeltaKind::VoidMarker(id) = d.kind {
                        voided.push(id);
                    } else if d.kind.is_notice() && !is_voided(&voided, d.notice_id) {
                        return Some(p);
                    }
                    p = n.next_ptr();
                }
                _ => return None,
            }
        }
        None
    }
}

enum SideDecision {
    Step(LeafStep),
    WalkFrozen(*mut Node),
}
