//! Structure modifications: consolidation, split, merge, index term posting
//! and takeover of abandoned notices.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::chain::{IndexInfo, IndexStep, RouteKey, View};
use crate::engine::Engine;
use crate::epoch::EpochGuard;
use crate::error::Result;
use crate::lss::{format, split_frame_len};
use crate::model::{
    BasePage, DeltaKind, FrameHalf, Key, MergeDescriptor, MergePhase, PageContent, PageId, Record,
    SplitDescriptor,
};
use crate::node::{is_real, Body, Node, Stub};
use crate::stats::{self, Stats};

pub(crate) enum MergeOutcome {
    Done,
    Aborted,
    /// Could not make progress now; retry later.
    Yield,
}

enum PostM {
    Posted,
    Busy,
    Conflict,
}

fn leaf_image_len(recs: &[Record], high: Option<&Key>) -> usize {
    let body: usize = recs.iter().map(|r| 8 + r.key.len() + r.value.len()).sum();
    1 + 4 + body + 1 + high.map_or(0, |k| 4 + k.len()) + 8
}

fn index_image_len(terms: &[(Key, PageId)], high: Option<&Key>) -> usize {
    let body: usize = 16 + terms.iter().map(|(k, _)| 16 + k.len()).sum::<usize>();
    1 + 4 + body + 1 + high.map_or(0, |k| 4 + k.len()) + 8
}

/// Where a page splits: the separator and how many entries stay left.
fn split_point(view: &View) -> Option<(Key, usize)> {
    if view.is_leaf {
        let n = view.records.len();
        if n < 2 {
            return None;
        }
        let s = n.div_ceil(2);
        Some((view.records[s - 1].key.clone(), s))
    } else {
        let n = view.terms.len();
        if n < 1 {
            return None;
        }
        let m = n / 2;
        Some((view.terms[m].0.clone(), m))
    }
}

/// Exact size of the split-pair frame for `view` split at `at`, computed
/// without building either image.
fn split_size(view: &View, key: &Key, at: usize) -> usize {
    let (o, n) = if view.is_leaf {
        (
            leaf_image_len(&view.records[..at], Some(key)),
            leaf_image_len(&view.records[at..], view.high.as_ref()),
        )
    } else {
        (
            index_image_len(&view.terms[..at], Some(key)),
            index_image_len(&view.terms[at + 1..], view.high.as_ref()),
        )
    };
    format::frame_len(format::split_payload_len(key, o, n))
}

/// Builds the two post-split images. Returns them with the number of
/// entries placed in the new page.
fn split_images(view: &View, key: &Key, new: PageId) -> (BasePage, BasePage, usize) {
    if view.is_leaf {
        let at = view.records.partition_point(|r| &r.key <= key);
        let o = BasePage {
            content: PageContent::Leaf(view.records[..at].to_vec()),
            high_key: Some(key.clone()),
            side_link: Some(new),
            lsn: 0,
        };
        let moved = view.records.len() - at;
        let n = BasePage {
            content: PageContent::Leaf(view.records[at..].to_vec()),
            high_key: view.high.clone(),
            side_link: view.side,
            lsn: 0,
        };
        (o, n, moved)
    } else {
        let m = view.terms.partition_point(|(s, _)| s < key);
        let o = BasePage {
            content: PageContent::Index { first: view.first.unwrap(), terms: view.terms[..m].to_vec() },
            high_key: Some(key.clone()),
            side_link: Some(new),
            lsn: 0,
        };
        let n = BasePage {
            content: PageContent::Index { first: view.terms[m].1, terms: view.terms[m + 1..].to_vec() },
            high_key: view.high.clone(),
            side_link: view.side,
            lsn: 0,
        };
        (o, n, view.terms.len() - m)
    }
}

impl Engine {
    pub(crate) fn over_split_threshold(&self, view: &View) -> bool {
        if view.entry_count() >= self.cfg.split_record_threshold {
            return true;
        }
        let bytes = if view.is_leaf {
            leaf_image_len(&view.records, view.high.as_ref())
        } else {
            index_image_len(&view.terms, view.high.as_ref())
        };
        bytes >= self.cfg.split_bytes_threshold && view.entry_count() >= 2
    }

    // ---- consolidation ------------------------------------------------

    /// Posts a cNOTICE on `pid` and consolidates, if the chain has at least
    /// `min_len` deltas and no live notice.
    pub(crate) fn try_consolidate(&self, pid: PageId, min_len: usize, g: &EpochGuard<'_>) -> Result<bool> {
        loop {
            let Ok(head) = self.table.head(pid) else { return Ok(false) };
            if !is_real(head) {
                return Ok(false);
            }
            if let Some(n) = self.live_notice(pid, head, g) {
                Stats::bump(&self.stats.notices_lost);
                self.help_if_expired(pid, n, g)?;
                return Ok(false);
            }
            if self.chain_length(pid, g) < min_len.max(1) {
                return Ok(false);
            }
            let cn = self.delta_node(DeltaKind::CNotice);
            if self.try_prepend(pid, cn, head) {
                Stats::bump(&self.stats.notices_won);
                self.hook("cnotice.posted")?;
                self.consolidate(pid, cn, g)?;
                return Ok(true);
            }
            self.discard(cn);
        }
    }

    /// Heavy part of consolidation: rebuilds the state below `cn` as one
    /// base and swaps it in place of the notice.
    pub(crate) fn consolidate(&self, pid: PageId, cn: *mut Node, g: &EpochGuard<'_>) -> Result<()> {
        stats::note_heavy();
        Stats::bump(&self.stats.heavy_consolidations);
        let region = self.node(cn, g).next_ptr();
        let view = self.collect(pid, region, g)?;
        self.hook("consolidate.before_install")?;
        let clean = if view.len == 0 { view.clean } else { None };
        let base = Node::boxed(Body::Base(view.to_base(), clean));
        if self.replace_notice(pid, cn, base, g) {
            self.retire_run(cn);
            Stats::bump(&self.stats.consolidations);
            Stats::bump(&self.stats.installs_succeeded);
        } else {
            self.discard(base);
            Stats::bump(&self.stats.installs_superseded);
        }
        Ok(())
    }

    // ---- takeover -----------------------------------------------------

    pub(crate) fn help_if_expired(&self, pid: PageId, notice: *mut Node, g: &EpochGuard<'_>) -> Result<bool> {
        let Some(d) = self.node(notice, g).delta() else { return Ok(false) };
        if !self.expired(d) {
            return Ok(false);
        }
        self.takeover(pid, notice, g)?;
        Ok(true)
    }

    /// Finishes the structure modification announced by `notice`.
    pub(crate) fn takeover(&self, pid: PageId, notice: *mut Node, g: &EpochGuard<'_>) -> Result<()> {
        let Some(d) = self.node(notice, g).delta() else { return Ok(()) };
        Stats::bump(&self.stats.takeovers);
        match &d.kind {
            DeltaKind::CNotice => self.consolidate(pid, notice, g),
            DeltaKind::SNotice(desc) => {
                if desc.is_root_split() {
                    self.complete_root_split(desc, g)
                } else {
                    self.complete_split(desc, g)
                }
            }
            DeltaKind::PNotice(desc) | DeltaKind::DNotice(desc) | DeltaKind::MNotice(desc) => {
                self.run_merge(desc, g).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    // ---- split --------------------------------------------------------

    /// Splits `pid` if it is over threshold (or `force`). Returns true if this
    /// call's sNOTICE won.
    pub(crate) fn try_split(&self, pid: PageId, force: bool, g: &EpochGuard<'_>) -> Result<bool> {
        for _ in 0..8 {
            let Ok(head) = self.table.head(pid) else { return Ok(false) };
            if !is_real(head) {
                return Ok(false);
            }
            if let Some(n) = self.live_notice(pid, head, g) {
                Stats::bump(&self.stats.notices_lost);
                self.help_if_expired(pid, n, g)?;
                return Ok(false);
            }
            let view = self.collect(pid, head, g)?;
            if !force && !self.over_split_threshold(&view) {
                return Ok(false);
            }
            let Some((key, at)) = split_point(&view) else { return Ok(false) };
            if pid == PageId::ROOT {
                match self.post_root_split(head, key, g)? {
                    Some(won) => return Ok(won),
                    None => continue,
                }
            }
            let new = self.table.allocate_page()?;
            let res = match self.lss.reserve(split_size(&view, &key, at)) {
                Ok(r) => r,
                Err(e) => {
                    self.retire_page(new)?;
                    return Err(e);
                }
            };
            let id = self.fresh_notice_id();
            let desc = Arc::new(SplitDescriptor {
                id,
                split_key: key,
                old_id: pid,
                new_id: new,
                root_left: None,
                buffer_loc: Some(res.location()),
                reservation: Some(res.clone()),
            });
            self.hook("split.reserved")?;
            let sn_n = self.notice_node(DeltaKind::SNotice(desc.clone()), id);
            unsafe { (*sn_n).next.store(head, Ordering::Relaxed) };
            let ok = self.table.install(new, std::ptr::null_mut(), sn_n);
            debug_assert!(ok);
            let sn_o = self.notice_node(DeltaKind::SNotice(desc.clone()), id);
            if self.try_prepend(pid, sn_o, head) {
                Stats::bump(&self.stats.notices_won);
                Stats::bump(&self.stats.splits);
                self.hook("split.snotice")?;
                self.complete_split(&desc, g)?;
                return Ok(true);
            }
            // Lost: nobody can reach N, undo it and give the space back.
            self.discard(sn_o);
            self.table.install(new, sn_n, std::ptr::null_mut());
            self.retire_node(sn_n);
            self.retire_page(new)?;
            if res.claim() {
                self.lss.fill_pad(&res);
                self.lss.release(&res)?;
            }
            Stats::bump(&self.stats.notices_lost);
            return Ok(false);
        }
        Ok(false)
    }

    /// Runs (or resumes) the split described by `desc`: persist both images,
    /// install N, install O, post the index term.
    pub(crate) fn complete_split(&self, desc: &Arc<SplitDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let (o, n) = (desc.old_id, desc.new_id);
        let Some(sn_o) = self.find_notice(o, desc.id, g) else { return Ok(()) };
        let region = self.node(sn_o, g).next_ptr();
        let view = self.collect(o, region, g)?;
        let (oimg, nimg, moved) = split_images(&view, &desc.split_key, n);
        let mut durable = false;
        if let Some(res) = &desc.reservation {
            if res.claim() {
                debug_assert_eq!(res.size(), split_frame_len(&desc.split_key, &oimg, &nimg));
                self.lss.fill_split_pair(res, o, &desc.split_key, &oimg, &nimg);
                stats::note_moves(moved);
                self.stats.record_moves.fetch_add(moved as u64, Ordering::Relaxed);
                self.hook("split.images_written")?;
                self.lss.release(res)?;
                self.hook("split.released")?;
            }
            durable = res.is_released();
        }
        let loc = desc.buffer_loc.filter(|_| durable);
        if let Some(sn_n) = self.find_notice(n, desc.id, g) {
            let base = Node::boxed(Body::Base(nimg, loc.map(|l| (l, FrameHalf::SplitNew))));
            if self.replace_notice(n, sn_n, base, g) {
                self.retire_node(sn_n);
                Stats::bump(&self.stats.installs_succeeded);
            } else {
                self.discard(base);
                Stats::bump(&self.stats.installs_superseded);
            }
        }
        self.hook("split.install_n")?;
        let base = Node::boxed(Body::Base(oimg, loc.map(|l| (l, FrameHalf::SplitOld))));
        if self.replace_notice(o, sn_o, base, g) {
            self.retire_run(sn_o);
            Stats::bump(&self.stats.installs_succeeded);
        } else {
            self.discard(base);
            Stats::bump(&self.stats.installs_superseded);
        }
        self.hook("split.install_o")?;
        if let Some(path) = self.find_path(o, &desc.split_key, g)? {
            if let Some(&parent) = path.last() {
                self.complete_term(parent, &desc.split_key, n, o, g)?;
                self.hook("split.parent_term")?;
            }
        }
        Ok(())
    }

    /// Posts a root-split sNOTICE. `None` means the root moved and the
    /// caller should retry.
    fn post_root_split(&self, head: *mut Node, key: Key, g: &EpochGuard<'_>) -> Result<Option<bool>> {
        let left = self.table.allocate_page()?;
        let right = match self.table.allocate_page() {
            Ok(r) => r,
            Err(e) => {
                self.retire_page(left)?;
                return Err(e);
            }
        };
        let id = self.fresh_notice_id();
        let desc = Arc::new(SplitDescriptor {
            id,
            split_key: key,
            old_id: PageId::ROOT,
            new_id: right,
            root_left: Some(left),
            buffer_loc: None,
            reservation: None,
        });
        let sn = self.notice_node(DeltaKind::SNotice(desc.clone()), id);
        if self.try_prepend(PageId::ROOT, sn, head) {
            Stats::bump(&self.stats.notices_won);
            Stats::bump(&self.stats.root_splits);
            self.hook("split.snotice")?;
            self.complete_root_split(&desc, g)?;
            return Ok(Some(true));
        }
        self.discard(sn);
        self.retire_page(left)?;
        self.retire_page(right)?;
        Stats::bump(&self.stats.notices_lost);
        Ok(None)
    }

    /// The root's content moves into two fresh children; the root becomes a
    /// two-way index over them.
    pub(crate) fn complete_root_split(&self, desc: &Arc<SplitDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let Some(sn) = self.find_notice(PageId::ROOT, desc.id, g) else { return Ok(()) };
        let left = desc.root_left.unwrap();
        let right = desc.new_id;
        let view = self.collect(PageId::ROOT, self.node(sn, g).next_ptr(), g)?;
        let (l, r, _) = split_images(&view, &desc.split_key, right);
        for (pid, img) in [(left, l), (right, r)] {
            let base = Node::boxed(Body::Base(img, None));
            if self.table.install(pid, std::ptr::null_mut(), base) {
                Stats::bump(&self.stats.installs_succeeded);
            } else {
                self.discard(base);
            }
        }
        let root = BasePage {
            content: PageContent::Index { first: left, terms: vec![(desc.split_key.clone(), right)] },
            high_key: None,
            side_link: None,
            lsn: 0,
        };
        let base = Node::boxed(Body::Base(root, None));
        if self.replace_notice(PageId::ROOT, sn, base, g) {
            self.retire_run(sn);
            Stats::bump(&self.stats.installs_succeeded);
        } else {
            self.discard(base);
            Stats::bump(&self.stats.installs_superseded);
        }
        self.hook("split.install_o")?;
        Ok(())
    }

    /// Index pages from the root down to (excluding) `target`, following the
    /// route of `key`. `None` if the route does not pass through `target`.
    pub(crate) fn find_path(&self, target: PageId, key: &Key, g: &EpochGuard<'_>) -> Result<Option<Vec<PageId>>> {
        let mut restarts = 0;
        'outer: loop {
            let mut pid = PageId::ROOT;
            let mut path = Vec::new();
            loop {
                if pid == target {
                    return Ok(Some(path));
                }
                let head = match self.table.head(pid) {
                    Ok(h) if is_real(h) => h,
                    _ => {
                        restarts += 1;
                        if restarts > 64 {
                            return Ok(None);
                        }
                        continue 'outer;
                    }
                };
                let mut info = IndexInfo::default();
                match self.walk_index(pid, head, RouteKey::At(key), &mut info, g)? {
                    IndexStep::Leaf => return Ok(None),
                    IndexStep::Child(c) => {
                        path.push(pid);
                        pid = c;
                    }
                    IndexStep::Side(s, _) | IndexStep::Redirect(s) => pid = s,
                    IndexStep::Restart => {
                        restarts += 1;
                        if restarts > 64 {
                            return Ok(None);
                        }
                        continue 'outer;
                    }
                }
            }
        }
    }

    /// Posts the index term (`sep` -> `child`) in `parent` or one of its right
    /// siblings, unless it is already there or `left` no longer leads to
    /// `child`. Returns true if the term is present afterwards.
    pub(crate) fn complete_term(
        &self,
        parent: PageId,
        sep: &Key,
        child: PageId,
        left: PageId,
        g: &EpochGuard<'_>,
    ) -> Result<bool> {
        let mut p = parent;
        for _ in 0..256 {
            let head = match self.table.head(p) {
                Ok(h) if is_real(h) => h,
                _ => return Ok(false),
            };
            let mut info = IndexInfo::default();
            match self.walk_index(p, head, RouteKey::After(sep), &mut info, g)? {
                IndexStep::Leaf | IndexStep::Restart => return Ok(false),
                IndexStep::Side(s, _) | IndexStep::Redirect(s) => p = s,
                IndexStep::Child(c) => {
                    if c == child {
                        return Ok(true);
                    }
                    if c != left || info.root_split_live || !info.pnotices.is_empty() {
                        return Ok(false);
                    }
                    match self.base_bounds(left, g) {
                        Some((Some(h), Some(s), _)) if &h == sep && s == child => {}
                        _ => return Ok(false),
                    }
                    let node = self.delta_node(DeltaKind::IndexTermPost { sep: sep.clone(), child });
                    if self.try_prepend(p, node, head) {
                        Stats::bump(&self.stats.index_terms_posted);
                        if self.cfg.auto_maintenance {
                            self.maintain_page(p, g)?;
                        }
                        return Ok(true);
                    }
                    self.discard(node);
                }
            }
        }
        Ok(false)
    }

    /// Consolidates or splits `pid` when it is over threshold.
    pub(crate) fn maintain_page(&self, pid: PageId, g: &EpochGuard<'_>) -> Result<()> {
        if self.chain_length(pid, g) >= self.cfg.consolidate_threshold {
            self.try_consolidate(pid, self.cfg.consolidate_threshold, g)?;
        }
        let Ok(head) = self.table.head(pid) else { return Ok(()) };
        if !is_real(head) || self.live_notice(pid, head, g).is_some() {
            return Ok(());
        }
        if self.cheap_over_threshold(pid, g) {
            self.try_split(pid, false, g)?;
        }
        Ok(())
    }

    /// Threshold check on an in-memory base without reading storage.
    fn cheap_over_threshold(&self, pid: PageId, g: &EpochGuard<'_>) -> bool {
        let Ok(mut p) = self.table.head(pid) else { return false };
        let mut deltas = 0;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(_) => {
                    deltas += 1;
                    p = n.next_ptr();
                }
                Body::Base(b, _) => {
                    return b.entry_count() + deltas >= self.cfg.split_record_threshold
                        || format::image_len(b) >= self.cfg.split_bytes_threshold;
                }
                Body::Stub(_) => return false,
            }
        }
        false
    }

    // ---- merge --------------------------------------------------------

    /// Starts merging leaf `m` with its right sibling if both are small and
    /// share a parent. Returns true if the merge completed.
    pub(crate) fn try_merge(&self, m: PageId, force: bool, g: &EpochGuard<'_>) -> Result<bool> {
        let Ok(head_m) = self.table.head(m) else { return Ok(false) };
        if m == PageId::ROOT || !is_real(head_m) || self.live_notice(m, head_m, g).is_some() {
            return Ok(false);
        }
        let vm = self.collect(m, head_m, g)?;
        if !vm.is_leaf || (!force && vm.entry_count() >= self.cfg.merge_record_threshold) {
            return Ok(false);
        }
        let (Some(sep), Some(d)) = (vm.high.clone(), vm.side) else { return Ok(false) };
        let Ok(head_d) = self.table.head(d) else { return Ok(false) };
        if !is_real(head_d) || self.live_notice(d, head_d, g).is_some() {
            return Ok(false);
        }
        let vd = self.collect(d, head_d, g)?;
        let merged = vm.records.len() + vd.records.len();
        let bytes = leaf_image_len(&vm.records, None) + leaf_image_len(&vd.records, vd.high.as_ref());
        if merged + self.cfg.merge_record_threshold >= self.cfg.split_record_threshold
            || bytes * 4 >= self.cfg.split_bytes_threshold * 3
        {
            return Ok(false);
        }
        let Some(path) = self.find_path(m, &sep, g)? else { return Ok(false) };
        let Some(&p) = path.last() else { return Ok(false) };
        let Ok(head_p) = self.table.head(p) else { return Ok(false) };
        if !is_real(head_p) || self.live_notice(p, head_p, g).is_some() {
            return Ok(false);
        }
        let vp = self.collect(p, head_p, g)?;
        if !vp.terms.iter().any(|(s, c)| s == &sep && *c == d) {
            return Ok(false);
        }
        let id = self.fresh_notice_id();
        let desc = Arc::new(MergeDescriptor::new(id, p, m, d, sep));
        let pn = self.notice_node(DeltaKind::PNotice(desc.clone()), id);
        if !self.try_prepend(p, pn, head_p) {
            self.discard(pn);
            Stats::bump(&self.stats.notices_lost);
            return Ok(false);
        }
        Stats::bump(&self.stats.notices_won);
        self.hook("merge.pnotice")?;
        Ok(matches!(self.run_merge(&desc, g)?, MergeOutcome::Done))
    }

    /// Drives a merge forward from whatever phase it is in.
    pub(crate) fn run_merge(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<MergeOutcome> {
        loop {
            match desc.phase() {
                MergePhase::ParentNoticed => self.post_dnotice(desc, g)?,
                MergePhase::RemovedNoticed => {
                    if !desc.transition(MergePhase::RemovedNoticed, MergePhase::PostingSurvivor) {
                        continue;
                    }
                    match self.post_mnotice(desc, g) {
                        Ok(PostM::Posted) => {
                            desc.transition(MergePhase::PostingSurvivor, MergePhase::SurvivorNoticed);
                            self.hook("merge.mnotice")?;
                        }
                        Ok(PostM::Busy) => {
                            desc.transition(MergePhase::PostingSurvivor, MergePhase::RemovedNoticed);
                            Stats::bump(&self.stats.merge_yields);
                            self.hook("merge.wait_m")?;
                            return Ok(MergeOutcome::Yield);
                        }
                        Ok(PostM::Conflict) => {
                            desc.transition(MergePhase::PostingSurvivor, MergePhase::Aborted);
                        }
                        Err(e) => {
                            desc.transition(MergePhase::PostingSurvivor, MergePhase::RemovedNoticed);
                            return Err(e);
                        }
                    }
                }
                MergePhase::PostingSurvivor => {
                    self.hook("merge.wait_m")?;
                    std::thread::yield_now();
                    return Ok(MergeOutcome::Yield);
                }
                MergePhase::SurvivorNoticed => {
                    self.install_merged(desc, g)?;
                    desc.advance_phase(MergePhase::Merged);
                    self.hook("merge.install_m")?;
                }
                MergePhase::Merged => {
                    self.remove_parent_term(desc, g)?;
                    self.hook("merge.void_p")?;
                    self.retire_removed(desc, g)?;
                    desc.advance_phase(MergePhase::Done);
                    self.hook("merge.retire_d")?;
                }
                MergePhase::Done => return Ok(MergeOutcome::Done),
                MergePhase::Aborted => {
                    self.cleanup_aborted(desc, g)?;
                    return Ok(MergeOutcome::Aborted);
                }
            }
        }
    }

    /// Aborts the merge if it has not passed the point of no return, else
    /// helps it finish.
    pub(crate) fn abort_or_help(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        if desc.try_abort() {
            self.cleanup_aborted(desc, g)?;
        } else {
            self.run_merge(desc, g)?;
        }
        Ok(())
    }

    fn post_dnotice(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let d = desc.removed_id;
        if let Some(dn) = self.find_notice(d, desc.id, g) {
            let _ = desc.removed_notice.compare_exchange(
                std::ptr::null_mut(),
                dn,
                Ordering::AcqRel,
                Ordering::Acquire,
            );
            desc.advance_phase(MergePhase::RemovedNoticed);
            return Ok(());
        }
        let head = match self.table.head(d) {
            Ok(h) if is_real(h) => h,
            _ => {
                desc.try_abort();
                return Ok(());
            }
        };
        if self.live_notice(d, head, g).is_some() {
            desc.try_abort();
            return Ok(());
        }
        let dn = self.notice_node(DeltaKind::DNotice(desc.clone()), desc.id);
        if !self.try_prepend(d, dn, head) {
            self.discard(dn);
            return Ok(());
        }
        let _ = desc.removed_notice.compare_exchange(std::ptr::null_mut(), dn, Ordering::AcqRel, Ordering::Acquire);
        desc.advance_phase(MergePhase::RemovedNoticed);
        self.hook("merge.dnotice")?;
        Ok(())
    }

    /// Posts the mNOTICE on M. Caller holds the PostingSurvivor claim.
    fn post_mnotice(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<PostM> {
        let m = desc.survivor_id;
        loop {
            let head = match self.table.head(m) {
                Ok(h) if is_real(h) => h,
                _ => return Ok(PostM::Conflict),
            };
            if self.find_notice(m, desc.id, g).is_some() {
                return Ok(PostM::Posted);
            }
            if let Some(n) = self.live_notice(m, head, g) {
                let d = self.node(n, g).delta().unwrap();
                if !matches!(d.kind, DeltaKind::CNotice) {
                    return Ok(PostM::Conflict);
                }
                if self.expired(d) {
                    self.takeover(m, n, g)?;
                    continue;
                }
                return Ok(PostM::Busy);
            }
            match self.base_bounds(m, g) {
                Some((Some(h), Some(s), true)) if h == desc.sep_key && s == desc.removed_id => {}
                _ => return Ok(PostM::Conflict),
            }
            let mn = self.notice_node(DeltaKind::MNotice(desc.clone()), desc.id);
            if self.try_prepend(m, mn, head) {
                return Ok(PostM::Posted);
            }
            self.discard(mn);
        }
    }

    fn install_merged(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let m = desc.survivor_id;
        let Some(mn) = self.find_notice(m, desc.id, g) else { return Ok(()) };
        let view = self.collect(m, mn, g)?;
        let base = Node::boxed(Body::Base(view.to_base(), None));
        if self.replace_notice(m, mn, base, g) {
            self.retire_run(mn);
            Stats::bump(&self.stats.installs_succeeded);
        } else {
            self.discard(base);
            Stats::bump(&self.stats.installs_superseded);
        }
        Ok(())
    }

    /// Voids the pNOTICE and removes D's term from P in one step.
    fn remove_parent_term(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let p = desc.parent_id;
        loop {
            let head = match self.table.head(p) {
                Ok(h) if is_real(h) => h,
                _ => return Ok(()),
            };
            if !self.notice_is_live_from(head, desc.id, g) {
                return Ok(());
            }
            let rm = self.delta_node(DeltaKind::IndexTermRemove { sep: desc.sep_key.clone() });
            let vm = self.delta_node(DeltaKind::VoidMarker(desc.id));
            unsafe {
                (*rm).next.store(head, Ordering::Relaxed);
                (*vm).next.store(rm, Ordering::Relaxed);
            }
            if self.table.install(p, head, vm) {
                self.reclaimer.on_publish(rm);
                self.reclaimer.on_publish(vm);
                Stats::bump(&self.stats.index_terms_removed);
                return Ok(());
            }
            self.discard(vm);
            self.discard(rm);
        }
    }

    fn retire_removed(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        let d = desc.removed_id;
        let dn = desc.removed_notice.load(Ordering::Acquire);
        let Ok(head) = self.table.head(d) else { return Ok(()) };
        if !is_real(head) {
            return Ok(());
        }
        let mut above = 0;
        let mut p = head;
        while is_real(p) && p != dn {
            above += 1;
            p = self.node(p, g).next_ptr();
        }
        if self.retire_page(d)? {
            self.stats.dnotice_violations.fetch_add(above, Ordering::Relaxed);
            Stats::bump(&self.stats.merges);
            self.lss.write_dead(d)?;
        }
        Ok(())
    }

    fn cleanup_aborted(&self, desc: &Arc<MergeDescriptor>, g: &EpochGuard<'_>) -> Result<()> {
        self.void_notice(desc.removed_id, desc.id, g);
        if self.void_notice(desc.parent_id, desc.id, g) {
            Stats::bump(&self.stats.merges_aborted);
        }
        Ok(())
    }

    /// Prepends a VoidMarker for notice `id` if it is live in `pid`'s chain.
    pub(crate) fn void_notice(&self, pid: PageId, id: u64, g: &EpochGuard<'_>) -> bool {
        loop {
            let head = match self.table.head(pid) {
                Ok(h) if is_real(h) => h,
                _ => return false,
            };
            if !self.notice_is_live_from(head, id, g) {
                return false;
            }
            let vm = self.delta_node(DeltaKind::VoidMarker(id));
            if self.try_prepend(pid, vm, head) {
                return true;
            }
            self.discard(vm);
        }
    }

    /// True if notice `id` is reachable from `head` and not voided above it.
    fn notice_is_live_from(&self, head: *mut Node, id: u64, g: &EpochGuard<'_>) -> bool {
        let mut p = head;
        while is_real(p) {
            let n = self.node(p, g);
            match &n.body {
                Body::Delta(d) => {
                    if matches!(d.kind, DeltaKind::VoidMarker(v) if v == id) {
                        return false;
                    }
                    if d.notice_id == id && d.kind.is_notice() {
                        return true;
                    }
                    p = n.next_ptr();
                }
                _ => return false,
            }
        }
        false
    }

    // ---- eviction -----------------------------------------------------

    /// Writes `pid`'s current state to storage and replaces the chain with a
    /// stub. Returns false if the page is busy or already on storage.
    pub(crate) fn evict_page(&self, pid: PageId, g: &EpochGuard<'_>) -> Result<bool> {
        let head = match self.table.head(pid) {
            Ok(h) if is_real(h) => h,
            _ => return Ok(false),
        };
        if matches!(self.node(head, g).body, Body::Stub(_)) {
            return Ok(false);
        }
        if self.live_notice(pid, head, g).is_some() {
            Stats::bump(&self.stats.evictions_abandoned);
            return Ok(false);
        }
        let view = self.collect(pid, head, g)?;
        let stub_of = |loc, half| {
            Node::boxed(Body::Stub(Stub {
                loc,
                half,
                is_leaf: view.is_leaf,
                high_key: view.high.clone(),
                side_link: view.side,
            }))
        };
        if let Some((loc, half)) = view.clean {
            let stub = stub_of(loc, half);
            if self.table.install(pid, head, stub) {
                self.retire_run(head);
                Stats::bump(&self.stats.evictions);
                return Ok(true);
            }
            self.discard(stub);
            Stats::bump(&self.stats.evictions_abandoned);
            return Ok(false);
        }
        let image = view.to_base();
        let res = self.lss.reserve(format::frame_len(format::image_len(&image)))?;
        assert!(res.claim());
        self.lss.fill_base(&res, pid, &image);
        let stub = stub_of(res.location(), FrameHalf::Whole);
        if self.table.install(pid, head, stub) {
            self.lss.release(&res)?;
            self.retire_run(head);
            Stats::bump(&self.stats.evictions);
            Ok(true)
        } else {
            self.lss.fill_pad(&res);
            self.lss.release(&res)?;
            self.discard(stub);
            Stats::bump(&self.stats.evictions_abandoned);
            Ok(false)
        }
    }
}
