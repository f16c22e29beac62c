//! Shared engine state and small helpers used by the chain, SMO and tree
//! layers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::config::Config;
use crate::epoch::{EpochGuard, EpochManager};
use crate::error::{Error, Result};
use crate::hooks::HookAction;
use crate::lss::LogStore;
use crate::mapping::MappingTable;
use crate::model::{Delta, DeltaKind, PageId};
use crate::node::{self, Body, Node, NodeReclaimer};
use crate::stats::Stats;

pub(crate) struct Engine {
    pub cfg: Config,
    pub table: Arc<MappingTable>,
    pub epoch: EpochManager,
    pub reclaimer: Arc<NodeReclaimer>,
    pub lss: LogStore,
    pub stats: Stats,
    next_notice: AtomicU64,
}

impl Engine {
    pub fn new(cfg: Config, table: MappingTable, lss: LogStore) -> Engine {
        let poison = cfg.poison_on_reclaim;
        Engine {
            cfg,
            table: Arc::new(table),
            epoch: EpochManager::new(),
            reclaimer: Arc::new(NodeReclaimer::new(poison)),
            lss,
            stats: Stats::default(),
            next_notice: AtomicU64::new(1),
        }
    }

    /// Dereferences a chain pointer under `g`.
    #[inline]
    pub fn node<'g>(&self, p: *mut Node, g: &'g EpochGuard<'_>) -> &'g Node {
        debug_assert!(node::is_real(p));
        // SAFETY: every pointer handed to this function was read from a
        // mapping entry or a chain link while `g` was held.
        unsafe { self.reclaimer.deref(p, g) }
    }

    pub fn new_delta(&self, kind: DeltaKind) -> Delta {
        let mut d = Delta::new(kind);
        d.posted_epoch = self.epoch.current();
        if d.kind.is_notice() {
            d.notice_id = self.fresh_notice_id();
        }
        d
    }

    pub fn fresh_notice_id(&self) -> u64 {
        self.next_notice.fetch_add(1, Ordering::Relaxed)
    }

    /// A notice node carrying an explicit id (used for the two sNOTICE
    /// nodes of one split).
    pub fn notice_node(&self, kind: DeltaKind, id: u64) -> *mut Node {
        let mut d = Delta::new(kind);
        d.posted_epoch = self.epoch.current();
        d.notice_id = id;
        Node::boxed(Body::Delta(d))
    }

    pub fn delta_node(&self, kind: DeltaKind) -> *mut Node {
        Node::boxed(Body::Delta(self.new_delta(kind)))
    }

    /// Reports a named checkpoint to the installed hooks.
    pub fn hook(&self, point: &'static str) -> Result<()> {
        let Some(h) = &self.cfg.hooks else { return Ok(()) };
        match h.checkpoint(point) {
            HookAction::Continue => Ok(()),
            HookAction::Crash { flush_first } => {
                self.lss.crash(flush_first);
                Err(Error::Crashed)
            }
            HookAction::Kill => Err(Error::Killed),
        }
    }

    pub fn expired(&self, d: &Delta) -> bool {
        self.epoch.current().saturating_sub(d.posted_epoch) >= self.cfg.notice_timeout_epochs
    }

    /// Frees a node that was never published.
    pub fn discard(&self, p: *mut Node) {
        // SAFETY: the caller created `p` and no other thread has seen it.
        unsafe { drop(Box::from_raw(p)) }
    }

    pub fn retire_node(&self, p: *mut Node) {
        node::retire_node(&self.epoch, &self.reclaimer, p);
    }

    pub fn retire_run(&self, start: *mut Node) {
        node::retire_run(&self.epoch, &self.reclaimer, start, std::ptr::null_mut());
    }

    pub fn retire_page(&self, id: PageId) -> Result<bool> {
        let old = self.table.retire_page(id, &self.epoch, &self.reclaimer)?;
        Ok(!old.is_null())
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        // Nothing else can reach the table now. Live chains are disjoint from
        // every retired run still queued in the epoch manager.
        let heads: Vec<*mut Node> = self.table.raw_entries().map(|(_, p)| p).collect();
        unsafe { node::free_all(heads.into_iter(), &self.reclaimer) };
    }
}
