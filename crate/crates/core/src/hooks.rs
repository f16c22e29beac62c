//! Named checkpoints inside structure modifications, for fault injection and
//! deterministic interleaving.

/// Every checkpoint the engine reports, in the order they occur within
/// their operation.
pub const CHECKPOINTS: &[&str] = &[
    "op.restart",
    "put.resolved",
    "put.installed",
    "cnotice.posted",
    "consolidate.before_install",
    "split.reserved",
    "split.snotice",
    "split.images_written",
    "split.released",
    "split.install_n",
    "split.install_o",
    "split.parent_term",
    "merge.pnotice",
    "merge.dnotice",
    "merge.wait_m",
    "merge.mnotice",
    "merge.install_m",
    "merge.retire_d",
    "merge.void_p",
];

/// The split checkpoints, in order.
pub const SPLIT_CHECKPOINTS: &[&str] = &[
    "split.reserved",
    "split.snotice",
    "split.images_written",
    "split.released",
    "split.install_n",
    "split.install_o",
    "split.parent_term",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    /// Simulate a process crash: optionally seal and flush what can be
    /// flushed, then stop all storage writes. The operation fails with
    /// `Error::Crashed`.
    Crash { flush_first: bool },
    /// Simulate the death of the calling thread: it abandons its work here,
    /// leaving every posted notice in place. The operation fails with
    /// `Error::Killed`.
    Kill,
}

pub trait Hooks: Send + Sync {
    fn checkpoint(&self, point: &'static str) -> HookAction;
}

pub fn is_known(point: &str) -> bool {
    CHECKPOINTS.contains(&point)
}
