use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Default)]
        pub struct Stats {
            $(pub(crate) $name: AtomicU64,)*
        }

        /// Point-in-time copy of the engine counters.
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
        pub struct StatsSnapshot {
            $(pub $name: u64,)*
            pub physical_writes: u64,
            pub physical_reads: u64,
            pub pages_flushed: u64,
            pub bytes_flushed: u64,
            pub outstanding_reservations: i64,
            pub double_retires: u64,
            pub poison_reads: u64,
            pub nodes_freed: u64,
            pub epoch: u64,
        }

        impl Stats {
            pub(crate) fn fill(&self, s: &mut StatsSnapshot) {
                $(s.$name = self.$name.load(Ordering::Relaxed);)*
            }
        }
    };
}

counters!(
    ops,
    consolidations,
    splits,
    root_splits,
    merges,
    merges_aborted,
    notices_won,
    notices_lost,
    takeovers,
    installs_succeeded,
    installs_superseded,
    heavy_consolidations,
    record_moves,
    index_terms_posted,
    index_terms_removed,
    dnotice_violations,
    evictions,
    evictions_abandoned,
    pages_assembled,
    merge_yields,
    chain_samples,
    chain_length_total,
    chain_length_max,
);

impl Stats {
    pub(crate) fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn sample_chain(&self, len: usize) {
        self.chain_samples.fetch_add(1, Ordering::Relaxed);
        self.chain_length_total.fetch_add(len as u64, Ordering::Relaxed);
        self.chain_length_max.fetch_max(len as u64, Ordering::Relaxed);
    }
}

impl StatsSnapshot {
    pub fn avg_chain_length(&self) -> f64 {
        if self.chain_samples == 0 {
            0.0
        } else {
            self.chain_length_total as f64 / self.chain_samples as f64
        }
    }
}

thread_local! {
    static HEAVY: Cell<u64> = const { Cell::new(0) };
    static MOVES: Cell<u64> = const { Cell::new(0) };
}

/// Heavy consolidation executions performed by the calling thread.
pub fn thread_heavy_work() -> u64 {
    HEAVY.with(|c| c.get())
}

/// Records copied into split images by the calling thread.
pub fn thread_record_moves() -> u64 {
    MOVES.with(|c| c.get())
}

pub(crate) fn note_heavy() {
    HEAVY.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_moves(n: usize) {
    MOVES.with(|c| c.set(c.get() + n as u64));
}
