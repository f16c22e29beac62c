use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex};

use noticetree::{Config, HookAction, Hooks, Store};

fn key(i: u64) -> Vec<u8> {
    format!("k{i:06}").into_bytes()
}

/// Fires `action` the first time `point` is reached while armed.
#[derive(Default)]
struct OneShot {
    armed: Mutex<Option<(&'static str, HookAction)>>,
}

impl OneShot {
    fn arm(&self, point: &'static str, action: HookAction) {
        *self.armed.lock().unwrap() = Some((point, action));
    }
}

impl Hooks for OneShot {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        let mut a = self.armed.lock().unwrap();
        match *a {
            Some((p, action)) if p == point => {
                *a = None;
                action
            }
            _ => HookAction::Continue,
        }
    }
}

/// Holds the first `n` threads that reach `point` until all of them have.
struct Rendezvous {
    point: &'static str,
    armed: AtomicBool,
    barrier: Barrier,
    seen: Mutex<usize>,
    n: usize,
}

impl Hooks for Rendezvous {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        if point == self.point && self.armed.load(Ordering::Acquire) {
            let mut s = self.seen.lock().unwrap();
            if *s < self.n {
                *s += 1;
                drop(s);
                self.barrier.wait();
            }
        }
        HookAction::Continue
    }
}

fn manual(dir: &std::path::Path) -> Config {
    let mut c = Config::new(dir);
    c.mapping_capacity = 1 << 14;
    c.auto_maintenance = false;
    c
}

#[test]
fn cnotice_contention_has_one_heavy_consolidation() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(manual(dir.path())).unwrap());
    for i in 0..20 {
        store.put(&key(i), b"v").unwrap();
    }
    let threads = 16;
    let rounds = 100;
    let start = Arc::new(Barrier::new(threads + 1));
    let done = Arc::new(Barrier::new(threads + 1));
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let (store, start, done) = (store.clone(), start.clone(), done.clone());
            std::thread::spawn(move || {
                let mut per_round = Vec::new();
                for _ in 0..rounds {
                    start.wait();
                    let before = noticetree::thread_heavy_work();
                    let won = store.consolidate_leaf(&key(3)).unwrap();
                    per_round.push((won, noticetree::thread_heavy_work() - before));
                    done.wait();
                }
                per_round
            })
        })
        .collect();
    for r in 0..rounds {
        store.put(&key(r % 20), format!("r{r}").as_bytes()).unwrap();
        start.wait();
        done.wait();
    }
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for r in 0..rounds as usize {
        let winners = results.iter().filter(|t| t[r].0).count();
        let heavy: u64 = results.iter().map(|t| t[r].1).sum();
        let loser_heavy: u64 = results.iter().filter(|t| !t[r].0).map(|t| t[r].1).sum();
        assert_eq!(winners, 1, "round {r}");
        assert_eq!(heavy, 1, "round {r}");
        assert_eq!(loser_heavy, 0, "round {r}");
    }
    assert_eq!(store.stats().heavy_consolidations, rounds);
    assert_eq!(store.get(&key(19)).unwrap().unwrap().as_bytes(), b"r99");
}

#[test]
fn split_race_loser_moves_nothing() {
    for _ in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let hook = Arc::new(Rendezvous {
            point: "split.reserved",
            armed: AtomicBool::new(false),
            barrier: Barrier::new(2),
            seen: Mutex::new(0),
            n: 2,
        });
        let store = Arc::new(Store::open(manual(dir.path()).with_hooks(hook.clone())).unwrap());
        for i in 0..40 {
            store.put(&key(i), &[1u8; 32]).unwrap();
        }
        hook.armed.store(true, Ordering::Release);
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let store = store.clone();
                std::thread::spawn(move || {
                    let won = store.split_leaf(&key(10)).unwrap();
                    (won, noticetree::thread_record_moves())
                })
            })
            .collect();
        let res: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(res.iter().filter(|r| r.0).count(), 1, "{res:?}");
        let loser = res.iter().find(|r| !r.0).unwrap();
        let winner = res.iter().find(|r| r.0).unwrap();
        assert_eq!(loser.1, 0);
        assert_eq!(winner.1, 20);
        assert_eq!(store.outstanding_reservations(), 0);
        assert_eq!(store.stats().splits, 1);
        assert!(store.validate().unwrap().is_ok());
        for i in 0..40 {
            assert!(store.get(&key(i)).unwrap().is_some());
        }
    }
}

struct Takeover {
    installs: u64,
    consolidations: u64,
    terms_posted: u64,
    terms_removed: u64,
    merges: u64,
    advances: u64,
}

/// Kills the thread that posts a notice right after `point`, then advances
/// epochs and runs maintenance until another thread has finished the work.
fn kill_and_recover(point: &'static str, setup: impl Fn(&Store), act: impl Fn(&Store) -> noticetree::Result<bool>) -> Takeover {
    let dir = tempfile::tempdir().unwrap();
    let hook = Arc::new(OneShot::default());
    let store = Store::open(manual(dir.path()).with_hooks(hook.clone())).unwrap();
    setup(&store);
    let expected: Vec<_> = store.scan_all().unwrap();
    hook.arm(point, HookAction::Kill);
    assert!(matches!(act(&store), Err(noticetree::Error::Killed)));
    let before = store.stats();
    let mut advances = 0;
    loop {
        store.maintain().unwrap();
        let s = store.stats();
        if s.takeovers > before.takeovers {
            break;
        }
        assert!(advances < 3, "no takeover after {advances} epoch advances");
        store.advance_epoch();
        advances += 1;
    }
    let after = store.stats();
    assert_eq!(after.installs_superseded, before.installs_superseded);
    assert!(store.validate().unwrap().is_ok());
    assert_eq!(store.scan_all().unwrap(), expected);
    Takeover {
        installs: after.installs_succeeded - before.installs_succeeded,
        consolidations: after.consolidations - before.consolidations,
        terms_posted: after.index_terms_posted - before.index_terms_posted,
        terms_removed: after.index_terms_removed - before.index_terms_removed,
        merges: after.merges - before.merges,
        advances,
    }
}

fn fill(store: &Store, n: u64) {
    for i in 0..n {
        store.put(&key(i), b"value").unwrap();
    }
}

#[test]
fn killed_consolidation_is_taken_over() {
    let t = kill_and_recover("cnotice.posted", |s| fill(s, 10), |s| s.consolidate_leaf(&key(0)));
    assert_eq!((t.installs, t.consolidations), (1, 1));
    assert!(t.advances <= 3);
}

#[test]
fn killed_split_is_taken_over() {
    let t = kill_and_recover("split.snotice", |s| fill(s, 30), |s| s.split_leaf(&key(0)));
    assert_eq!(t.installs, 2);
    assert_eq!(t.terms_posted, 1);
    assert!(t.advances <= 3);
}

fn two_leaves(s: &Store) {
    fill(s, 30);
    s.split_leaf(&key(0)).unwrap();
    for i in 2..28 {
        s.delete(&key(i)).unwrap();
    }
    s.consolidate_leaf(&key(0)).unwrap();
    s.consolidate_leaf(&key(29)).unwrap();
}

#[test]
fn killed_merge_is_taken_over_after_each_notice() {
    for point in ["merge.pnotice", "merge.dnotice", "merge.mnotice"] {
        let t = kill_and_recover(point, two_leaves, |s| s.merge_leaf(&key(0)));
        assert_eq!((t.installs, t.terms_removed, t.merges), (1, 1, 1), "{point}");
        assert!(t.advances <= 3, "{point}");
    }
}

#[test]
fn update_to_removed_page_helps_merge() {
    let dir = tempfile::tempdir().unwrap();
    let hook = Arc::new(OneShot::default());
    let store = Store::open(manual(dir.path()).with_hooks(hook.clone())).unwrap();
    two_leaves(&store);
    hook.arm("merge.dnotice", HookAction::Kill);
    assert!(store.merge_leaf(&key(0)).is_err());
    store.put(&key(29), b"fresh").unwrap();
    let s = store.stats();
    assert_eq!((s.merges, s.merges_aborted, s.dnotice_violations), (1, 0, 0));
    assert!(store.validate().unwrap().is_ok());
    assert_eq!(store.leaf_of(&key(0)).unwrap(), store.leaf_of(&key(29)).unwrap());
    assert_eq!(store.get(&key(29)).unwrap().unwrap().as_bytes(), b"fresh");
}

#[test]
fn survivor_split_aborts_merge() {
    let dir = tempfile::tempdir().unwrap();
    let hook = Arc::new(OneShot::default());
    let store = Store::open(manual(dir.path()).with_hooks(hook.clone())).unwrap();
    two_leaves(&store);
    hook.arm("merge.dnotice", HookAction::Kill);
    assert!(store.merge_leaf(&key(0)).is_err());
    assert!(store.split_leaf(&key(0)).unwrap());
    store.put(&key(29), b"fresh").unwrap();
    let s = store.stats();
    assert_eq!((s.merges, s.merges_aborted), (0, 1));
    assert!(store.validate().unwrap().is_ok());
    for k in [0, 1, 28, 29] {
        assert!(store.get(&key(k)).unwrap().is_some(), "{k}");
    }
    assert_eq!(store.get(&key(29)).unwrap().unwrap().as_bytes(), b"fresh");
}
