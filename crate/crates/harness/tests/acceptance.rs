//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use noticetree::hooks::SPLIT_CHECKPOINTS;
use noticetree::{fsck, Config, HookAction, Hooks, Store};
use noticetree_harness::bench::run_bench;
use noticetree_harness::sched::{explore, Replay, Scheduler};
use noticetree_harness::workload::{KeyDist, WorkloadSpec};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn key(i: u64) -> Vec<u8> {
    format!("k{i:06}").into_bytes()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------

fn sequential_oracle() -> Outcome {
    let dir = tmp();
    let spec = WorkloadSpec {
        threads: 1,
        total_ops: 100_000,
        read_fraction: 0.5,
        key_space: 10_000,
        value_bytes: 32,
        dist: KeyDist::Uniform,
        seed: 1,
    };
    let t = Instant::now();
    let r = run_bench(&spec, Config::new(dir.path())).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(r.ok(), "{} mismatches: {:?}", r.stats.violations(), r.problems);
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("scan equals replay, {} splits, {secs:.2}s", r.stats.splits))
}

fn criterion2_spec() -> WorkloadSpec {
    WorkloadSpec {
        threads: 8,
        total_ops: 8 * 50_000,
        read_fraction: 0.5,
        key_space: 10_000,
        value_bytes: 32,
        dist: KeyDist::Zipf(0.99),
        seed: 2,
    }
}

fn concurrent_monotonic() -> Outcome {
    let dir = tmp();
    let t = Instant::now();
    let r = run_bench(&criterion2_spec(), Config::new(dir.path())).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(r.stats.monotonic_violations == 0, "{} monotonic violations: {:?}", r.stats.monotonic_violations, r.problems);
    ensure!(r.stats.final_mismatches == 0, "{} final mismatches: {:?}", r.stats.final_mismatches, r.problems);
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "0 violations, final values match, {} splits, {} notice races lost, {secs:.2}s",
        r.stats.splits, r.stats.notice_races_lost
    ))
}

fn single_winner_consolidation() -> Outcome {
    let dir = tmp();
    let mut cfg = Config::new(dir.path());
    cfg.auto_maintenance = false;
    let store = Arc::new(Store::open(cfg).map_err(e)?);
    for i in 0..20 {
        store.put(&key(i), b"v").map_err(e)?;
    }
    let (threads, rounds) = (16, 1000);
    let start = Arc::new(Barrier::new(threads + 1));
    let done = Arc::new(Barrier::new(threads + 1));
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let (store, start, done) = (store.clone(), start.clone(), done.clone());
            std::thread::spawn(move || {
                (0..rounds)
                    .map(|_| {
                        start.wait();
                        let before = noticetree::thread_heavy_work();
                        let won = store.consolidate_leaf(&key(3)).expect("consolidate");
                        let heavy = noticetree::thread_heavy_work() - before;
                        done.wait();
                        (won, heavy)
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for r in 0..rounds {
        store.put(&key(r % 20), format!("round{r}").as_bytes()).map_err(e)?;
        start.wait();
        done.wait();
    }
    let results: Vec<_> = handles.into_iter().map(|h| h.join().expect("worker")).collect();
    let mut losers_heavy = 0;
    for r in 0..rounds as usize {
        let heavy: u64 = results.iter().map(|t| t[r].1).sum();
        let winners = results.iter().filter(|t| t[r].0).count();
        losers_heavy += results.iter().filter(|t| !t[r].0).map(|t| t[r].1).sum::<u64>();
        ensure!(heavy == 1 && winners == 1, "round {r}: {winners} winners, {heavy} heavy consolidations");
    }
    ensure!(losers_heavy == 0, "losers did {losers_heavy} heavy consolidations");
    Ok(format!("{rounds} rounds x {threads} threads: 1 heavy consolidation each, losers 0"))
}

/// Holds the first two threads that reach `split.reserved` until both have.
struct SplitRendezvous {
    armed: AtomicBool,
    seen: Mutex<usize>,
    barrier: Barrier,
}

impl Hooks for SplitRendezvous {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        if point == "split.reserved" && self.armed.load(Ordering::Acquire) {
            let mut s = self.seen.lock().unwrap();
            if *s < 2 {
                *s += 1;
                drop(s);
                self.barrier.wait();
            }
        }
        HookAction::Continue
    }
}

fn cheap_split_loss() -> Outcome {
    let trials = 50;
    for trial in 0..trials {
        let dir = tmp();
        let hook = Arc::new(SplitRendezvous { armed: AtomicBool::new(false), seen: Mutex::new(0), barrier: Barrier::new(2) });
        let mut cfg = Config::new(dir.path()).with_hooks(hook.clone());
        cfg.auto_maintenance = false;
        let store = Arc::new(Store::open(cfg).map_err(e)?);
        for i in 0..40 {
            store.put(&key(i), &[7u8; 32]).map_err(e)?;
        }
        let baseline = store.outstanding_reservations();
        hook.armed.store(true, Ordering::Release);
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let store = store.clone();
                std::thread::spawn(move || {
                    let won = store.split_leaf(&key(10)).expect("split");
                    (won, noticetree::thread_record_moves())
                })
            })
            .collect();
        let res: Vec<_> = handles.into_iter().map(|h| h.join().expect("splitter")).collect();
        ensure!(res.iter().filter(|r| r.0).count() == 1, "trial {trial}: outcomes {res:?}");
        let loser = res.iter().find(|r| !r.0).expect("one loser");
        ensure!(loser.1 == 0, "trial {trial}: loser moved {} records", loser.1);
        let now = store.outstanding_reservations();
        ensure!(now == baseline, "trial {trial}: reservations {baseline} -> {now}");
        let rep = store.validate().map_err(e)?;
        ensure!(rep.is_ok(), "trial {trial}: {rep}");
    }
    Ok(format!("{trials} races: loser moved 0 records, 0 reservations leaked"))
}

struct CrashAt(Mutex<Option<(&'static str, bool)>>);

impl Hooks for CrashAt {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        let mut p = self.0.lock().unwrap();
        match *p {
            Some((at, flush_first)) if at == point => {
                *p = None;
                HookAction::Crash { flush_first }
            }
            _ => HookAction::Continue,
        }
    }
}

/// Keys grouped by the leaf holding them.
fn partition(store: &Store, n: u64) -> Result<BTreeSet<Vec<u64>>, String> {
    let mut by_leaf: BTreeMap<_, Vec<u64>> = BTreeMap::new();
    for i in 0..n {
        by_leaf.entry(store.leaf_of(&key(i)).map_err(e)?).or_default().push(i);
    }
    Ok(by_leaf.into_values().collect())
}

fn split_crash_atomicity() -> Outcome {
    const N: u64 = 60;
    let build = |dir: &std::path::Path, hook: Option<Arc<CrashAt>>| -> Result<Store, String> {
        let mut cfg = Config::new(dir);
        cfg.auto_maintenance = false;
        if let Some(h) = hook {
            cfg = cfg.with_hooks(h);
        }
        let store = Store::open(cfg).map_err(e)?;
        for i in 0..N {
            store.put(&key(i), format!("value{i}").as_bytes()).map_err(e)?;
        }
        store.split_leaf(&key(0)).map_err(e)?;
        store.checkpoint().map_err(e)?;
        Ok(store)
    };
    // reference states from an uninterrupted run
    let dir = tmp();
    let store = build(dir.path(), None)?;
    let contents = store.scan_all().map_err(e)?;
    let pre = partition(&store, N)?;
    store.split_leaf(&key(40)).map_err(e)?;
    let post = partition(&store, N)?;
    ensure!(pre != post, "reference split changed nothing");
    drop(store);

    let mut outcomes = BTreeMap::new();
    for point in SPLIT_CHECKPOINTS {
        for flush_first in [false, true] {
            let dir = tmp();
            let hook = Arc::new(CrashAt(Mutex::new(None)));
            {
                let store = build(dir.path(), Some(hook.clone()))?;
                *hook.0.lock().unwrap() = Some((point, flush_first));
                match store.split_leaf(&key(40)) {
                    Err(noticetree::Error::Crashed) => {}
                    other => return Err(format!("{point}: split returned {other:?}")),
                }
            }
            let rep = fsck::check_dir(dir.path()).map_err(e)?;
            ensure!(rep.is_ok(), "{point} flush={flush_first}: fsck {rep}");
            let store = Store::open(Config::new(dir.path())).map_err(e)?;
            ensure!(store.scan_all().map_err(e)? == contents, "{point} flush={flush_first}: contents differ");
            let got = partition(&store, N)?;
            let which = if got == pre {
                "pre"
            } else if got == post {
                "post"
            } else {
                return Err(format!("{point} flush={flush_first}: partition matches neither oracle"));
            };
            *outcomes.entry(which).or_insert(0) += 1;
        }
    }
    Ok(format!(
        "{} crash points x 2 flush modes: {} recovered pre-split, {} fully split, all fsck clean",
        SPLIT_CHECKPOINTS.len(),
        outcomes.get("pre").unwrap_or(&0),
        outcomes.get("post").unwrap_or(&0)
    ))
}

/// One update racing a forced merge of M with D, under every interleaving
/// of their checkpoints.
fn merge_protocol_safety() -> Outcome {
    let mut total = 0;
    let mut merged = 0;
    let mut aborted = 0;
    for (target, label) in [(3u64, "D"), (1u64, "M")] {
        let runs = explore(20_000, |prefix| {
            let policy = Replay::new(prefix, vec![]);
            let made = policy.made.clone();
            let sched = Scheduler::new(2, Box::new(policy));
            let dir = tmp();
            let mut cfg = Config::new(dir.path()).with_hooks(sched.clone());
            cfg.auto_maintenance = false;
            let store = Arc::new(Store::open(cfg).map_err(e)?);
            // root P over M = {0, 1} and D = {2, 3}
            for i in 0..4 {
                store.put(&key(i), b"old").map_err(e)?;
            }
            store.split_leaf(&key(0)).map_err(e)?;
            let d = store.leaf_of(&key(3)).map_err(e)?;
            ensure!(store.leaf_of(&key(1)).map_err(e)? != d, "setup did not produce two leaves");
            let results = Arc::new(Mutex::new(Vec::new()));
            let bodies: Vec<Box<dyn FnOnce() + Send>> = vec![
                {
                    let (store, results) = (store.clone(), results.clone());
                    Box::new(move || {
                        let r = store.merge_leaf(&key(0)).map(|_| ()).map_err(e);
                        results.lock().unwrap().push(("merge", r));
                    })
                },
                {
                    let (store, results) = (store.clone(), results.clone());
                    Box::new(move || {
                        let r = store.put(&key(target), b"new").map(|_| ()).map_err(e);
                        results.lock().unwrap().push(("update", r));
                    })
                },
            ];
            let trace = sched.run(bodies)?;
            for (what, r) in results.lock().unwrap().iter() {
                ensure!(r.is_ok(), "{what} failed: {r:?} after {trace:?}");
            }
            let s = store.stats();
            ensure!(s.merges + s.merges_aborted == 1, "merge neither finished nor aborted: {s:?}");
            ensure!(s.dnotice_violations == 0, "D got {} updates after its dNOTICE: {trace:?}", s.dnotice_violations);
            let v = store.get(&key(target)).map_err(e)?;
            ensure!(v.as_ref().map(|v| v.as_bytes()) == Some(&b"new"[..]), "update to {label} lost: {trace:?}");
            for i in 0..4 {
                let want: &[u8] = if i == target { b"new" } else { b"old" };
                ensure!(store.get(&key(i)).map_err(e)?.map(|v| v.as_bytes().to_vec()) == Some(want.to_vec()), "key {i} wrong");
            }
            ensure!(store.scan_all().map_err(e)?.len() == 4, "scan lost keys");
            let rep = store.validate().map_err(e)?;
            ensure!(rep.is_ok(), "{rep}");
            merged += s.merges;
            aborted += s.merges_aborted;
            let m = made.lock().unwrap().clone();
            Ok(m)
        })?;
        total += runs;
    }
    Ok(format!("{total} interleavings ({merged} merged, {aborted} aborted): update never lost, 0 updates to D after dNOTICE"))
}

fn epoch_safety() -> Outcome {
    let dir = tmp();
    let mut cfg = Config::new(dir.path());
    cfg.poison_on_reclaim = true;
    let r = run_bench(&criterion2_spec(), cfg).map_err(e)?;
    ensure!(r.stats.poison_reads == 0, "{} poison reads", r.stats.poison_reads);
    ensure!(r.stats.nodes_freed > 0, "nothing was reclaimed");
    ensure!(r.ok(), "workload violations: {:?}", r.problems);
    Ok(format!("0 poison reads over {} reclaimed nodes", r.stats.nodes_freed))
}

struct KillAt(Mutex<Option<&'static str>>);

impl Hooks for KillAt {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        let mut p = self.0.lock().unwrap();
        if *p == Some(point) {
            *p = None;
            return HookAction::Kill;
        }
        HookAction::Continue
    }
}

fn timeout_takeover() -> Outcome {
    let fill = |s: &Store, n: u64| -> Result<(), String> {
        for i in 0..n {
            s.put(&key(i), b"value").map_err(e)?;
        }
        Ok(())
    };
    let two_leaves = |s: &Store| -> Result<(), String> {
        fill(s, 4)?;
        s.split_leaf(&key(0)).map_err(e)?;
        Ok(())
    };
    type Setup<'a> = &'a dyn Fn(&Store) -> Result<(), String>;
    type Act<'a> = &'a dyn Fn(&Store) -> noticetree::Result<bool>;
    type Case<'a> = (&'a str, &'static str, Setup<'a>, Act<'a>, u64);
    let cases: [Case; 5] = [
        ("cNOTICE", "cnotice.posted", &|s| fill(s, 10), &|s| s.consolidate_leaf(&key(0)), 1),
        ("sNOTICE", "split.snotice", &|s| fill(s, 30), &|s| s.split_leaf(&key(0)), 2),
        ("pNOTICE", "merge.pnotice", &two_leaves, &|s| s.merge_leaf(&key(0)), 3),
        ("dNOTICE", "merge.dnotice", &two_leaves, &|s| s.merge_leaf(&key(0)), 3),
        ("mNOTICE", "merge.mnotice", &two_leaves, &|s| s.merge_leaf(&key(0)), 3),
    ];
    let mut summary = Vec::new();
    for (name, point, setup, act, notices) in cases {
        let dir = tmp();
        let hook = Arc::new(KillAt(Mutex::new(None)));
        let mut cfg = Config::new(dir.path()).with_hooks(hook.clone());
        cfg.auto_maintenance = false;
        let store = Store::open(cfg).map_err(e)?;
        setup(&store)?;
        let contents = store.scan_all().map_err(e)?;
        *hook.0.lock().unwrap() = Some(point);
        match act(&store) {
            Err(noticetree::Error::Killed) => {}
            other => return Err(format!("{name}: winner was not killed: {other:?}")),
        }
        let before = store.stats();
        let mut advances = 0;
        loop {
            store.maintain().map_err(e)?;
            if store.stats().takeovers > before.takeovers {
                break;
            }
            ensure!(advances < 3, "{name}: not taken over after {advances} epoch advances");
            store.advance_epoch();
            advances += 1;
        }
        let after = store.stats();
        // the final install of each notice: a base replacing it, or for the
        // parent's pNOTICE the term removal, or for D's dNOTICE its retirement
        let installs = after.installs_succeeded - before.installs_succeeded
            + after.index_terms_removed
            - before.index_terms_removed
            + after.merges
            - before.merges;
        ensure!(installs == notices, "{name}: {installs} final installs for {notices} notices");
        ensure!(after.installs_superseded == before.installs_superseded, "{name}: a duplicate install was attempted");
        ensure!(store.scan_all().map_err(e)? == contents, "{name}: contents changed");
        let rep = store.validate().map_err(e)?;
        ensure!(rep.is_ok(), "{name}: {rep}");
        summary.push(format!("{name} {advances}"));
    }
    Ok(format!("completed after epoch advances: {}; one install per notice", summary.join(", ")))
}

fn write_batching() -> Outcome {
    let dir = tmp();
    let mut cfg = Config::new(dir.path());
    cfg.auto_maintenance = false;
    ensure!(cfg.buffer_bytes == 65536, "buffer is {} bytes", cfg.buffer_bytes);
    let store = Store::open(cfg).map_err(e)?;
    for i in 0..8 {
        store.put(&key(i), &[b'v'; 12]).map_err(e)?;
    }
    let before = store.stats();
    let evictions = 10_000u64;
    for n in 0..evictions {
        store.put(&key(n % 8), format!("{n:012}").as_bytes()).map_err(e)?;
        ensure!(store.evict_leaf(&key(0)).map_err(e)?, "eviction {n} did not happen");
    }
    store.flush().map_err(e)?;
    let s = store.stats();
    let writes = s.physical_writes - before.physical_writes;
    let bytes = s.bytes_flushed - before.bytes_flushed;
    let pages = s.pages_flushed - before.pages_flushed;
    let page_bytes = bytes as f64 / pages as f64;
    ensure!((192.0..=320.0).contains(&page_bytes), "pages average {page_bytes:.0} bytes");
    ensure!(pages >= evictions, "only {pages} pages flushed");
    let bound = bytes.div_ceil(65536) + 1;
    ensure!(writes <= bound, "{writes} writes, bound {bound}");
    let per_write = pages as f64 / writes as f64;
    ensure!(per_write >= 100.0, "{per_write:.1} pages per write");
    Ok(format!("{pages} pages of ~{page_bytes:.0} B in {writes} writes (bound {bound}), {per_write:.0} pages/write"))
}

fn chain_length_bound() -> Outcome {
    let dir = tmp();
    {
        let store = Store::open(Config::new(dir.path())).map_err(e)?;
        for k in 0..5000 {
            store.put(&key(k), b"initial").map_err(e)?;
        }
        store.close().map_err(e)?;
    }
    // no inline maintenance from here on, so that chains grow until the pass
    let mut cfg = Config::new(dir.path());
    cfg.auto_maintenance = false;
    let store = Arc::new(Store::open(cfg).map_err(e)?);
    let handles: Vec<_> = (0..8u64)
        .map(|t| {
            let store = store.clone();
            std::thread::spawn(move || -> Result<(), String> {
                for i in 0..5000u64 {
                    let k = (i * 31 + t * 7) % 5000;
                    if i % 7 == 0 {
                        store.delete(&key(k)).map_err(e)?;
                    } else {
                        store.put(&key(k), &i.to_be_bytes()).map_err(e)?;
                    }
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())??;
    }
    let before = store.chain_lengths().into_iter().map(|(_, l)| l).max().unwrap_or(0);
    store.maintain().map_err(e)?;
    let lens = store.chain_lengths();
    let max = lens.iter().map(|(_, l)| *l).max().unwrap_or(0);
    let limit = store.config().consolidate_threshold;
    ensure!(before > limit, "chains never grew past {limit}");
    ensure!(max <= limit, "chain of length {max} after maintenance");
    Ok(format!("{} pages, longest chain {before} before maintenance and {max} after, limit {limit}", lens.len()))
}

fn blind_update() -> Outcome {
    let dir = tmp();
    let store = Store::open(Config::new(dir.path())).map_err(e)?;
    for i in 0..20 {
        store.put(&key(i), b"old").map_err(e)?;
    }
    ensure!(store.evict_leaf(&key(0)).map_err(e)?, "eviction failed");
    store.flush().map_err(e)?;
    let reads = store.stats().physical_reads;
    for i in [3, 7, 11] {
        store.put_blind(&key(i), format!("new{i}").as_bytes()).map_err(e)?;
    }
    let before_get = store.stats().physical_reads - reads;
    ensure!(before_get == 0, "{before_get} reads before the get");
    // a key outside the three deltas forces the base to be fetched
    let v = store.get(&key(12)).map_err(e)?;
    ensure!(v.map(|v| v.as_bytes().to_vec()) == Some(b"old".to_vec()), "base value wrong");
    let after_get = store.stats().physical_reads - reads;
    ensure!(after_get == 1, "{after_get} reads for the get");
    for i in [3, 7, 11] {
        let v = store.get(&key(i)).map_err(e)?;
        ensure!(v.map(|v| v.as_bytes().to_vec()) == Some(format!("new{i}").into_bytes()), "update to {i} missing");
    }
    let total = store.stats().physical_reads - reads;
    ensure!(total == 1, "{total} reads in total");
    Ok("0 reads for 3 blind puts; 1 read fetched the base; all 3 puts visible over it".into())
}

fn main() {
    let criteria: &[(&str, Check)] = &[
        ("sequential oracle equivalence", sequential_oracle),
        ("concurrent monotonic correctness", concurrent_monotonic),
        ("single-winner consolidation", single_winner_consolidation),
        ("cheap split loss", cheap_split_loss),
        ("split crash atomicity", split_crash_atomicity),
        ("merge protocol safety", merge_protocol_safety),
        ("epoch safety under poison-on-reclaim", epoch_safety),
        ("timeout takeover", timeout_takeover),
        ("write batching", write_batching),
        ("chain-length bound", chain_length_bound),
        ("blind update", blind_update),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = t.elapsed();
        match r {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail} [{}]", secs(took)),
            Err(why) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name}: {why} [{}]", secs(took));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
