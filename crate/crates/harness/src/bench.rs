//! Multi-threaded workload runner with online checks.

use std::collections::HashMap;
use std::sync::{Arc, Barrier};
use std::time::Instant;

use noticetree::{Config, Store};
use serde::Serialize;

use crate::oracle::{diff_scan, owned_key, replay, stamp};
use crate::workload::{key_bytes, value_bytes, value_stamp, Op, WorkloadSpec};
use crate::HarnessError;

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunStats {
    pub threads: usize,
    pub ops: u64,
    pub elapsed_secs: f64,
    pub ops_per_second: f64,
    pub consolidations: u64,
    pub splits: u64,
    pub merges: u64,
    pub notice_races_won: u64,
    pub notice_races_lost: u64,
    pub takeovers: u64,
    pub physical_writes: u64,
    pub physical_reads: u64,
    pub avg_chain_length_sampled: f64,
    pub max_chain_length_sampled: u64,
    pub monotonic_violations: u64,
    pub final_mismatches: u64,
    pub poison_reads: u64,
    pub nodes_freed: u64,
}

impl RunStats {
    pub fn violations(&self) -> u64 {
        self.monotonic_violations + self.final_mismatches + self.poison_reads
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).expect("stats serialize");
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }
}

#[derive(Debug, Default)]
pub struct BenchReport {
    pub stats: RunStats,
    /// First few problems found, for display.
    pub problems: Vec<String>,
}

impl BenchReport {
    pub fn ok(&self) -> bool {
        self.stats.violations() == 0
    }
}

#[derive(Default)]
struct ThreadResult {
    violations: u64,
    problems: Vec<String>,
    written: HashMap<u64, u64>,
}

/// Runs `spec` against a store opened with `cfg`. Every thread checks that
/// the values it reads never go backwards per key and that it reads its
/// own writes; at the end each key must hold the last stamp written to it.
pub fn run_bench(spec: &WorkloadSpec, cfg: Config) -> Result<BenchReport, HarnessError> {
    spec.validate()?;
    if spec.threads > 256 {
        return Err(HarnessError::Usage("at most 256 threads".into()));
    }
    let store = Arc::new(Store::open(cfg)?);
    let barrier = Arc::new(Barrier::new(spec.threads));
    let started = Instant::now();
    let handles: Vec<_> = (0..spec.threads)
        .map(|t| {
            let store = store.clone();
            let barrier = barrier.clone();
            let spec = spec.clone();
            std::thread::spawn(move || -> Result<ThreadResult, noticetree::Error> {
                let mut res = ThreadResult::default();
                let mut seen: HashMap<u64, u64> = HashMap::new();
                let mut seq = 0u64;
                barrier.wait();
                for op in spec.stream(t) {
                    let (k, write) = match op {
                        Op::Get(k) => (k, None),
                        Op::Put(k) => match owned_key(k, t, &spec) {
                            Some(o) => (o, Some(o)),
                            None => (k, None),
                        },
                    };
                    if write.is_some() {
                        let s = stamp(seq, t);
                        seq += 1;
                        store.put(&key_bytes(k), &value_bytes(s, spec.value_bytes))?;
                        res.written.insert(k, s);
                        continue;
                    }
                    let got = store.get(&key_bytes(k))?.map(|v| value_stamp(v.as_bytes()));
                    let prev = seen.get(&k).copied();
                    let mine = res.written.get(&k).copied();
                    let bad = match (got, prev) {
                        (None, Some(p)) => Some(format!("thread {t}: key {k} vanished after stamp {p}")),
                        (Some(g), Some(p)) if g < p => Some(format!("thread {t}: key {k} went from {p} back to {g}")),
                        _ => None,
                    }
                    .or_else(|| match mine {
                        Some(m) if got != Some(m) => Some(format!("thread {t}: key {k} reads {got:?}, wrote {m}")),
                        _ => None,
                    });
                    if let Some(msg) = bad {
                        res.violations += 1;
                        if res.problems.len() < 8 {
                            res.problems.push(msg);
                        }
                    }
                    if let Some(g) = got {
                        seen.insert(k, g);
                    }
                }
                Ok(res)
            })
        })
        .collect();
    let mut report = BenchReport::default();
    let mut written: HashMap<u64, u64> = HashMap::new();
    for h in handles {
        let r = h.join().map_err(|_| HarnessError::Invariant("worker thread panicked".into()))??;
        report.stats.monotonic_violations += r.violations;
        report.problems.extend(r.problems);
        written.extend(r.written);
    }
    let elapsed = started.elapsed().as_secs_f64();

    let expected = replay(spec);
    // the streams are replayed independently of the run; both must agree
    if written.len() != expected.len() || written.iter().any(|(k, s)| expected.get(k) != Some(s)) {
        report.stats.final_mismatches += 1;
        report.problems.push("threads wrote a different history than the replayed streams".into());
    }
    let diffs = diff_scan(&store, &expected, spec.value_bytes)?;
    for (k, s) in &expected {
        let got = store.get(&key_bytes(*k))?.map(|v| value_stamp(v.as_bytes()));
        if got != Some(*s) {
            report.stats.final_mismatches += 1;
            if report.problems.len() < 16 {
                report.problems.push(format!("key {k}: final get {got:?}, last written {s}"));
            }
        }
    }
    report.stats.final_mismatches += diffs.len() as u64;
    report.problems.extend(diffs.into_iter().take(8));

    let s = store.stats();
    let st = &mut report.stats;
    st.threads = spec.threads;
    st.ops = spec.total_ops;
    st.elapsed_secs = elapsed;
    st.ops_per_second = if elapsed > 0.0 { spec.total_ops as f64 / elapsed } else { 0.0 };
    st.consolidations = s.consolidations;
    st.splits = s.splits;
    st.merges = s.merges;
    st.notice_races_won = s.notices_won;
    st.notice_races_lost = s.notices_lost;
    st.takeovers = s.takeovers;
    st.physical_writes = s.physical_writes;
    st.physical_reads = s.physical_reads;
    st.avg_chain_length_sampled = s.avg_chain_length();
    st.max_chain_length_sampled = s.chain_length_max;
    st.poison_reads = s.poison_reads;
    st.nodes_freed = s.nodes_freed;
    let rep = store.validate()?;
    if !rep.is_ok() {
        report.stats.final_mismatches += rep.errors.len() as u64;
        report.problems.extend(rep.errors.iter().take(8).cloned());
    }
    store.close()?;
    Ok(report)
}
