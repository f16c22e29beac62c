//! Reference results the store is checked against.

use std::collections::BTreeMap;

use noticetree::Store;

use crate::workload::{key_bytes, parse_key, value_bytes, Op, WorkloadSpec};

/// The key thread `t` writes when its stream asks for `k`: writers own the
/// keys congruent to their index, so every key has a single writer.
pub fn owned_key(k: u64, t: usize, spec: &WorkloadSpec) -> Option<u64> {
    let n = spec.threads as u64;
    let owned = k - k % n + t as u64;
    (owned < spec.key_space).then_some(owned)
}

/// Stamp of the `seq`-th write (from 0) of thread `t`. Unique across threads
/// and increasing per thread.
pub fn stamp(seq: u64, t: usize) -> u64 {
    ((seq + 1) << 8) | t as u64
}

/// Final key -> stamp map after replaying every stream of `spec` through a
/// sorted map. Threads write disjoint keys, so the result is independent of
/// how their ops interleave.
pub fn replay(spec: &WorkloadSpec) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for t in 0..spec.threads {
        let mut seq = 0;
        for op in spec.stream(t) {
            if let Op::Put(k) = op {
                if let Some(k) = owned_key(k, t, spec) {
                    m.insert(k, stamp(seq, t));
                    seq += 1;
                }
            }
        }
    }
    m
}

/// Differences between a full scan of `store` and `expected`, as
/// human-readable lines (empty when equal). Values are compared byte for
/// byte.
pub fn diff_scan(store: &Store, expected: &BTreeMap<u64, u64>, value_len: usize) -> noticetree::Result<Vec<String>> {
    let mut out = Vec::new();
    let got = store.scan_all()?;
    let mut want = expected.iter();
    let mut w = want.next();
    for (k, v) in &got {
        let Some(kid) = parse_key(k.as_bytes()) else {
            out.push(format!("unexpected key {:?}", k));
            continue;
        };
        loop {
            match w {
                Some((wk, _)) if *wk < kid => {
                    out.push(format!("key {wk} missing"));
                    w = want.next();
                }
                Some((wk, ws)) if *wk == kid => {
                    if v.as_bytes() != value_bytes(*ws, value_len).as_slice() {
                        out.push(format!("key {kid}: value differs from oracle stamp {ws}"));
                    }
                    w = want.next();
                    break;
                }
                _ => {
                    out.push(format!("key {kid} should not exist"));
                    break;
                }
            }
        }
    }
    while let Some((wk, _)) = w {
        out.push(format!("key {wk} missing"));
        w = want.next();
    }
    if got.len() != expected.len() {
        out.push(format!("scan returned {} keys, oracle has {}", got.len(), expected.len()));
    }
    Ok(out)
}

/// The byte form of a replayed map.
pub fn materialize(expected: &BTreeMap<u64, u64>, value_len: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    expected.iter().map(|(k, s)| (key_bytes(*k), value_bytes(*s, value_len))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::KeyDist;

    fn spec(threads: usize) -> WorkloadSpec {
        WorkloadSpec { threads, total_ops: 2000, read_fraction: 0.5, key_space: 100, value_bytes: 8, dist: KeyDist::Uniform, seed: 3 }
    }

    #[test]
    fn single_writer_per_key() {
        let s = spec(4);
        for k in 0..100 {
            for t in 0..4 {
                if let Some(o) = owned_key(k, t, &s) {
                    assert_eq!(o as usize % 4, t);
                    assert!(o < 100);
                }
            }
        }
        assert_eq!(owned_key(57, 0, &spec(1)), Some(57));
    }

    #[test]
    fn replay_keeps_last_write_per_key() {
        let s = spec(1);
        let mut last = BTreeMap::new();
        let mut seq = 0;
        for op in s.stream(0) {
            if let Op::Put(k) = op {
                last.insert(k, stamp(seq, 0));
                seq += 1;
            }
        }
        assert_eq!(replay(&s), last);
    }

    #[test]
    fn stamps_order_within_thread() {
        assert!(stamp(1, 7) > stamp(0, 7));
        assert_ne!(stamp(3, 1), stamp(3, 2));
    }
}
