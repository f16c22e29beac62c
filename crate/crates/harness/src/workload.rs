//! Seeded operation streams.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDist {
    Uniform,
    Zipf(f64),
}

impl FromStr for KeyDist {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "uniform" {
            return Ok(KeyDist::Uniform);
        }
        if let Some(exp) = s.strip_prefix("zipf") {
            let exp = match exp.strip_prefix(':') {
                Some(e) => e.parse::<f64>().map_err(|_| HarnessError::Usage(format!("bad zipf exponent in {s:?}")))?,
                None if exp.is_empty() => 0.99,
                None => return Err(HarnessError::Usage(format!("unknown distribution {s:?}"))),
            };
            if !(exp > 0.0 && exp.is_finite()) {
                return Err(HarnessError::Usage(format!("zipf exponent must be positive, got {exp}")));
            }
            return Ok(KeyDist::Zipf(exp));
        }
        Err(HarnessError::Usage(format!("unknown distribution {s:?}")))
    }
}

impl fmt::Display for KeyDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyDist::Uniform => write!(f, "uniform"),
            KeyDist::Zipf(s) => write!(f, "zipf:{s}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub threads: usize,
    pub total_ops: u64,
    pub read_fraction: f64,
    pub key_space: u64,
    pub value_bytes: usize,
    pub dist: KeyDist,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.threads == 0 {
            return Err(HarnessError::Usage("threads must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(HarnessError::Usage(format!("read fraction {} outside [0, 1]", self.read_fraction)));
        }
        if self.key_space == 0 {
            return Err(HarnessError::Usage("key space must be at least 1".into()));
        }
        if self.value_bytes < 8 {
            return Err(HarnessError::Usage("values need at least 8 bytes".into()));
        }
        Ok(())
    }

    /// Ops issued by thread `t`; the remainder goes to the low threads.
    pub fn ops_for(&self, t: usize) -> u64 {
        let n = self.threads as u64;
        self.total_ops / n + u64::from((t as u64) < self.total_ops % n)
    }

    pub fn stream(&self, t: usize) -> OpStream {
        OpStream::new(self, t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Get(u64),
    Put(u64),
}

/// Key `i` as stored. Fixed width so that numeric and byte order agree.
pub fn key_bytes(i: u64) -> Vec<u8> {
    format!("key{i:012}").into_bytes()
}

pub fn parse_key(k: &[u8]) -> Option<u64> {
    std::str::from_utf8(k.strip_prefix(b"key")?).ok()?.parse().ok()
}

/// A value carrying `stamp` in its first 8 bytes, padded to `len`.
pub fn value_bytes(stamp: u64, len: usize) -> Vec<u8> {
    let mut v = stamp.to_be_bytes().to_vec();
    v.resize(len.max(8), (stamp % 251) as u8);
    v
}

pub fn value_stamp(v: &[u8]) -> u64 {
    u64::from_be_bytes(v[..8].try_into().expect("value shorter than 8 bytes"))
}

pub struct OpStream {
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    key_space: u64,
    read_fraction: f64,
    left: u64,
}

impl OpStream {
    fn new(spec: &WorkloadSpec, t: usize) -> OpStream {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64);
        let zipf = match spec.dist {
            KeyDist::Uniform => None,
            KeyDist::Zipf(s) => Some(Zipf::new(spec.key_space as f64, s).expect("validated zipf parameters")),
        };
        OpStream { rng, zipf, key_space: spec.key_space, read_fraction: spec.read_fraction, left: spec.ops_for(t) }
    }

    fn next_key(&mut self) -> u64 {
        match &self.zipf {
            None => self.rng.random_range(0..self.key_space),
            // rank 1 is the hottest key
            Some(z) => (z.sample(&mut self.rng) as u64).clamp(1, self.key_space) - 1,
        }
    }
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let read = self.rng.random_bool(self.read_fraction);
        let k = self.next_key();
        Some(if read { Op::Get(k) } else { Op::Put(k) })
    }
}
