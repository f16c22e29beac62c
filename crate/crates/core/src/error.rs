use std::io;

use thiserror::Error;

use crate::model::PageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("keys must be non-empty")]
    EmptyKey,
    #[error("mapping table exhausted")]
    CapacityExhausted,
    #[error("unknown page {0}")]
    UnknownPage(PageId),
    #[error("page {0} was retired")]
    PageRetired(PageId),
    #[error("I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("checksum mismatch in segment {segment} at offset {offset}")]
    ChecksumMismatch { segment: u64, offset: u64 },
    #[error("frame at segment {segment} offset {offset} is dead")]
    DeadFrame { segment: u64, offset: u64 },
    #[error("malformed storage data: {0}")]
    Corrupt(String),
    #[error("record of {size} bytes does not fit a {capacity}-byte buffer")]
    OversizedRecord { size: usize, capacity: usize },
    #[error("reservation released twice")]
    DoubleRelease,
    #[error("install superseded by another thread")]
    InstallSuperseded,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("store is closed")]
    Closed,
    /// Injected by a test hook: the store simulated a crash.
    #[error("simulated crash")]
    Crashed,
    /// Injected by a test hook: the calling thread simulated its death.
    #[error("simulated thread death")]
    Killed,
}
