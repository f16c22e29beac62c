//! Workload generation, oracle checking and interleaving control for
//! noticetree.

pub mod bench;
pub mod oracle;
pub mod sched;
pub mod script;
pub mod workload;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("bad schedule script: {0}")]
    Script(String),
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] noticetree::Error),
}

impl HarnessError {
    /// Process exit status: 1 invariant violation, 2 usage, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Script(_) | HarnessError::UnknownCheckpoint(_) => 2,
            HarnessError::Io(_) | HarnessError::Store(noticetree::Error::Io(_)) => 3,
            HarnessError::Store(noticetree::Error::ConfigInvalid(_)) => 2,
            HarnessError::Invariant(_) | HarnessError::Store(_) => 1,
        }
    }
}
