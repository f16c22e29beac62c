//! A latch-free B-link tree over a log-structured page store.
//!
//! Pages are reached only through a mapping table of atomically swapped
//! pointers. Updates prepend immutable deltas to a page's chain; structure
//! changes (consolidation, split, merge) are guarded by notices so that one
//! thread does the heavy work while others keep going.

mod chain;
pub mod config;
mod engine;
pub mod epoch;
pub mod error;
pub mod fsck;
pub mod hooks;
pub mod lss;
pub mod mapping;
pub mod model;
mod node;
mod smo;
pub mod stats;
mod tree;

pub use config::Config;
pub use error::{Error, Result};
pub use fsck::FsckReport;
pub use hooks::{HookAction, Hooks};
pub use model::{BasePage, Key, PageContent, PageId, Record, StorageLocation, Value};
pub use stats::{thread_heavy_work, thread_record_moves, StatsSnapshot};
pub use tree::{MaintenanceReport, Store};
