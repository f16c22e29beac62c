use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hooks::Hooks;
use crate::mapping::DEFAULT_CAPACITY;

#[derive(Clone)]
pub struct Config {
    pub data_dir: PathBuf,
    pub mapping_capacity: usize,
    pub buffer_bytes: usize,
    pub consolidate_threshold: usize,
    pub split_record_threshold: usize,
    pub split_bytes_threshold: usize,
    pub merge_record_threshold: usize,
    pub notice_timeout_epochs: u64,
    pub epoch_op_interval: u64,
    /// fsync every flushed segment.
    pub sync_writes: bool,
    /// Overwrite reclaimed chain nodes with a poison pattern and keep them
    /// allocated, counting any later access.
    pub poison_on_reclaim: bool,
    /// Run maintenance (consolidate, split, merge) inline after updates.
    pub auto_maintenance: bool,
    pub hooks: Option<Arc<dyn Hooks>>,
}

impl std::fmt::Debug for Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Config")
            .field("data_dir", &self.data_dir)
            .field("mapping_capacity", &self.mapping_capacity)
            .field("buffer_bytes", &self.buffer_bytes)
            .field("consolidate_threshold", &self.consolidate_threshold)
            .field("split_record_threshold", &self.split_record_threshold)
            .field("split_bytes_threshold", &self.split_bytes_threshold)
            .field("merge_record_threshold", &self.merge_record_threshold)
            .field("notice_timeout_epochs", &self.notice_timeout_epochs)
            .field("epoch_op_interval", &self.epoch_op_interval)
            .field("hooks", &self.hooks.is_some())
            .finish()
    }
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Config {
        Config {
            data_dir: data_dir.into(),
            mapping_capacity: DEFAULT_CAPACITY,
            buffer_bytes: 65536,
            consolidate_threshold: 8,
            split_record_threshold: 64,
            split_bytes_threshold: 4096,
            merge_record_threshold: 8,
            notice_timeout_epochs: 3,
            epoch_op_interval: 4096,
            sync_writes: false,
            poison_on_reclaim: false,
            auto_maintenance: true,
            hooks: None,
        }
    }

    pub fn with_hooks(mut self, hooks: Arc<dyn Hooks>) -> Config {
        self.hooks = Some(hooks);
        self
    }

    /// Largest key + value a single record may have.
    pub fn max_record_bytes(&self) -> usize {
        self.buffer_bytes / 16
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.mapping_capacity < 4 {
            return bad("mapping capacity must be at least 4");
        }
        if self.consolidate_threshold == 0
            || self.split_record_threshold == 0
            || self.split_bytes_threshold == 0
            || self.merge_record_threshold == 0
            || self.notice_timeout_epochs == 0
            || self.epoch_op_interval == 0
        {
            return bad("thresholds must be positive");
        }
        if self.split_record_threshold < 4 {
            return bad("split record threshold must be at least 4");
        }
        if self.merge_record_threshold * 2 >= self.split_record_threshold {
            return bad("merge threshold must be below half the split threshold");
        }
        // A page may reach the split size plus one more record before it
        // splits; both halves of a split pair must fit one buffer.
        if self.buffer_bytes < 4 * self.split_bytes_threshold {
            return bad("buffer must hold at least four maximum-size pages");
        }
        if self.buffer_bytes > u32::MAX as usize / 4 {
            return bad("buffer too large");
        }
        Ok(())
    }
}
