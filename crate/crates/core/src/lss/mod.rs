//! Log-structured page storage.

mod buffer;
pub mod format;
mod store;

pub use buffer::{LogBuffer, Reservation};
pub use store::{
    compact_dir, decode_frame_image, scan_dir, segment_path, split_frame_len, LatestFrame, LogStore, ScanResult,
    SegmentReport, StoreCounters,
};
