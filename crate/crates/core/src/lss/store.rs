//! Log-structured page store: a directory of append-only segment files, one
//! per flushed buffer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::RwLock;

use super::buffer::{LogBuffer, ReserveOutcome, Reservation};
use super::format::{self, FrameError, FrameKind, FILE_HEADER_LEN, FRAME_OVERHEAD};
use crate::error::{Error, Result};
use crate::model::{BasePage, FrameHalf, Key, PageId, StorageLocation};

pub fn segment_path(dir: &Path, segment: u64) -> PathBuf {
    dir.join(format!("seg-{segment:016x}.log"))
}

fn parse_segment_name(name: &str) -> Option<u64> {
    let hex = name.strip_prefix("seg-")?.strip_suffix(".log")?;
    u64::from_str_radix(hex, 16).ok()
}

#[derive(Default, Debug, Clone, Copy)]
pub struct StoreCounters {
    pub physical_writes: u64,
    pub physical_reads: u64,
    pub bytes_flushed: u64,
    pub pages_flushed: u64,
    pub outstanding_reservations: i64,
}

pub struct LogStore {
    dir: PathBuf,
    capacity: usize,
    fsync: bool,
    active: ArcSwap<LogBuffer>,
    unflushed: RwLock<HashMap<u64, Arc<LogBuffer>>>,
    next_segment: AtomicU64,
    next_lsn: AtomicU64,
    crashed: AtomicBool,
    physical_writes: AtomicU64,
    physical_reads: AtomicU64,
    bytes_flushed: AtomicU64,
    pages_flushed: AtomicU64,
    outstanding: AtomicI64,
}

impl LogStore {
    /// Opens the store for appending. `first_segment` and `first_lsn` must be
    /// above anything already on disk.
    pub fn open(dir: &Path, capacity: usize, fsync: bool, first_segment: u64, first_lsn: u64) -> Result<LogStore> {
        fs::create_dir_all(dir)?;
        let buf = Arc::new(LogBuffer::new(first_segment, capacity));
        let mut unflushed = HashMap::new();
        unflushed.insert(first_segment, buf.clone());
        Ok(LogStore {
            dir: dir.to_path_buf(),
            capacity,
            fsync,
            active: ArcSwap::new(buf),
            unflushed: RwLock::new(unflushed),
            next_segment: AtomicU64::new(first_segment + 1),
            next_lsn: AtomicU64::new(first_lsn.max(1)),
            crashed: AtomicBool::new(false),
            physical_writes: AtomicU64::new(0),
            physical_reads: AtomicU64::new(0),
            bytes_flushed: AtomicU64::new(0),
            pages_flushed: AtomicU64::new(0),
            outstanding: AtomicI64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn.fetch_add(1, Ordering::SeqCst)
    }

    pub fn counters(&self) -> StoreCounters {
        StoreCounters {
            physical_writes: self.physical_writes.load(Ordering::SeqCst),
            physical_reads: self.physical_reads.load(Ordering::SeqCst),
            bytes_flushed: self.bytes_flushed.load(Ordering::SeqCst),
            pages_flushed: self.pages_flushed.load(Ordering::SeqCst),
            outstanding_reservations: self.outstanding.load(Ordering::SeqCst),
        }
    }

    pub fn active_buffer(&self) -> Arc<LogBuffer> {
        self.active.load_full()
    }

    /// Grants an exclusive range of `size` bytes, rotating to a fresh buffer
    /// when the current one is full.
    pub fn reserve(&self, size: usize) -> Result<Arc<Reservation>> {
        if size > self.capacity {
            return Err(Error::OversizedRecord { size, capacity: self.capacity });
        }
        loop {
            let buf = self.active.load_full();
            match buf.try_reserve(size as u64) {
                ReserveOutcome::Granted(off) => {
                    self.outstanding.fetch_add(1, Ordering::SeqCst);
                    return Ok(Arc::new(Reservation::new(buf, off, size as u64)));
                }
                ReserveOutcome::Full { released_last } => {
                    if released_last {
                        self.flush(&buf)?;
                    }
                    self.rotate(&buf);
                }
            }
        }
    }

    fn rotate(&self, full: &Arc<LogBuffer>) {
        if !Arc::ptr_eq(&self.active.load(), full) {
            return;
        }
        let seg = self.next_segment.fetch_add(1, Ordering::SeqCst);
        let fresh = Arc::new(LogBuffer::new(seg, self.capacity));
        self.unflushed.write().insert(seg, fresh.clone());
        let prev = self.active.compare_and_swap(full, fresh);
        if !Arc::ptr_eq(&prev, full) {
            self.unflushed.write().remove(&seg);
        }
    }

    /// Drops the hold of a reservation whose bytes are fully written. The
    /// release that empties a sealed buffer flushes it.
    pub fn release(&self, res: &Reservation) -> Result<()> {
        res.mark_released()?;
        self.outstanding.fetch_sub(1, Ordering::SeqCst);
        if res.buffer.drop_hold() {
            self.flush(&res.buffer)?;
        }
        Ok(())
    }

    fn flush(&self, buf: &Arc<LogBuffer>) -> Result<()> {
        if !buf.claim_flush() {
            return Ok(());
        }
        let end = buf.sealed_end().unwrap();
        if self.crashed.load(Ordering::SeqCst) {
            return Ok(());
        }
        let result = if end > 0 {
            let mut bytes = Vec::with_capacity(FILE_HEADER_LEN + end as usize);
            bytes.extend_from_slice(&format::file_header(buf.segment));
            bytes.extend_from_slice(unsafe { buf.range(0, end) });
            self.write_segment(buf.segment, &bytes).map(|_| {
                self.physical_writes.fetch_add(1, Ordering::SeqCst);
                self.bytes_flushed.fetch_add(end, Ordering::SeqCst);
                self.pages_flushed.fetch_add(buf.frames(), Ordering::SeqCst);
            })
        } else {
            Ok(())
        };
        self.unflushed.write().remove(&buf.segment);
        result
    }

    fn write_segment(&self, segment: u64, bytes: &[u8]) -> Result<()> {
        let mut f = File::create(segment_path(&self.dir, segment))?;
        f.write_all(bytes)?;
        if self.fsync {
            f.sync_data()?;
        }
        Ok(())
    }

    /// Writes one page image as a Base frame and releases the hold.
    pub fn write_page(&self, page: PageId, image: &BasePage) -> Result<StorageLocation> {
        let bytes = format::encode_page(image);
        let res = self.reserve(format::frame_len(bytes.len()))?;
        assert!(res.claim());
        let lsn = self.next_lsn();
        format::write_frame(res.bytes_mut(), page, lsn, FrameKind::Base, &bytes);
        res.buffer.count_frames(1);
        let loc = res.location();
        self.release(&res)?;
        Ok(loc)
    }

    /// Writes a tombstone for `page`.
    pub fn write_dead(&self, page: PageId) -> Result<()> {
        let res = self.reserve(FRAME_OVERHEAD)?;
        assert!(res.claim());
        format::write_dead_frame(res.bytes_mut(), page, self.next_lsn());
        self.release(&res)
    }

    /// Fills a claimed reservation with a split-pair frame. The reservation
    /// must have been sized with [`split_frame_len`].
    pub fn fill_split_pair(&self, res: &Reservation, old: PageId, split_key: &Key, o: &BasePage, n: &BasePage) {
        let oi = format::encode_page(o);
        let ni = format::encode_page(n);
        let payload = format::encode_split_payload(split_key, &oi, &ni);
        format::write_frame(res.bytes_mut(), old, self.next_lsn(), FrameKind::SplitPair, &payload);
        res.buffer.count_frames(2);
    }

    /// Fills a claimed reservation with a Base frame for `image`. The
    /// reservation must be `frame_len(image_len(image))` bytes.
    pub fn fill_base(&self, res: &Reservation, page: PageId, image: &BasePage) {
        let bytes = format::encode_page(image);
        format::write_frame(res.bytes_mut(), page, self.next_lsn(), FrameKind::Base, &bytes);
        res.buffer.count_frames(1);
    }

    /// Overwrites a claimed reservation with filler that recovery skips.
    pub fn fill_pad(&self, res: &Reservation) {
        format::write_pad_frame(res.bytes_mut());
    }

    /// Fills a claimed reservation with a Dead frame.
    pub fn fill_dead(&self, res: &Reservation, page: PageId) {
        format::write_dead_frame(res.bytes_mut(), page, self.next_lsn());
    }

    fn read_frame_bytes(&self, loc: StorageLocation) -> Result<Vec<u8>> {
        if loc.offset < FILE_HEADER_LEN as u64 {
            return Err(Error::Corrupt(format!("offset {} inside segment header", loc.offset)));
        }
        {
            let map = self.unflushed.read();
            if let Some(buf) = map.get(&loc.segment) {
                let off = loc.offset - FILE_HEADER_LEN as u64;
                return Ok(unsafe { buf.range(off, loc.length as u64) }.to_vec());
            }
        }
        let f = File::open(segment_path(&self.dir, loc.segment))?;
        let mut bytes = vec![0u8; loc.length as usize];
        f.read_exact_at(&mut bytes, loc.offset)?;
        self.physical_reads.fetch_add(1, Ordering::SeqCst);
        Ok(bytes)
    }

    /// Reads and decodes the page image at `loc`.
    pub fn read_page(&self, loc: StorageLocation, half: FrameHalf) -> Result<BasePage> {
        let bytes = self.read_frame_bytes(loc)?;
        decode_frame_image(&bytes, loc, half)
    }

    /// Seals the active buffer and flushes it if no reservation holds it.
    pub fn seal_active(&self) -> Result<()> {
        let buf = self.active.load_full();
        let last = buf.force_seal();
        if last {
            self.flush(&buf)?;
        }
        self.rotate(&buf);
        Ok(())
    }

    /// Simulated crash: optionally seal (and, when nothing holds it, flush)
    /// the active buffer, then stop all further storage writes.
    pub fn crash(&self, flush_first: bool) {
        if flush_first {
            let _ = self.seal_active();
        }
        self.crashed.store(true, Ordering::SeqCst);
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    pub fn unflushed_buffers(&self) -> usize {
        self.unflushed.read().len()
    }
}

/// Verifies the frame in `bytes` and decodes the requested image.
pub fn decode_frame_image(bytes: &[u8], loc: StorageLocation, half: FrameHalf) -> Result<BasePage> {
    let (h, payload) = match format::parse_frame(bytes) {
        Ok(x) => x,
        Err(FrameError::Truncated) => return Err(Error::Corrupt(format!("short frame at {}:{}", loc.segment, loc.offset))),
        Err(_) => return Err(Error::ChecksumMismatch { segment: loc.segment, offset: loc.offset }),
    };
    match (h.kind, half) {
        (FrameKind::Dead, _) => Err(Error::DeadFrame { segment: loc.segment, offset: loc.offset }),
        (FrameKind::Base, FrameHalf::Whole) => format::decode_page(payload, h.lsn),
        (FrameKind::SplitPair, FrameHalf::SplitOld | FrameHalf::SplitNew) => {
            let (_, o, n) = format::decode_split_payload(payload)?;
            format::decode_page(if half == FrameHalf::SplitOld { o } else { n }, h.lsn)
        }
        (k, hf) => Err(Error::Corrupt(format!("frame kind {k:?} read as {hf:?}"))),
    }
}

/// Size of the split-pair frame holding `o` and `n`.
pub fn split_frame_len(split_key: &Key, o: &BasePage, n: &BasePage) -> usize {
    format::frame_len(format::split_payload_len(split_key, format::image_len(o), format::image_len(n)))
}

/// Newest state of one page found by a segment scan.
#[derive(Clone, Debug)]
pub struct LatestFrame {
    pub lsn: u64,
    pub loc: StorageLocation,
    pub half: FrameHalf,
    /// `None` for a tombstone.
    pub image: Option<BasePage>,
}

#[derive(Clone, Debug)]
pub struct SegmentReport {
    pub segment: u64,
    pub path: PathBuf,
    pub frames: usize,
    /// Offset of the first frame that failed to parse, with the reason.
    pub stopped_at: Option<(u64, String)>,
}

#[derive(Default, Debug)]
pub struct ScanResult {
    pub segments: Vec<SegmentReport>,
    pub latest: BTreeMap<PageId, LatestFrame>,
    pub max_segment: Option<u64>,
    pub max_lsn: u64,
}

impl ScanResult {
    pub fn live_pages(&self) -> impl Iterator<Item = (&PageId, &LatestFrame)> {
        self.latest.iter().filter(|(_, f)| f.image.is_some())
    }
}

fn offer(latest: &mut BTreeMap<PageId, LatestFrame>, id: PageId, f: LatestFrame) {
    match latest.get(&id) {
        Some(cur) if cur.lsn >= f.lsn => {}
        _ => {
            latest.insert(id, f);
        }
    }
}

/// Scans every segment in `dir`. A segment's frames are read up to the first
/// frame that is truncated or fails its checksum; later frames are ignored.
pub fn scan_dir(dir: &Path) -> Result<ScanResult> {
    let mut out = ScanResult::default();
    if !dir.exists() {
        return Ok(out);
    }
    let mut segs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if let Some(id) = entry.file_name().to_str().and_then(parse_segment_name) {
            segs.push((id, entry.path()));
        }
    }
    segs.sort();
    for (id, path) in segs {
        out.max_segment = Some(out.max_segment.map_or(id, |m| m.max(id)));
        let bytes = fs::read(&path)?;
        let mut report = SegmentReport { segment: id, path: path.clone(), frames: 0, stopped_at: None };
        match format::parse_file_header(&bytes) {
            Ok(hdr) if hdr == id => {}
            Ok(hdr) => {
                report.stopped_at = Some((0, format!("header names segment {hdr}")));
                out.segments.push(report);
                continue;
            }
            Err(e) => {
                report.stopped_at = Some((0, e.to_string()));
                out.segments.push(report);
                continue;
            }
        }
        let mut at = FILE_HEADER_LEN;
        while at < bytes.len() {
            let (h, payload) = match format::parse_frame(&bytes[at..]) {
                Ok(x) => x,
                Err(e) => {
                    let why = match e {
                        FrameError::Truncated => "truncated frame",
                        FrameError::Checksum => "checksum mismatch",
                        FrameError::BadKind => "unknown frame kind",
                    };
                    report.stopped_at = Some((at as u64, why.into()));
                    break;
                }
            };
            let loc = StorageLocation { segment: id, offset: at as u64, length: h.total_len() as u32 };
            out.max_lsn = out.max_lsn.max(h.lsn);
            let decoded: Result<()> = (|| {
                match h.kind {
                    FrameKind::Pad => {}
                    FrameKind::Dead => {
                        offer(&mut out.latest, h.page, LatestFrame { lsn: h.lsn, loc, half: FrameHalf::Whole, image: None })
                    }
                    FrameKind::Base => {
                        let img = format::decode_page(payload, h.lsn)?;
                        offer(&mut out.latest, h.page, LatestFrame { lsn: h.lsn, loc, half: FrameHalf::Whole, image: Some(img) })
                    }
                    FrameKind::SplitPair => {
                        let (_, o, n) = format::decode_split_payload(payload)?;
                        let o = format::decode_page(o, h.lsn)?;
                        let n = format::decode_page(n, h.lsn)?;
                        let n_id = o.side_link.ok_or_else(|| Error::Corrupt("split pair without side link".into()))?;
                        offer(&mut out.latest, h.page, LatestFrame { lsn: h.lsn, loc, half: FrameHalf::SplitOld, image: Some(o) });
                        offer(&mut out.latest, n_id, LatestFrame { lsn: h.lsn, loc, half: FrameHalf::SplitNew, image: Some(n) });
                    }
                }
                Ok(())
            })();
            if let Err(e) = decoded {
                report.stopped_at = Some((at as u64, e.to_string()));
                break;
            }
            report.frames += 1;
            at += h.total_len();
        }
        out.segments.push(report);
    }
    Ok(out)
}

/// Deletes every segment that holds no page's newest frame. The store must
/// be closed. Returns the removed segment ids.
pub fn compact_dir(dir: &Path) -> Result<Vec<u64>> {
    let scan = scan_dir(dir)?;
    let keep: HashSet<u64> = scan.latest.values().map(|f| f.loc.segment).collect();
    let mut removed = Vec::new();
    for s in &scan.segments {
        if !keep.contains(&s.segment) {
            fs::remove_file(&s.path)?;
            removed.push(s.segment);
        }
    }
    Ok(removed)
}
