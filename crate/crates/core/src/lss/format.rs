//! Segment file layout. Everything is little-endian.
//!
//! ```text
//! file   := "NTLS" version:u32 segment:u64 frame*
//! frame  := page:u64 lsn:u64 kind:u8 len:u32 payload[len] crc32:u32
//! ```
//!
//! The checksum covers the frame header and the payload.

use crate::error::{Error, Result};
use crate::model::{BasePage, Key, PageContent, PageId, Record, Value};

pub const MAGIC: &[u8; 4] = b"NTLS";
pub const VERSION: u32 = 1;
pub const FILE_HEADER_LEN: usize = 16;
pub const FRAME_HEADER_LEN: usize = 8 + 8 + 1 + 4;
pub const FRAME_OVERHEAD: usize = FRAME_HEADER_LEN + 4;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum FrameKind {
    Base = 0,
    SplitPair = 1,
    Dead = 2,
    /// Filler for reserved space whose content was abandoned.
    Pad = 3,
}

impl FrameKind {
    fn from_u8(v: u8) -> Option<FrameKind> {
        match v {
            0 => Some(FrameKind::Base),
            1 => Some(FrameKind::SplitPair),
            2 => Some(FrameKind::Dead),
            3 => Some(FrameKind::Pad),
            _ => None,
        }
    }
}

pub fn file_header(segment: u64) -> [u8; FILE_HEADER_LEN] {
    let mut h = [0u8; FILE_HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    h[8..].copy_from_slice(&segment.to_le_bytes());
    h
}

/// Returns the segment id stored in a file header.
pub fn parse_file_header(bytes: &[u8]) -> Result<u64> {
    if bytes.len() < FILE_HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad segment header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported segment version {version}")));
    }
    Ok(u64::from_le_bytes(bytes[8..16].try_into().unwrap()))
}

pub fn frame_len(payload_len: usize) -> usize {
    FRAME_OVERHEAD + payload_len
}

/// Writes a complete frame into `out`, which must be exactly
/// `frame_len(payload.len())` bytes.
pub fn write_frame(out: &mut [u8], page: PageId, lsn: u64, kind: FrameKind, payload: &[u8]) {
    assert_eq!(out.len(), frame_len(payload.len()));
    out[0..8].copy_from_slice(&page.0.to_le_bytes());
    out[8..16].copy_from_slice(&lsn.to_le_bytes());
    out[16] = kind as u8;
    out[17..21].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    out[21..21 + payload.len()].copy_from_slice(payload);
    let crc = crc32fast::hash(&out[..21 + payload.len()]);
    let end = out.len();
    out[end - 4..].copy_from_slice(&crc.to_le_bytes());
}

/// Fills `out` with a Dead frame covering all of it. `out` must be at least
/// [`FRAME_OVERHEAD`] bytes.
pub fn write_dead_frame(out: &mut [u8], page: PageId, lsn: u64) {
    let payload = vec![0u8; out.len() - FRAME_OVERHEAD];
    write_frame(out, page, lsn, FrameKind::Dead, &payload);
}

/// Fills `out` with a Pad frame, which recovery skips.
pub fn write_pad_frame(out: &mut [u8]) {
    let payload = vec![0u8; out.len() - FRAME_OVERHEAD];
    write_frame(out, PageId(u64::MAX), 0, FrameKind::Pad, &payload);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub page: PageId,
    pub lsn: u64,
    pub kind: FrameKind,
    pub payload_len: usize,
}

impl FrameHeader {
    pub fn total_len(&self) -> usize {
        frame_len(self.payload_len)
    }
}

pub enum FrameError {
    /// Not enough bytes for a whole frame.
    Truncated,
    Checksum,
    BadKind,
}

/// Parses and verifies the frame at the start of `bytes`.
pub fn parse_frame(bytes: &[u8]) -> std::result::Result<(FrameHeader, &[u8]), FrameError> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(FrameError::Truncated);
    }
    let page = PageId(u64::from_le_bytes(bytes[0..8].try_into().unwrap()));
    let lsn = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let kind = bytes[16];
    let payload_len = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
    if bytes.len() < frame_len(payload_len) {
        return Err(FrameError::Truncated);
    }
    let body_end = FRAME_HEADER_LEN + payload_len;
    let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(FrameError::Checksum);
    }
    let kind = FrameKind::from_u8(kind).ok_or(FrameError::BadKind)?;
    Ok((FrameHeader { page, lsn, kind, payload_len }, &bytes[FRAME_HEADER_LEN..body_end]))
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::Corrupt("page image truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// Serialized size of a page image, computed without building it.
pub fn image_len(page: &BasePage) -> usize {
    let body: usize = match &page.content {
        PageContent::Leaf(recs) => recs.iter().map(|r| 8 + r.key.len() + r.value.len()).sum(),
        PageContent::Index { terms, .. } => 8 + 8 + terms.iter().map(|(k, _)| 8 + k.len() + 8).sum::<usize>(),
    };
    1 + 4 + body + 1 + page.high_key.as_ref().map_or(0, |k| 4 + k.len()) + 8
}

/// Index pages are stored as records whose values are child ids; the
/// leftmost child uses an empty key.
pub fn encode_page(page: &BasePage) -> Vec<u8> {
    let mut out = Vec::with_capacity(image_len(page));
    match &page.content {
        PageContent::Leaf(recs) => {
            out.push(1);
            out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
            for r in recs {
                put_bytes(&mut out, r.key.as_bytes());
                put_bytes(&mut out, r.value.as_bytes());
            }
        }
        PageContent::Index { first, terms } => {
            out.push(0);
            out.extend_from_slice(&((terms.len() + 1) as u32).to_le_bytes());
            put_bytes(&mut out, &[]);
            put_bytes(&mut out, &first.0.to_le_bytes());
            for (k, c) in terms {
                put_bytes(&mut out, k.as_bytes());
                put_bytes(&mut out, &c.0.to_le_bytes());
            }
        }
    }
    match &page.high_key {
        Some(k) => {
            out.push(1);
            put_bytes(&mut out, k.as_bytes());
        }
        None => out.push(0),
    }
    out.extend_from_slice(&page.side_link.map_or(PageId::NONE_RAW, |p| p.0).to_le_bytes());
    out
}

/// Routing metadata of an image: leaf flag, high key and side link.
pub type ImageMeta = (bool, Option<Key>, Option<PageId>);

pub fn decode_page(bytes: &[u8], lsn: u64) -> Result<BasePage> {
    let mut r = Reader { b: bytes, at: 0 };
    let is_leaf = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Corrupt(format!("bad leaf flag {v}"))),
    };
    let n = r.u32()? as usize;
    let content = if is_leaf {
        let mut recs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let k = Key::new(r.bytes()?).map_err(|_| Error::Corrupt("empty key".into()))?;
            let v = Value::new(r.bytes()?);
            recs.push(Record::new(k, v));
        }
        PageContent::Leaf(recs)
    } else {
        if n == 0 {
            return Err(Error::Corrupt("index page without children".into()));
        }
        let mut first = None;
        let mut terms = Vec::with_capacity(n - 1);
        for i in 0..n {
            let k = r.bytes()?;
            let v = r.bytes()?;
            if v.len() != 8 {
                return Err(Error::Corrupt("bad child id".into()));
            }
            let child = PageId(u64::from_le_bytes(v.try_into().unwrap()));
            if i == 0 {
                first = Some(child);
            } else {
                let k = Key::new(k).map_err(|_| Error::Corrupt("empty separator".into()))?;
                terms.push((k, child));
            }
        }
        PageContent::Index { first: first.unwrap(), terms }
    };
    let high_key = match r.u8()? {
        0 => None,
        1 => Some(Key::new(r.bytes()?).map_err(|_| Error::Corrupt("empty high key".into()))?),
        v => return Err(Error::Corrupt(format!("bad high key flag {v}"))),
    };
    let side = r.u64()?;
    let side_link = (side != PageId::NONE_RAW).then_some(PageId(side));
    if r.at != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after page image".into()));
    }
    Ok(BasePage { content, high_key, side_link, lsn })
}

pub fn split_payload_len(split_key: &Key, o_len: usize, n_len: usize) -> usize {
    12 + split_key.len() + o_len + n_len
}

pub fn encode_split_payload(split_key: &Key, o_image: &[u8], n_image: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(split_payload_len(split_key, o_image.len(), n_image.len()));
    put_bytes(&mut out, split_key.as_bytes());
    put_bytes(&mut out, o_image);
    put_bytes(&mut out, n_image);
    out
}

/// Returns (split key, O image, N image).
pub fn decode_split_payload(payload: &[u8]) -> Result<(Key, &[u8], &[u8])> {
    let mut r = Reader { b: payload, at: 0 };
    let k = Key::new(r.bytes()?).map_err(|_| Error::Corrupt("empty split key".into()))?;
    let o = r.bytes()?;
    let n = r.bytes()?;
    if r.at != payload.len() {
        return Err(Error::Corrupt("trailing bytes after split pair".into()));
    }
    Ok((k, o, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf(recs: &[(&str, &str)], high: Option<&str>, side: Option<u64>) -> BasePage {
        BasePage {
            content: PageContent::Leaf(
                recs.iter().map(|(k, v)| Record::new(Key::try_from(*k).unwrap(), Value::from(*v))).collect(),
            ),
            high_key: high.map(|h| Key::try_from(h).unwrap()),
            side_link: side.map(PageId),
            lsn: 0,
        }
    }

    #[test]
    fn leaf_image_layout_is_exact() {
        let p = leaf(&[("a", "xy")], None, None);
        let img = encode_page(&p);
        let mut expected = vec![1u8, 1, 0, 0, 0];
        expected.extend_from_slice(&[1, 0, 0, 0, b'a', 2, 0, 0, 0, b'x', b'y']);
        expected.push(0);
        expected.extend_from_slice(&[0xff; 8]);
        assert_eq!(img, expected);
        assert_eq!(image_len(&p), img.len());
    }

    #[test]
    fn frame_layout_and_checksum() {
        let mut out = vec![0u8; frame_len(3)];
        write_frame(&mut out, PageId(7), 9, FrameKind::Base, b"abc");
        assert_eq!(&out[0..8], &7u64.to_le_bytes());
        assert_eq!(&out[8..16], &9u64.to_le_bytes());
        assert_eq!(out[16], 0);
        assert_eq!(&out[17..21], &3u32.to_le_bytes());
        assert_eq!(&out[21..24], b"abc");
        let (h, payload) = parse_frame(&out).ok().unwrap();
        assert_eq!((h.page, h.lsn, h.kind, payload), (PageId(7), 9, FrameKind::Base, &b"abc"[..]));
        for i in 0..out.len() {
            let mut bad = out.clone();
            bad[i] ^= 0x40;
            assert!(parse_frame(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
    }

    #[test]
    fn index_page_roundtrip() {
        let p = BasePage {
            content: PageContent::Index {
                first: PageId(1),
                terms: vec![(Key::try_from("m").unwrap(), PageId(4)), (Key::try_from("t").unwrap(), PageId(9))],
            },
            high_key: Some(Key::try_from("z").unwrap()),
            side_link: Some(PageId(12)),
            lsn: 3,
        };
        let img = encode_page(&p);
        assert_eq!(img.len(), image_len(&p));
        assert_eq!(decode_page(&img, 3).unwrap(), p);
    }

    #[test]
    fn split_payload_roundtrip() {
        let o = encode_page(&leaf(&[("a", "1")], Some("a"), Some(5)));
        let n = encode_page(&leaf(&[("b", "2")], None, None));
        let k = Key::try_from("a").unwrap();
        let pl = encode_split_payload(&k, &o, &n);
        assert_eq!(pl.len(), split_payload_len(&k, o.len(), n.len()));
        let (k2, o2, n2) = decode_split_payload(&pl).unwrap();
        assert_eq!((k2, o2, n2), (k, &o[..], &n[..]));
    }

    proptest! {
        #[test]
        fn leaf_roundtrip(mut recs in prop::collection::btree_map(
                              prop::collection::vec(any::<u8>(), 1..12),
                              prop::collection::vec(any::<u8>(), 0..24), 0..40),
                          high in prop::option::of(prop::collection::vec(any::<u8>(), 1..12)),
                          side in any::<u32>()) {
            if let Some(h) = &high {
                recs.retain(|k, _| k <= h);
            }
            let page = BasePage {
                content: PageContent::Leaf(recs.into_iter()
                    .map(|(k, v)| Record::new(Key::new(k).unwrap(), Value::new(v))).collect()),
                side_link: high.as_ref().map(|_| PageId(side as u64)),
                high_key: high.map(|h| Key::new(h).unwrap()),
                lsn: 11,
            };
            let img = encode_page(&page);
            prop_assert_eq!(img.len(), image_len(&page));
            prop_assert_eq!(decode_page(&img, 11).unwrap(), page);
        }
    }
}
