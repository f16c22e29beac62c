//! Keys, values, page identity and the delta/notice taxonomy shared by the
//! whole engine.

use std::cmp::Ordering;
use std::fmt;
use std::sync::atomic::{AtomicPtr, AtomicU8, Ordering as AtomicOrdering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lss::Reservation;
use crate::node::Node;

/// A non-empty byte string ordered lexicographically over unsigned bytes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(Box<[u8]>);

impl Key {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Key> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::EmptyKey);
        }
        Ok(Key(bytes.into_boxed_slice()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<&str> for Key {
    type Error = Error;
    fn try_from(s: &str) -> Result<Key> {
        Key::new(s.as_bytes())
    }
}

impl TryFrom<&[u8]> for Key {
    type Error = Error;
    fn try_from(s: &[u8]) -> Result<Key> {
        Key::new(s)
    }
}

/// Lexicographic unsigned-byte order.
pub fn compare_keys(a: &Key, b: &Key) -> Ordering {
    a.as_bytes().cmp(b.as_bytes())
}

/// Arbitrary (possibly empty) byte string.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct Value(Box<[u8]>);

impl Value {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Value {
        Value(bytes.into().into_boxed_slice())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value({})", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Value {
        Value::new(s.as_bytes())
    }
}

impl From<&[u8]> for Value {
    fn from(s: &[u8]) -> Value {
        Value::new(s)
    }
}

impl From<Vec<u8>> for Value {
    fn from(v: Vec<u8>) -> Value {
        Value::new(v)
    }
}

/// Index into the mapping table. Slot 0 is the permanent root.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PageId(pub u64);

impl PageId {
    pub const ROOT: PageId = PageId(0);

    /// Encoding used on storage for "no page".
    pub const NONE_RAW: u64 = u64::MAX;

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Record {
    pub key: Key,
    pub value: Value,
}

impl Record {
    pub fn new(key: Key, value: Value) -> Record {
        Record { key, value }
    }
}

/// Where a frame lives: the segment file, the absolute byte offset of the
/// frame inside it and the frame length.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct StorageLocation {
    pub segment: u64,
    pub offset: u64,
    pub length: u32,
}

/// Which page image of a frame a location refers to. Split-pair frames carry
/// two images.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FrameHalf {
    Whole,
    SplitOld,
    SplitNew,
}

/// Contents of a consolidated page.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PageContent {
    Leaf(Vec<Record>),
    /// `first` covers keys up to and including the first separator; each
    /// `(sep, child)` term routes keys greater than `sep`.
    Index { first: PageId, terms: Vec<(Key, PageId)> },
}

/// Read-optimised state at the tail of a delta chain.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BasePage {
    pub content: PageContent,
    /// Inclusive upper bound of the page's key space; `None` is +infinity.
    pub high_key: Option<Key>,
    pub side_link: Option<PageId>,
    pub lsn: u64,
}

impl BasePage {
    pub fn empty_leaf() -> BasePage {
        BasePage {
            content: PageContent::Leaf(Vec::new()),
            high_key: None,
            side_link: None,
            lsn: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.content, PageContent::Leaf(_))
    }

    /// Records for a leaf, child entries (including the leftmost) for an
    /// index page.
    pub fn entry_count(&self) -> usize {
        match &self.content {
            PageContent::Leaf(r) => r.len(),
            PageContent::Index { terms, .. } => terms.len() + 1,
        }
    }

    pub fn records(&self) -> &[Record] {
        match &self.content {
            PageContent::Leaf(r) => r,
            PageContent::Index { .. } => &[],
        }
    }

    pub fn lookup(&self, key: &Key) -> Option<&Value> {
        let recs = self.records();
        recs.binary_search_by(|r| r.key.cmp(key))
            .ok()
            .map(|i| &recs[i].value)
    }

    /// Checks sortedness and the high-key bound.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let keys: Vec<&Key> = match &self.content {
            PageContent::Leaf(r) => r.iter().map(|r| &r.key).collect(),
            PageContent::Index { terms, .. } => terms.iter().map(|t| &t.0).collect(),
        };
        for w in keys.windows(2) {
            if w[0] >= w[1] {
                return Err(format!("keys not strictly sorted: {:?} >= {:?}", w[0], w[1]));
            }
        }
        if let (Some(high), Some(last)) = (&self.high_key, keys.last()) {
            if *last > high {
                return Err(format!("key {last:?} above high key {high:?}"));
            }
        }
        if self.high_key.is_some() != self.side_link.is_some() {
            return Err("high key and side link must be both present or both absent".into());
        }
        Ok(())
    }
}

/// Identity of one notice instance; stable across the two nodes that carry
/// an sNOTICE.
pub type NoticeId = u64;

/// Payload of an sNOTICE.
#[derive(Debug)]
pub struct SplitDescriptor {
    pub id: NoticeId,
    pub split_key: Key,
    /// Node O.
    pub old_id: PageId,
    /// Node N (the right half; for a root split, the right child).
    pub new_id: PageId,
    /// Left child for a root split. Root splits move both halves out of slot 0.
    pub root_left: Option<PageId>,
    /// Pre-reserved buffer space for both post-split images. Root splits do
    /// not reserve.
    pub buffer_loc: Option<StorageLocation>,
    pub(crate) reservation: Option<Arc<Reservation>>,
}

impl SplitDescriptor {
    pub fn is_root_split(&self) -> bool {
        self.root_left.is_some()
    }
}

/// Progress of a merge, shared by its pNOTICE, dNOTICE and mNOTICE so that a
/// taker-over can resume.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum MergePhase {
    ParentNoticed = 0,
    RemovedNoticed = 1,
    /// One thread is posting the mNOTICE; the merge cannot be aborted.
    PostingSurvivor = 2,
    SurvivorNoticed = 3,
    Merged = 4,
    Done = 5,
    Aborted = 6,
}

impl MergePhase {
    fn from_u8(v: u8) -> MergePhase {
        match v {
            0 => MergePhase::ParentNoticed,
            1 => MergePhase::RemovedNoticed,
            2 => MergePhase::PostingSurvivor,
            3 => MergePhase::SurvivorNoticed,
            4 => MergePhase::Merged,
            5 => MergePhase::Done,
            _ => MergePhase::Aborted,
        }
    }
}

/// Payload of the three merge notices.
pub struct MergeDescriptor {
    pub id: NoticeId,
    /// Node P.
    pub parent_id: PageId,
    /// Node M.
    pub survivor_id: PageId,
    /// Node D.
    pub removed_id: PageId,
    /// Separator of D's index term in P.
    pub sep_key: Key,
    phase: AtomicU8,
    /// D's dNOTICE node; set once when the dNOTICE is installed.
    pub(crate) removed_notice: AtomicPtr<Node>,
}

impl MergeDescriptor {
    pub fn new(id: NoticeId, parent: PageId, survivor: PageId, removed: PageId, sep: Key) -> Self {
        MergeDescriptor {
            id,
            parent_id: parent,
            survivor_id: survivor,
            removed_id: removed,
            sep_key: sep,
            phase: AtomicU8::new(MergePhase::ParentNoticed as u8),
            removed_notice: AtomicPtr::new(std::ptr::null_mut()),
        }
    }

    pub fn phase(&self) -> MergePhase {
        MergePhase::from_u8(self.phase.load(AtomicOrdering::SeqCst))
    }

    /// Moves the phase forward; never moves it back.
    pub(crate) fn advance_phase(&self, to: MergePhase) {
        let mut cur = self.phase.load(AtomicOrdering::SeqCst);
        while cur < to as u8 && cur != MergePhase::Aborted as u8 {
            match self.phase.compare_exchange(cur, to as u8, AtomicOrdering::SeqCst, AtomicOrdering::SeqCst) {
                Ok(_) => return,
                Err(v) => cur = v,
            }
        }
    }

    /// Single-winner transition `from` -> `to`.
    pub(crate) fn transition(&self, from: MergePhase, to: MergePhase) -> bool {
        self.phase
            .compare_exchange(from as u8, to as u8, AtomicOrdering::SeqCst, AtomicOrdering::SeqCst)
            .is_ok()
    }

    pub(crate) fn try_abort(&self) -> bool {
        let mut cur = self.phase.load(AtomicOrdering::SeqCst);
        loop {
            if cur == MergePhase::Aborted as u8 {
                return true;
            }
            if cur >= MergePhase::PostingSurvivor as u8 {
                return false;
            }
            match self.phase.compare_exchange(cur, MergePhase::Aborted as u8, AtomicOrdering::SeqCst, AtomicOrdering::SeqCst) {
                Ok(_) => return true,
                Err(v) => cur = v,
            }
        }
    }
}

impl fmt::Debug for MergeDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MergeDescriptor")
            .field("id", &self.id)
            .field("parent", &self.parent_id)
            .field("survivor", &self.survivor_id)
            .field("removed", &self.removed_id)
            .field("sep", &self.sep_key)
            .field("phase", &self.phase())
            .finish()
    }
}

#[derive(Debug)]
pub enum DeltaKind {
    Put(Record),
    Delete(Key),
    IndexTermPost { sep: Key, child: PageId },
    IndexTermRemove { sep: Key },
    CNotice,
    SNotice(Arc<SplitDescriptor>),
    PNotice(Arc<MergeDescriptor>),
    DNotice(Arc<MergeDescriptor>),
    MNotice(Arc<MergeDescriptor>),
    VoidMarker(NoticeId),
}

impl DeltaKind {
    pub fn is_notice(&self) -> bool {
        matches!(
            self,
            DeltaKind::CNotice
                | DeltaKind::SNotice(_)
                | DeltaKind::PNotice(_)
                | DeltaKind::DNotice(_)
                | DeltaKind::MNotice(_)
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            DeltaKind::Put(_) => "put",
            DeltaKind::Delete(_) => "delete",
            DeltaKind::IndexTermPost { .. } => "index-term-post",
            DeltaKind::IndexTermRemove { .. } => "index-term-remove",
            DeltaKind::CNotice => "cnotice",
            DeltaKind::SNotice(_) => "snotice",
            DeltaKind::PNotice(_) => "pnotice",
            DeltaKind::DNotice(_) => "dnotice",
            DeltaKind::MNotice(_) => "mnotice",
            DeltaKind::VoidMarker(_) => "void",
        }
    }
}

/// One immutable change record. Notices carry a non-zero `notice_id`.
#[derive(Debug)]
pub struct Delta {
    pub kind: DeltaKind,
    pub notice_id: NoticeId,
    pub posted_epoch: u64,
    pub owner: u64,
}

impl Delta {
    pub fn new(kind: DeltaKind) -> Delta {
        Delta { kind, notice_id: 0, posted_epoch: 0, owner: current_thread_tag() }
    }

    pub fn put(record: Record) -> Delta {
        Delta::new(DeltaKind::Put(record))
    }

    pub fn delete(key: Key) -> Delta {
        Delta::new(DeltaKind::Delete(key))
    }

    /// Stable digest of the payload, used to check immutability.
    pub fn digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.notice_id.hash(&mut h);
        self.posted_epoch.hash(&mut h);
        self.owner.hash(&mut h);
        match &self.kind {
            DeltaKind::Put(r) => {
                0u8.hash(&mut h);
                r.key.hash(&mut h);
                r.value.hash(&mut h);
            }
            DeltaKind::Delete(k) => {
                1u8.hash(&mut h);
                k.hash(&mut h);
            }
            DeltaKind::IndexTermPost { sep, child } => {
                2u8.hash(&mut h);
                sep.hash(&mut h);
                child.hash(&mut h);
            }
            DeltaKind::IndexTermRemove { sep } => {
                3u8.hash(&mut h);
                sep.hash(&mut h);
            }
            DeltaKind::CNotice => 4u8.hash(&mut h),
            DeltaKind::SNotice(d) => {
                5u8.hash(&mut h);
                d.split_key.hash(&mut h);
                d.old_id.hash(&mut h);
                d.new_id.hash(&mut h);
            }
            DeltaKind::PNotice(d) | DeltaKind::DNotice(d) | DeltaKind::MNotice(d) => {
                6u8.hash(&mut h);
                d.id.hash(&mut h);
                d.sep_key.hash(&mut h);
            }
            DeltaKind::VoidMarker(id) => {
                7u8.hash(&mut h);
                id.hash(&mut h);
            }
        }
        h.finish()
    }
}

thread_local! {
    static THREAD_TAG: u64 = {
        use std::sync::atomic::AtomicU64;
        static NEXT: AtomicU64 = AtomicU64::new(1);
        NEXT.fetch_add(1, AtomicOrdering::Relaxed)
    };
}

/// Opaque identity of the calling thread, recorded as a delta's owner.
pub fn current_thread_tag() -> u64 {
    THREAD_TAG.with(|t| *t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn k(s: &str) -> Key {
        Key::try_from(s).unwrap()
    }

    #[test]
    fn identity_and_prefix() {
        assert_eq!(compare_keys(&k("a"), &k("a")), Ordering::Equal);
        assert_eq!(compare_keys(&k("a"), &k("ab")), Ordering::Less);
        assert_eq!(compare_keys(&k("b"), &k("ab")), Ordering::Greater);
    }

    #[test]
    fn empty_key_rejected() {
        assert!(matches!(Key::new(Vec::new()), Err(Error::EmptyKey)));
        assert!(Value::new(Vec::new()).is_empty());
    }

    // Reference oracle: compare byte by byte as unsigned, then by length.
    fn reference_cmp(a: &[u8], b: &[u8]) -> Ordering {
        let n = a.len().min(b.len());
        for i in 0..n {
            if a[i] != b[i] {
                return if (a[i] as u32) < (b[i] as u32) { Ordering::Less } else { Ordering::Greater };
            }
        }
        a.len().cmp(&b.len())
    }

    #[test]
    fn agrees_with_reference_over_random_pairs() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..100_000 {
            let la = rng.random_range(1..6);
            let lb = rng.random_range(1..6);
            // small alphabet including high bytes so prefixes and sign issues show up
            let a: Vec<u8> = (0..la).map(|_| [0u8, 1, 0x7f, 0x80, 0xff][rng.random_range(0..5)]).collect();
            let b: Vec<u8> = (0..lb).map(|_| [0u8, 1, 0x7f, 0x80, 0xff][rng.random_range(0..5)]).collect();
            let ka = Key::new(a.clone()).unwrap();
            let kb = Key::new(b.clone()).unwrap();
            assert_eq!(compare_keys(&ka, &kb), reference_cmp(&a, &b), "{a:?} vs {b:?}");
        }
    }

    proptest! {
        #[test]
        fn total_order(a in prop::collection::vec(any::<u8>(), 1..8),
                       b in prop::collection::vec(any::<u8>(), 1..8),
                       c in prop::collection::vec(any::<u8>(), 1..8)) {
            let (a, b, c) = (Key::new(a).unwrap(), Key::new(b).unwrap(), Key::new(c).unwrap());
            prop_assert_eq!(compare_keys(&a, &a), Ordering::Equal);
            prop_assert_eq!(compare_keys(&a, &b), compare_keys(&b, &a).reverse());
            if compare_keys(&a, &b) != Ordering::Greater && compare_keys(&b, &c) != Ordering::Greater {
                prop_assert_ne!(compare_keys(&a, &c), Ordering::Greater);
            }
        }
    }

    #[test]
    fn base_page_validation() {
        let mut p = BasePage::empty_leaf();
        p.content = PageContent::Leaf(vec![
            Record::new(k("a"), "1".into()),
            Record::new(k("c"), "3".into()),
        ]);
        assert!(p.validate().is_ok());
        assert_eq!(p.lookup(&k("c")), Some(&Value::from("3")));
        assert_eq!(p.lookup(&k("b")), None);
        p.high_key = Some(k("b"));
        p.side_link = Some(PageId(3));
        assert!(p.validate().is_err());
    }

    #[test]
    fn merge_phase_only_moves_forward() {
        let d = MergeDescriptor::new(1, PageId(0), PageId(1), PageId(2), k("m"));
        d.advance_phase(MergePhase::SurvivorNoticed);
        d.advance_phase(MergePhase::RemovedNoticed);
        assert_eq!(d.phase(), MergePhase::SurvivorNoticed);
        assert!(!d.try_abort());
        let d2 = MergeDescriptor::new(2, PageId(0), PageId(1), PageId(2), k("m"));
        assert!(d2.try_abort());
        d2.advance_phase(MergePhase::Done);
        assert_eq!(d2.phase(), MergePhase::Aborted);
    }
}
