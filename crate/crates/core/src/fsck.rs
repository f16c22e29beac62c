//! Offline and online structural checks of a tree.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::Result;
use crate::lss::scan_dir;
use crate::model::{BasePage, Key, PageContent, PageId};

/// Source of page images by id.
pub trait PageSource {
    /// `Ok(None)` when the page does not exist.
    fn page(&mut self, id: PageId) -> std::result::Result<Option<BasePage>, String>;
}

impl PageSource for BTreeMap<PageId, BasePage> {
    fn page(&mut self, id: PageId) -> std::result::Result<Option<BasePage>, String> {
        Ok(self.get(&id).cloned())
    }
}

#[derive(Debug, Default, Clone)]
pub struct FsckReport {
    pub pages: usize,
    pub levels: usize,
    pub records: usize,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl FsckReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for FsckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pages: {}  levels: {}  records: {}", self.pages, self.levels, self.records)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        write!(f, "{}", if self.is_ok() { "ok" } else { "FAILED" })
    }
}

/// Checks the tree stored in `dir`.
pub fn check_dir(dir: &Path) -> Result<FsckReport> {
    let scan = scan_dir(dir)?;
    let mut pre = FsckReport::default();
    for s in &scan.segments {
        if let Some((off, why)) = &s.stopped_at {
            let msg = format!("segment {} ({}): {} at offset {}", s.segment, s.path.display(), why, off);
            if why == "truncated frame" {
                pre.warnings.push(msg);
            } else {
                pre.errors.push(msg);
            }
        }
    }
    let mut images: BTreeMap<PageId, BasePage> =
        scan.live_pages().map(|(id, f)| (*id, f.image.clone().unwrap())).collect();
    if images.is_empty() {
        pre.warnings.push("no pages on storage".into());
        return Ok(pre);
    }
    let known: Vec<PageId> = images.keys().copied().collect();
    let mut rep = check_tree(&mut images, Some(&known));
    rep.errors.splice(0..0, pre.errors);
    rep.warnings.splice(0..0, pre.warnings);
    Ok(rep)
}

/// Walks every level of the tree from the root along side links and checks
/// key order, key ranges, level structure and references.
pub fn check_tree(src: &mut impl PageSource, known: Option<&[PageId]>) -> FsckReport {
    let mut rep = FsckReport::default();
    let mut visited: BTreeSet<PageId> = BTreeSet::new();
    // expected low bound of each page on the next level, from its parent
    let mut expect: HashMap<PageId, Option<Key>> = HashMap::new();
    let mut level_start = PageId::ROOT;
    let mut level = 0usize;
    loop {
        let mut pid = level_start;
        let mut low: Option<Key> = None;
        let mut level_kind: Option<bool> = None;
        let mut lows: HashMap<PageId, Option<Key>> = HashMap::new();
        let mut next_expect: HashMap<PageId, Option<Key>> = HashMap::new();
        let mut next_start: Option<PageId> = None;
        loop {
            if !visited.insert(pid) {
                rep.errors.push(format!("level {level}: page {pid} visited twice"));
                break;
            }
            let page = match src.page(pid) {
                Ok(Some(p)) => p,
                Ok(None) => {
                    rep.errors.push(format!("level {level}: page {pid} is missing"));
                    break;
                }
                Err(e) => {
                    rep.errors.push(format!("level {level}: page {pid} unreadable: {e}"));
                    break;
                }
            };
            rep.pages += 1;
            lows.insert(pid, low.clone());
            let is_leaf = page.is_leaf();
            match level_kind {
                None => level_kind = Some(is_leaf),
                Some(k) if k != is_leaf => rep.errors.push(format!("level {level}: page {pid} mixes leaf and index")),
                _ => {}
            }
            if let Err(e) = page.validate() {
                rep.errors.push(format!("page {pid}: {e}"));
            }
            let in_range = |k: &Key| low.as_ref().is_none_or(|l| k > l) && page.high_key.as_ref().is_none_or(|h| k <= h);
            match &page.content {
                PageContent::Leaf(recs) => {
                    rep.records += recs.len();
                    for r in recs {
                        if !in_range(&r.key) {
                            rep.errors.push(format!("page {pid}: key {:?} outside ({:?}, {:?}]", r.key, low, page.high_key));
                        }
                    }
                }
                PageContent::Index { first, terms } => {
                    if next_start.is_none() {
                        next_start = Some(*first);
                    }
                    next_expect.insert(*first, low.clone());
                    for (sep, child) in terms {
                        if !in_range(sep) || page.high_key.as_ref() == Some(sep) {
                            rep.errors.push(format!("page {pid}: separator {sep:?} outside ({:?}, {:?})", low, page.high_key));
                        }
                        if next_expect.insert(*child, Some(sep.clone())).is_some() {
                            rep.errors.push(format!("page {pid}: child {child} referenced twice"));
                        }
                    }
                }
            }
            if let (Some(l), Some(h)) = (&low, &page.high_key) {
                if h <= l {
                    rep.errors.push(format!("level {level}: high key of {pid} not above its left neighbour's"));
                }
            }
            match (&page.high_key, page.side_link) {
                (None, None) => break,
                (Some(h), Some(s)) => {
                    low = Some(h.clone());
                    pid = s;
                }
                _ => {
                    rep.errors.push(format!("page {pid}: high key and side link disagree"));
                    break;
                }
            }
        }
        for (child, l) in &expect {
            match lows.get(child) {
                None => rep.errors.push(format!("level {level}: child {child} not reachable along the level")),
                Some(actual) if actual != l => {
                    rep.errors.push(format!("level {level}: child {child} starts at {actual:?}, parent says {l:?}"))
                }
                _ => {}
            }
        }
        rep.levels += 1;
        if level_kind != Some(false) {
            break;
        }
        let Some(s) = next_start else { break };
        expect = next_expect;
        level_start = s;
        level += 1;
        if level > 64 {
            rep.errors.push("more than 64 levels".into());
            break;
        }
    }
    if let Some(known) = known {
        for id in known {
            if !visited.contains(id) {
                rep.warnings.push(format!("page {id} is not reachable from the root"));
            }
        }
    }
    rep
}
