//! Scripted interleavings: named threads, their operations, and the exact
//! order in which they pass named checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use noticetree::{hooks, Config, Store};
use serde::Deserialize;

use crate::sched::{Decision, Policy, Scheduler};
use crate::HarnessError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub config: ConfigOverrides,
    #[serde(default)]
    pub setup: Setup,
    #[serde(rename = "thread", default)]
    pub threads: Vec<ThreadSpec>,
    #[serde(rename = "step", default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub after: After,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub consolidate_threshold: Option<usize>,
    pub split_record_threshold: Option<usize>,
    pub merge_record_threshold: Option<usize>,
    pub notice_timeout_epochs: Option<u64>,
    pub auto_maintenance: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    /// Puts `{prefix}{i:06}` = `value` for i in 0..count.
    pub fill: Option<Fill>,
    #[serde(default)]
    pub ops: Vec<ScriptOp>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fill {
    pub count: u64,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    #[serde(default = "default_value")]
    pub value: String,
}

fn default_prefix() -> String {
    "k".into()
}

fn default_value() -> String {
    "v".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptOp {
    Put { key: String, value: String },
    PutBlind { key: String, value: String },
    Delete { key: String },
    Get { key: String },
    Split { key: String },
    Merge { key: String },
    Consolidate { key: String },
    Evict { key: String },
    Maintain,
    AdvanceEpoch,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    pub name: String,
    pub ops: Vec<ScriptOp>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub thread: String,
    /// Run the thread until it reaches this checkpoint; without it, until
    /// the thread finishes.
    pub until: Option<String>,
    #[serde(default)]
    pub kill: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct After {
    #[serde(default)]
    pub advance_epochs: u64,
    #[serde(default)]
    pub maintain: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Groups of keys that must end up in the same leaf.
    #[serde(default)]
    pub same_leaf: Vec<Vec<String>>,
    /// Groups of keys that must end up in different leaves.
    #[serde(default)]
    pub different_leaves: Vec<Vec<String>>,
    /// Lower bounds on store counters, by name.
    #[serde(default)]
    pub stats_at_least: BTreeMap<String, u64>,
    /// Exact values of store counters, by name.
    #[serde(default)]
    pub stats: BTreeMap<String, u64>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, HarnessError> {
        let s: Script = toml::from_str(text).map_err(|e| HarnessError::Script(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Script, HarnessError> {
        Script::parse(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<(), HarnessError> {
        let names: BTreeSet<&str> = self.threads.iter().map(|t| t.name.as_str()).collect();
        if names.len() != self.threads.len() {
            return Err(HarnessError::Script("thread names must be unique".into()));
        }
        if self.threads.is_empty() {
            return Err(HarnessError::Script("no threads".into()));
        }
        for s in &self.steps {
            if !names.contains(s.thread.as_str()) {
                return Err(HarnessError::Script(format!("step names unknown thread {:?}", s.thread)));
            }
            if let Some(u) = &s.until {
                if !hooks::is_known(u) {
                    return Err(HarnessError::UnknownCheckpoint(u.clone()));
                }
            }
            if s.kill && s.until.is_none() {
                return Err(HarnessError::Script("kill needs an until checkpoint".into()));
            }
        }
        for name in self.expect.stats.keys().chain(self.expect.stats_at_least.keys()) {
            if stat(&noticetree::StatsSnapshot::default(), name).is_none() {
                return Err(HarnessError::Script(format!("unknown counter {name:?}")));
            }
        }
        Ok(())
    }

    fn thread_index(&self, name: &str) -> usize {
        self.threads.iter().position(|t| t.name == name).expect("checked")
    }

    pub fn config(&self, dir: &Path) -> Config {
        let mut c = Config::new(dir);
        c.mapping_capacity = 1 << 16;
        c.auto_maintenance = false;
        let o = &self.config;
        if let Some(v) = o.consolidate_threshold {
            c.consolidate_threshold = v;
        }
        if let Some(v) = o.split_record_threshold {
            c.split_record_threshold = v;
        }
        if let Some(v) = o.merge_record_threshold {
            c.merge_record_threshold = v;
        }
        if let Some(v) = o.notice_timeout_epochs {
            c.notice_timeout_epochs = v;
        }
        if let Some(v) = o.auto_maintenance {
            c.auto_maintenance = v;
        }
        c
    }
}

fn counters(s: &noticetree::StatsSnapshot) -> [(&'static str, u64); 20] {
    [
        ("consolidations", s.consolidations),
        ("heavy_consolidations", s.heavy_consolidations),
        ("splits", s.splits),
        ("root_splits", s.root_splits),
        ("merges", s.merges),
        ("merges_aborted", s.merges_aborted),
        ("notices_won", s.notices_won),
        ("notices_lost", s.notices_lost),
        ("takeovers", s.takeovers),
        ("installs_succeeded", s.installs_succeeded),
        ("installs_superseded", s.installs_superseded),
        ("record_moves", s.record_moves),
        ("index_terms_posted", s.index_terms_posted),
        ("index_terms_removed", s.index_terms_removed),
        ("dnotice_violations", s.dnotice_violations),
        ("evictions", s.evictions),
        ("physical_reads", s.physical_reads),
        ("physical_writes", s.physical_writes),
        ("poison_reads", s.poison_reads),
        ("merge_yields", s.merge_yields),
    ]
}

fn stat(s: &noticetree::StatsSnapshot, name: &str) -> Option<u64> {
    counters(s).into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
}

/// Follows the script's steps; once they run out, lets every thread run to
/// completion in id order.
struct Directed {
    steps: Vec<(usize, Option<&'static str>, bool)>,
    next: usize,
    problems: Arc<Mutex<Vec<String>>>,
}

impl Directed {
    fn target(&self, runnable: &[usize], fallback: usize) -> Decision {
        match self.steps.get(self.next) {
            Some(&(t, _, _)) if runnable.contains(&t) => Decision::Switch(t),
            Some(&(t, _, _)) => {
                self.problems.lock().unwrap().push(format!("step {} names thread {t}, which has finished", self.next));
                Decision::Switch(fallback)
            }
            None => Decision::Switch(fallback),
        }
    }
}

impl Policy for Directed {
    fn decide(&mut self, current: usize, point: Option<&'static str>, runnable: &[usize]) -> Decision {
        match point {
            _ if runnable.is_empty() => {
                if let Some(&(t, Some(u), _)) = self.steps.get(self.next) {
                    self.problems.lock().unwrap().push(format!("thread {t} finished before reaching {u}"));
                }
                Decision::Continue
            }
            Some("start") => self.target(runnable, runnable[0]),
            None => {
                if let Some(&(t, until, _)) = self.steps.get(self.next) {
                    if t == current {
                        if let Some(u) = until {
                            self.problems.lock().unwrap().push(format!("thread {t} finished before reaching {u}"));
                        }
                        self.next += 1;
                    }
                }
                self.target(runnable, runnable[0])
            }
            Some(p) => match self.steps.get(self.next) {
                Some(&(t, Some(u), kill)) if t == current && u == p => {
                    self.next += 1;
                    if kill {
                        Decision::Kill
                    } else {
                        self.target(runnable, current)
                    }
                }
                _ => Decision::Continue,
            },
        }
    }
}

fn static_point(p: &str) -> &'static str {
    hooks::CHECKPOINTS.iter().copied().find(|c| *c == p).expect("checked")
}

#[derive(Debug, Clone)]
enum Effect {
    Put(String, String),
    Delete(String),
    /// A write whose outcome is unknown (its thread was killed).
    Unknown(String),
}

fn apply(store: &Store, op: &ScriptOp) -> noticetree::Result<Option<Effect>> {
    Ok(match op {
        ScriptOp::Put { key, value } => {
            store.put(key.as_bytes(), value.as_bytes())?;
            Some(Effect::Put(key.clone(), value.clone()))
        }
        ScriptOp::PutBlind { key, value } => {
            store.put_blind(key.as_bytes(), value.as_bytes())?;
            Some(Effect::Put(key.clone(), value.clone()))
        }
        ScriptOp::Delete { key } => {
            store.delete(key.as_bytes())?;
            Some(Effect::Delete(key.clone()))
        }
        ScriptOp::Get { key } => {
            store.get(key.as_bytes())?;
            None
        }
        ScriptOp::Split { key } => {
            store.split_leaf(key.as_bytes())?;
            None
        }
        ScriptOp::Merge { key } => {
            store.merge_leaf(key.as_bytes())?;
            None
        }
        ScriptOp::Consolidate { key } => {
            store.consolidate_leaf(key.as_bytes())?;
            None
        }
        ScriptOp::Evict { key } => {
            store.evict_leaf(key.as_bytes())?;
            None
        }
        ScriptOp::Maintain => {
            store.maintain()?;
            None
        }
        ScriptOp::AdvanceEpoch => {
            store.advance_epoch();
            None
        }
    })
}

fn written_key(op: &ScriptOp) -> Option<&str> {
    match op {
        ScriptOp::Put { key, .. } | ScriptOp::PutBlind { key, .. } | ScriptOp::Delete { key } => Some(key),
        _ => None,
    }
}

#[derive(Debug)]
pub struct Verdict {
    pub passed: bool,
    pub problems: Vec<String>,
    /// Checkpoints passed, in order, as `thread@checkpoint`.
    pub trace: Vec<String>,
    pub dump: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{}", if self.passed { "PASS" } else { "FAIL" })?;
        for p in &self.problems {
            writeln!(f, "  {p}")?;
        }
        if !self.passed {
            writeln!(f, "trace: {}", self.trace.join(" "))?;
            write!(f, "{}", self.dump)?;
        }
        Ok(())
    }
}

/// Runs `script` in a fresh store under `dir`.
pub fn run_script(script: &Script, dir: &Path) -> Result<Verdict, HarnessError> {
    let problems = Arc::new(Mutex::new(Vec::new()));
    let steps = script
        .steps
        .iter()
        .map(|s| (script.thread_index(&s.thread), s.until.as_deref().map(static_point), s.kill))
        .collect();
    let policy = Directed { steps, next: 0, problems: problems.clone() };
    let sched = Scheduler::new(script.threads.len(), Box::new(policy));
    let store = Arc::new(Store::open(script.config(dir).with_hooks(sched.clone()))?);

    let mut model: BTreeMap<String, String> = BTreeMap::new();
    if let Some(fill) = &script.setup.fill {
        for i in 0..fill.count {
            let k = format!("{}{i:06}", fill.prefix);
            store.put(k.as_bytes(), fill.value.as_bytes())?;
            model.insert(k, fill.value.clone());
        }
    }
    for op in &script.setup.ops {
        record(&mut model, &mut BTreeSet::new(), apply(&store, op)?);
    }

    let log: Arc<Mutex<Vec<Effect>>> = Arc::default();
    let bodies: Vec<Box<dyn FnOnce() + Send>> = script
        .threads
        .iter()
        .map(|t| {
            let (store, log, problems, ops, name) =
                (store.clone(), log.clone(), problems.clone(), t.ops.clone(), t.name.clone());
            Box::new(move || {
                for op in &ops {
                    match apply(&store, op) {
                        Ok(e) => log.lock().unwrap().extend(e),
                        Err(noticetree::Error::Killed) => {
                            log.lock().unwrap().extend(written_key(op).map(|k| Effect::Unknown(k.to_string())));
                            return;
                        }
                        Err(e) => {
                            problems.lock().unwrap().push(format!("thread {name}: {op:?} failed: {e}"));
                            return;
                        }
                    }
                }
            }) as Box<dyn FnOnce() + Send>
        })
        .collect();
    let events = sched.run(bodies).map_err(HarnessError::Invariant)?;
    let trace: Vec<String> =
        events.iter().map(|e| format!("{}@{}", script.threads[e.thread].name, e.point)).collect();

    for _ in 0..script.after.advance_epochs {
        store.advance_epoch();
    }
    if script.after.maintain {
        store.maintain()?;
    }

    let mut uncertain = BTreeSet::new();
    for e in log.lock().unwrap().drain(..) {
        record(&mut model, &mut uncertain, Some(e));
    }
    let mut problems = std::mem::take(&mut *problems.lock().unwrap());
    let scan: BTreeMap<String, String> = store
        .scan_all()?
        .into_iter()
        .map(|(k, v)| (String::from_utf8_lossy(k.as_bytes()).into_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let keys: BTreeSet<&String> = scan.keys().chain(model.keys()).collect();
    for k in keys {
        if uncertain.contains(k) {
            continue;
        }
        if scan.get(k) != model.get(k) {
            problems.push(format!("key {k}: store has {:?}, oracle has {:?}", scan.get(k), model.get(k)));
        }
        match store.get(k.as_bytes())? {
            v if v.as_ref().map(|v| v.as_bytes()) != model.get(k).map(|s| s.as_bytes()) => {
                problems.push(format!("key {k}: get disagrees with oracle"))
            }
            _ => {}
        }
    }
    for group in &script.expect.same_leaf {
        let leaves: BTreeSet<_> = group.iter().map(|k| store.leaf_of(k.as_bytes())).collect::<Result<_, _>>()?;
        if leaves.len() != 1 {
            problems.push(format!("expected {group:?} in one leaf, found {}", leaves.len()));
        }
    }
    for group in &script.expect.different_leaves {
        let leaves: BTreeSet<_> = group.iter().map(|k| store.leaf_of(k.as_bytes())).collect::<Result<_, _>>()?;
        if leaves.len() != group.len() {
            problems.push(format!("expected {group:?} in distinct leaves, found {}", leaves.len()));
        }
    }
    let stats = store.stats();
    for (name, want) in &script.expect.stats {
        let got = stat(&stats, name).expect("checked");
        if got != *want {
            problems.push(format!("counter {name} is {got}, expected {want}"));
        }
    }
    for (name, want) in &script.expect.stats_at_least {
        let got = stat(&stats, name).expect("checked");
        if got < *want {
            problems.push(format!("counter {name} is {got}, expected at least {want}"));
        }
    }
    let rep = store.validate()?;
    problems.extend(rep.errors.iter().map(|e| format!("tree: {e}")));

    let mut dump = String::new();
    let _ = writeln!(dump, "stats: {:?}", counters(&stats));
    let _ = writeln!(dump, "tree: {rep}");
    let _ = writeln!(dump, "chains: {:?}", store.chain_lengths());
    let _ = writeln!(dump, "contents: {scan:?}");

    store.close()?;
    drop(store);
    let disk = noticetree::fsck::check_dir(dir)?;
    problems.extend(disk.errors.iter().map(|e| format!("fsck: {e}")));

    Ok(Verdict { passed: problems.is_empty(), problems, trace, dump })
}

fn record(model: &mut BTreeMap<String, String>, uncertain: &mut BTreeSet<String>, e: Option<Effect>) {
    match e {
        Some(Effect::Put(k, v)) => {
            model.insert(k, v);
        }
        Some(Effect::Delete(k)) => {
            model.remove(&k);
        }
        Some(Effect::Unknown(k)) => {
            uncertain.insert(k);
        }
        None => {}
    }
}
