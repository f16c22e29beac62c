//! Cooperative single-step scheduling of real threads.
//!
//! Every participant is an OS thread, but only the one holding the baton
//! runs. The baton changes hands only at engine checkpoints and when a
//! participant finishes, so a run is fully determined by the sequence of
//! choices the policy makes.

use std::cell::Cell;
use std::sync::{Arc, Condvar, Mutex};

use noticetree::{HookAction, Hooks};

thread_local! {
    static PARTICIPANT: Cell<Option<(usize, usize)>> = const { Cell::new(None) };
}

/// What to do when a participant reaches a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Switch(usize),
    /// The participant dies here; its operation fails and it runs nothing
    /// further.
    Kill,
}

pub trait Policy: Send {
    /// `current` reached `point` (or finished, when `point` is `None`, in
    /// which case only `Switch` is meaningful and `runnable` may be empty). `runnable` lists the
    /// participants that can run, in id order, including `current` unless it
    /// finished.
    fn decide(&mut self, current: usize, point: Option<&'static str>, runnable: &[usize]) -> Decision;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub thread: usize,
    pub point: &'static str,
}

struct State {
    running: Option<usize>,
    done: Vec<bool>,
    killed: Vec<bool>,
    trace: Vec<Event>,
    policy: Box<dyn Policy>,
    error: Option<String>,
}

/// Hooks object shared by the store and the participants of one run.
pub struct Scheduler {
    token: usize,
    state: Mutex<State>,
    cv: Condvar,
}

static NEXT_TOKEN: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(1);

impl Scheduler {
    pub fn new(threads: usize, policy: Box<dyn Policy>) -> Arc<Scheduler> {
        Arc::new(Scheduler {
            token: NEXT_TOKEN.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            state: Mutex::new(State {
                running: None,
                done: vec![false; threads],
                killed: vec![false; threads],
                trace: Vec::new(),
                policy,
                error: None,
            }),
            cv: Condvar::new(),
        })
    }

    fn runnable(st: &State) -> Vec<usize> {
        (0..st.done.len()).filter(|&i| !st.done[i]).collect()
    }

    fn me(&self) -> Option<usize> {
        PARTICIPANT.with(|p| p.get()).and_then(|(tok, id)| (tok == self.token).then_some(id))
    }

    fn wait_for_turn<'a>(&'a self, mut st: std::sync::MutexGuard<'a, State>, id: usize) -> std::sync::MutexGuard<'a, State> {
        while st.running != Some(id) {
            st = self.cv.wait(st).unwrap();
        }
        st
    }

    /// Runs every body to completion under the policy. Body `i` runs as
    /// participant `i`; participant 0 gets the baton first unless the policy
    /// switches away at the start.
    pub fn run(self: &Arc<Self>, bodies: Vec<Box<dyn FnOnce() + Send>>) -> Result<Vec<Event>, String> {
        let n = bodies.len();
        assert_eq!(n, self.state.lock().unwrap().done.len());
        let handles: Vec<_> = bodies
            .into_iter()
            .enumerate()
            .map(|(id, body)| {
                let me = self.clone();
                std::thread::spawn(move || {
                    PARTICIPANT.with(|p| p.set(Some((me.token, id))));
                    drop(me.wait_for_turn(me.state.lock().unwrap(), id));
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
                    let mut st = me.state.lock().unwrap();
                    if r.is_err() && st.error.is_none() {
                        st.error = Some(format!("participant {id} panicked"));
                    }
                    me.finish(&mut st, id);
                })
            })
            .collect();
        {
            let mut st = self.state.lock().unwrap();
            let runnable = Self::runnable(&st);
            let first = match st.policy.decide(0, Some("start"), &runnable) {
                Decision::Switch(t) if runnable.contains(&t) => t,
                _ => 0,
            };
            st.running = Some(first);
            self.cv.notify_all();
        }
        for h in handles {
            let _ = h.join();
        }
        let mut st = self.state.lock().unwrap();
        match st.error.take() {
            Some(e) => Err(e),
            None => Ok(std::mem::take(&mut st.trace)),
        }
    }

    fn finish(&self, st: &mut State, id: usize) {
        st.done[id] = true;
        let runnable = Self::runnable(st);
        let d = st.policy.decide(id, None, &runnable);
        st.running = match (runnable.first(), d) {
            (None, _) => None,
            (Some(_), Decision::Switch(t)) if runnable.contains(&t) => Some(t),
            (Some(&fallback), _) => Some(fallback),
        };
        self.cv.notify_all();
    }

    pub fn was_killed(&self, id: usize) -> bool {
        self.state.lock().unwrap().killed[id]
    }
}

impl Hooks for Scheduler {
    fn checkpoint(&self, point: &'static str) -> HookAction {
        let Some(id) = self.me() else { return HookAction::Continue };
        let mut st = self.state.lock().unwrap();
        if st.killed[id] {
            // a dead participant's body only unwinds from here on
            return HookAction::Kill;
        }
        st.trace.push(Event { thread: id, point });
        let runnable = Self::runnable(&st);
        match st.policy.decide(id, Some(point), &runnable) {
            Decision::Continue => HookAction::Continue,
            Decision::Kill => {
                st.killed[id] = true;
                HookAction::Kill
            }
            Decision::Switch(t) if t != id && runnable.contains(&t) => {
                st.running = Some(t);
                self.cv.notify_all();
                drop(self.wait_for_turn(st, id));
                HookAction::Continue
            }
            Decision::Switch(_) => HookAction::Continue,
        }
    }
}

/// One choice made during a run: `taken` out of `options` alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    pub taken: usize,
    pub options: usize,
}

/// Follows `prefix`, then always keeps the current participant running
/// (or the lowest runnable one once it finishes). Records every choice so
/// that the caller can enumerate all alternatives depth-first.
pub struct Replay {
    prefix: Vec<usize>,
    pub made: Arc<Mutex<Vec<Choice>>>,
    /// Checkpoints that are not choice points (e.g. restarts inside a
    /// retry loop), to keep the space finite.
    ignore: Vec<&'static str>,
}

impl Replay {
    pub fn new(prefix: Vec<usize>, ignore: Vec<&'static str>) -> Replay {
        Replay { prefix, made: Arc::new(Mutex::new(Vec::new())), ignore }
    }
}

impl Policy for Replay {
    fn decide(&mut self, current: usize, point: Option<&'static str>, runnable: &[usize]) -> Decision {
        if point.is_some_and(|p| self.ignore.contains(&p)) {
            return Decision::Continue;
        }
        // alternatives: the current participant first, then the others
        let mut options: Vec<usize> = Vec::with_capacity(runnable.len());
        if point.is_some() && runnable.contains(&current) {
            options.push(current);
        }
        options.extend(runnable.iter().copied().filter(|&t| t != current));
        if options.len() <= 1 {
            return options.first().map_or(Decision::Continue, |&t| Decision::Switch(t));
        }
        let mut made = self.made.lock().unwrap();
        let taken = self.prefix.get(made.len()).copied().unwrap_or(0).min(options.len() - 1);
        made.push(Choice { taken, options: options.len() });
        Decision::Switch(options[taken])
    }
}

/// The next prefix in depth-first order after a run that made `made`, or
/// `None` once every alternative has been tried.
pub fn next_prefix(made: &[Choice]) -> Option<Vec<usize>> {
    let i = made.iter().rposition(|c| c.taken + 1 < c.options)?;
    let mut p: Vec<usize> = made[..i].iter().map(|c| c.taken).collect();
    p.push(made[i].taken + 1);
    Some(p)
}

/// Runs `one_run` for every interleaving reachable by the choice points it
/// exposes, each time from scratch. `one_run` receives the prefix to follow
/// and returns the choices it made. Stops after `limit` runs.
pub fn explore(limit: usize, mut one_run: impl FnMut(Vec<usize>) -> Result<Vec<Choice>, String>) -> Result<usize, String> {
    let mut prefix = Vec::new();
    for runs in 1..=limit {
        let made = one_run(prefix.clone())?;
        if made.iter().zip(&prefix).any(|(c, p)| c.taken != *p) {
            return Err(format!("run {runs} diverged from its prefix {prefix:?}"));
        }
        match next_prefix(&made) {
            Some(p) => prefix = p,
            None => return Ok(runs),
        }
    }
    Err(format!("more than {limit} interleavings"))
}
