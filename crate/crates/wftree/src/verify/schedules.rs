//! Forced interleavings of the wait-free install path, driven through pause points.
//!
//! Each schedule parks one thread at a named point, runs the competing steps on another, then
//! releases the first and checks that the announced version went into the list exactly once.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering::SeqCst};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::ctx::Ctx;
use crate::hooks::{self, HookAction};
use crate::reclaim::pin;
use crate::tree::TreeConfig;
use crate::types::*;
use crate::vlist::{Announcement, VersionNode, VersionedList, WfOutcome};
use crate::waitfree::{WaitFreeConfig, WfTree};

thread_local! {
    static PAUSER: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` as the thread that pause points stop.
fn as_pauser<R>(f: impl FnOnce() -> R) -> R {
    PAUSER.with(|p| p.set(true));
    let r = f();
    PAUSER.with(|p| p.set(false));
    r
}

fn is_pauser() -> bool {
    PAUSER.with(|p| p.get())
}

/// Stops the pausing thread once at one point until released.
#[derive(Default)]
struct Gate {
    armed: AtomicBool,
    arrived: AtomicBool,
    released: AtomicBool,
}

impl Gate {
    fn install(cx: &Ctx, point: &'static str) -> Arc<Self> {
        let gate = Arc::new(Gate::default());
        gate.armed.store(true, SeqCst);
        let g = gate.clone();
        cx.hooks.set(point, move |_| {
            if is_pauser() && g.armed.swap(false, SeqCst) {
                g.arrived.store(true, SeqCst);
                while !g.released.load(SeqCst) {
                    std::thread::yield_now();
                }
            }
            HookAction::Continue
        });
        gate
    }

    fn wait_arrived(&self, what: &str) -> Result<(), String> {
        let deadline = Instant::now() + Duration::from_secs(10);
        while !self.arrived.load(SeqCst) {
            if Instant::now() > deadline {
                self.release();
                return Err(format!("{what}: paused thread never reached its pause point"));
            }
            std::thread::yield_now();
        }
        Ok(())
    }

    fn release(&self) {
        self.released.store(true, SeqCst);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Two helpers read the same head; one installs, the other must then fail its swap.
    StaleHead,
    /// One helper links a new key node carrying the shared version while another finds the key
    /// and tries to update it with that same version.
    SharedVersion,
    /// A helper stalls before pointing the shared version at the head it read; meanwhile the
    /// head moves on and another helper installs. The stalled write must not land.
    NextvOverwrite,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::StaleHead, Schedule::SharedVersion, Schedule::NextvOverwrite];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::StaleHead => "stale-vhead",
            Schedule::SharedVersion => "insert-vs-update-shared-vnode",
            Schedule::NextvOverwrite => "nextv-overwrite",
        }
    }

    pub fn run_once(self, iteration: usize) -> Result<(), String> {
        let cx = Ctx::new();
        let list = VersionedList::new(cx.stats.clone());
        let vp = VersionNode::alloc_shared(1000 + iteration as Value, &cx.stats);
        let finished = AtomicBool::new(false);
        let r = self.drive(&cx, &list, vp, &finished, iteration);
        unsafe { VersionNode::release(vp, &cx.stats) };
        r
    }

    fn drive(
        self,
        cx: &Ctx,
        list: &VersionedList,
        vp: *mut VersionNode,
        finished: &AtomicBool,
        iteration: usize,
    ) -> Result<(), String> {
        const KEY: Key = 5;
        let g = pin();
        // Neighbours so the key sits mid-list.
        for k in [3, 8] {
            list.insert(k, k, cx, &g).map_err(|_| "list frozen".to_string())?;
        }
        let ann = Announcement {
            vnode: unsafe { &*vp },
            finished,
        };
        let (point, present) = match self {
            Schedule::StaleHead => (hooks::WFINSERT_BEFORE_WFVCAS, true),
            Schedule::SharedVersion if iteration.is_multiple_of(2) => (hooks::WFINSERT_AFTER_LINK, false),
            Schedule::SharedVersion => (hooks::WFINSERT_BEFORE_LINK, false),
            Schedule::NextvOverwrite => (hooks::WFVCAS_BEFORE_NEXTV_CAS, true),
        };
        if present {
            list.insert(KEY, 1, cx, &g).map_err(|_| "list frozen".to_string())?;
        }
        let gate = Gate::install(cx, point);
        let (first, second) = std::thread::scope(|s| {
            let stalled = s.spawn(|| as_pauser(|| list.wf_insert(KEY, &ann, cx, &pin())));
            if let Err(e) = gate.wait_arrived(self.name()) {
                return (stalled.join().ok(), Err(e));
            }
            let g = pin();
            if self == Schedule::NextvOverwrite {
                // The head moves past what the stalled helper read.
                let _ = list.insert(KEY, 2, cx, &g);
            }
            let second = list.wf_insert(KEY, &ann, cx, &g);
            gate.release();
            (stalled.join().ok(), Ok(second))
        });
        let first = first.ok_or("stalled helper panicked")?;
        let second = second?;
        let installs = [first, second].iter().filter(|&&o| o == WfOutcome::Installed).count();
        if installs != 1 {
            return Err(format!("{}: {installs} installs ({first:?}, {second:?})", self.name()));
        }
        if list.occurrences(vp, &g) != 1 {
            return Err(format!(
                "{}: version appears {} times",
                self.name(),
                list.occurrences(vp, &g)
            ));
        }
        list.check(&g).map_err(|e| format!("{}: {e}", self.name()))?;
        let n = list.find_unchecked(KEY, &g);
        if n.key() != KEY || list.keys(&g).iter().filter(|&&k| k == KEY).count() != 1 {
            return Err(format!("{}: key node missing or duplicated", self.name()));
        }
        let mut chain = Vec::new();
        let mut p = n.head(&g).as_raw();
        while let Some(v) = unsafe { p.as_ref() } {
            chain.push(v.value());
            p = v.older();
        }
        let new = ann.vnode.value();
        let want = match self {
            Schedule::StaleHead => vec![new, 1],
            Schedule::SharedVersion => vec![new],
            Schedule::NextvOverwrite => vec![new, 2, 1],
        };
        if chain != want {
            return Err(format!("{}: chain {chain:?}, expected {want:?}", self.name()));
        }
        if ann.vnode.ts() == TS_UNSET || !finished.load(SeqCst) {
            return Err(format!(
                "{}: installed version left unstamped or unfinished",
                self.name()
            ));
        }
        Ok(())
    }
}

/// Outcome of one suspended-announcer trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HelpTrial {
    /// Rounds (one completed operation per helper) until the announcement was finished.
    pub rounds: usize,
    /// Most rounds the helping period allows: `s` times the number of threads.
    pub bound: usize,
}

/// Suspends an announcer right after it publishes its operation and lets `helpers` threads run
/// searches in lockstep until the operation is finished; the announcer is then resumed.
pub fn suspended_announcer(trial: usize, helpers: usize, s: usize) -> Result<HelpTrial, String> {
    let threads = helpers + 1;
    let t = WfTree::with_config(
        TreeConfig::with_sizes(4, 2, 4, 2),
        WaitFreeConfig {
            fast_path_retries: 1,
            helping_period: s,
            max_threads: threads,
        },
    )
    .map_err(|e| e.to_string())?;
    {
        let mut h = t.register().map_err(|e| e.to_string())?;
        for k in 1..=20 {
            h.insert(k, k).map_err(|e| e.to_string())?;
        }
    }
    let hooks = &t.tree().ctx().hooks;
    hooks.set(hooks::FAST_ATTEMPT, |_| {
        if is_pauser() {
            HookAction::Fail
        } else {
            HookAction::Continue
        }
    });
    let gate = Gate::install(t.tree().ctx(), hooks::AFTER_ANNOUNCE);
    let delete = trial % 2 == 1;
    let key = if delete {
        trial as Key % 20 + 1
    } else {
        100 + trial as Key
    };
    let mut hs: Vec<_> = (0..helpers)
        .map(|_| t.register())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let (res, rounds) = std::thread::scope(|sc| {
        let announcer = sc.spawn(|| {
            let mut h = t.register().map_err(|e| e.to_string())?;
            let r = as_pauser(|| if delete { h.delete(key) } else { h.insert(key, 7) });
            r.map(|r| (h.tid(), r)).map_err(|e| e.to_string())
        });
        if let Err(e) = gate.wait_arrived("announcer") {
            return (announcer.join().ok(), Err(e));
        }
        let g = pin();
        let Some(tid) = (0..threads).find(|&i| !t.state(i, &g).is_finished()) else {
            gate.release();
            return (announcer.join().ok(), Err("no pending announcement".to_string()));
        };
        drop(g);
        let mut rounds = 0;
        let r = loop {
            if t.state(tid, &pin()).is_finished() {
                break Ok(rounds);
            }
            if rounds > s * threads {
                break Err(format!("still pending after {rounds} rounds"));
            }
            for h in hs.iter_mut() {
                if let Err(e) = h.search(1) {
                    gate.release();
                    return (announcer.join().ok(), Err(e.to_string()));
                }
            }
            rounds += 1;
        };
        gate.release();
        (announcer.join().ok(), r)
    });
    hs.clear();
    let rounds = rounds?;
    let (_, r) = res.ok_or("announcer panicked")??;
    let want = if delete {
        OpResult::updated(key)
    } else {
        OpResult::inserted()
    };
    if r != want {
        return Err(format!("announcer returned {r:?}, expected {want:?}"));
    }
    let now = t.tree().search(key).map_err(|e| e.to_string())?;
    if now != (!delete).then_some(7) {
        return Err(format!("key {key} reads {now:?} after the helped operation"));
    }
    Ok(HelpTrial {
        rounds,
        bound: s * threads,
    })
}
