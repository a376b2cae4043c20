//! Named pause points for forcing interleavings in tests.
//!
//! Points are named after the algorithm step they precede, e.g. `"wfVCAS:before-nextv-cas"`.
//! With the `test-hooks` feature a test registers closures per point; the closure runs on the
//! thread that reaches the point and may block it or ask the caller to treat the step as failed.
//! Without the feature every point compiles to nothing.

/// What the instrumented code should do after a hook returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    /// Only honoured at points that document a failure path (e.g. `execute:fast-attempt`).
    Fail,
}

pub const FAST_ATTEMPT: &str = "execute:fast-attempt";
pub const AFTER_ANNOUNCE: &str = "execute:after-announce";
pub const WFVCAS_BEFORE_NEXTV_CAS: &str = "wfVCAS:before-nextv-cas";
pub const WFVCAS_BEFORE_VHEAD_CAS: &str = "wfVCAS:before-vhead-cas";
pub const WFINSERT_BEFORE_WFVCAS: &str = "wfLLInsert:before-wfvcas";
pub const WFINSERT_BEFORE_LINK: &str = "wfLLInsert:before-link";
pub const WFINSERT_AFTER_LINK: &str = "wfLLInsert:after-link";
pub const WFDELETE_BEFORE_RESOLVE: &str = "wfDeleteLeaf:before-resolve";
pub const SPLIT_BEFORE_PARENT_CAS: &str = "splitLeaf:before-parent-cas";
pub const RQ_AFTER_TIMESTAMP: &str = "rangeQuery:after-timestamp";

pub const ALL: &[&str] = &[
    FAST_ATTEMPT,
    AFTER_ANNOUNCE,
    WFVCAS_BEFORE_NEXTV_CAS,
    WFVCAS_BEFORE_VHEAD_CAS,
    WFINSERT_BEFORE_WFVCAS,
    WFINSERT_BEFORE_LINK,
    WFINSERT_AFTER_LINK,
    WFDELETE_BEFORE_RESOLVE,
    SPLIT_BEFORE_PARENT_CAS,
    RQ_AFTER_TIMESTAMP,
];

#[cfg(feature = "test-hooks")]
mod imp {
    use super::HookAction;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::{Arc, RwLock};

    type HookFn = dyn Fn(&'static str) -> HookAction + Send + Sync;

    #[derive(Default)]
    pub struct Hooks {
        any: AtomicBool,
        table: RwLock<Vec<(&'static str, Arc<HookFn>)>>,
    }

    impl Hooks {
        pub fn set<F>(&self, point: &'static str, f: F)
        where
            F: Fn(&'static str) -> HookAction + Send + Sync + 'static,
        {
            let mut t = self.table.write().unwrap();
            t.retain(|(p, _)| *p != point);
            t.push((point, Arc::new(f)));
            self.any.store(true, Ordering::Release);
        }

        pub fn clear(&self) {
            self.table.write().unwrap().clear();
            self.any.store(false, Ordering::Release);
        }

        #[inline]
        pub fn fire(&self, point: &'static str) -> HookAction {
            if !self.any.load(Ordering::Acquire) {
                return HookAction::Continue;
            }
            let f = {
                let t = self.table.read().unwrap();
                t.iter().find(|(p, _)| *p == point).map(|(_, f)| f.clone())
            };
            match f {
                Some(f) => f(point),
                None => HookAction::Continue,
            }
        }
    }
}

#[cfg(not(feature = "test-hooks"))]
mod imp {
    use super::HookAction;

    #[derive(Default)]
    pub struct Hooks;

    impl Hooks {
        #[inline(always)]
        pub fn fire(&self, _point: &'static str) -> HookAction {
            HookAction::Continue
        }
    }
}

pub use imp::Hooks;
