use std::sync::Arc;

use crate::hooks::Hooks;
use crate::reclaim::MemStats;
use crate::tracker::Tracker;

/// State shared by every node of one structure: the clock, counters and test hooks.
pub struct Ctx {
    pub tracker: Tracker,
    pub stats: Arc<MemStats>,
    pub hooks: Hooks,
}

impl Ctx {
    pub fn new() -> Self {
        let stats = Arc::new(MemStats::default());
        Self {
            tracker: Tracker::new(stats.clone()),
            stats,
            hooks: Hooks::default(),
        }
    }
}

impl Default for Ctx {
    fn default() -> Self {
        Self::new()
    }
}
