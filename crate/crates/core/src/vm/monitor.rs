use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A lock whose whole state is plain data, so it survives capture and restore.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MobileMonitor {
    pub owner: Option<u32>,
    pub recursion: u32,
    /// Threads blocked trying to enter, FIFO.
    pub entry_set: VecDeque<u32>,
    /// Waiting threads with the recursion count they released, FIFO.
    pub wait_set: VecDeque<(u32, u32)>,
}

impl MobileMonitor {
    /// Checks the structural invariants; returns the first violated one.
    pub fn check(&self) -> Result<(), &'static str> {
        if self.owner.is_none() != (self.recursion == 0) {
            return Err("owner is none iff recursion is 0");
        }
        if let Some(o) = self.owner {
            if self.entry_set.contains(&o) || self.wait_set.iter().any(|(t, _)| *t == o) {
                return Err("owner is queued on its own monitor");
            }
        }
        if self
            .entry_set
            .iter()
            .any(|t| self.wait_set.iter().any(|(w, _)| w == t))
        {
            return Err("thread in both entry and wait set");
        }
        let mut seen = std::collections::HashSet::new();
        if !self
            .entry_set
            .iter()
            .chain(self.wait_set.iter().map(|(t, _)| t))
            .all(|t| seen.insert(*t))
        {
            return Err("thread queued twice");
        }
        if self.wait_set.iter().any(|(_, r)| *r == 0) {
            return Err("waiter saved a zero recursion count");
        }
        Ok(())
    }
}
