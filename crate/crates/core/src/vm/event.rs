//! Structured event log. One record per scheduler-visible transition; serialized as
//! line-delimited JSON by `run --trace`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::{ObjRef, Pc};

use super::ParkState;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub clock: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparkReason {
    /// Released from a monitor entry set; re-attempts the enter.
    EntryReleased,
    Woke,
    Resumed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Spawn {
        tid: u32,
        parent: Option<u32>,
        method: String,
    },
    Park {
        tid: u32,
        method: String,
        pc: Pc,
        state: ParkState,
    },
    Unpark {
        tid: u32,
        reason: UnparkReason,
    },
    Acquire {
        tid: u32,
        obj: ObjRef,
        recursion: u32,
    },
    Release {
        tid: u32,
        obj: ObjRef,
    },
    Notify {
        tid: u32,
        obj: ObjRef,
        moved: Vec<u32>,
    },
    ThreadDone {
        tid: u32,
    },
    Suspend,
    Resume {
        unparked: Vec<u32>,
    },
    ClockAdvance {
        to: u64,
    },
    Trap {
        tid: u32,
        pc: Pc,
        reason: String,
    },
    RestoreMonitor {
        obj: ObjRef,
        owner: Option<u32>,
        recursion: u32,
    },
    RestoreThread {
        tid: u32,
        state: ParkState,
    },
    RestoreFrame {
        tid: u32,
        method: String,
        apc: i64,
        pc: Pc,
    },
    RestoreRepark {
        tid: u32,
        pc: Pc,
        state: ParkState,
    },
}

impl EventKind {
    pub fn is_restore(&self) -> bool {
        matches!(
            self,
            EventKind::RestoreMonitor { .. }
                | EventKind::RestoreThread { .. }
                | EventKind::RestoreFrame { .. }
                | EventKind::RestoreRepark { .. }
        )
    }

    /// Thread a restore event acts on, if any.
    pub fn restore_tid(&self) -> Option<u32> {
        match self {
            EventKind::RestoreThread { tid, .. }
            | EventKind::RestoreFrame { tid, .. }
            | EventKind::RestoreRepark { tid, .. } => Some(*tid),
            _ => None,
        }
    }
}

pub fn to_json_lines(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

/// Checks restore ordering: every wait-set thread is re-parked before the first
/// checkpoint-blocked thread starts restoring, and those start before any other thread.
pub fn check_relaunch_order(events: &[Event]) -> Result<(), String> {
    let mut phase = 0;
    let mut current = 0;
    for (i, e) in events.iter().enumerate() {
        let EventKind::RestoreThread { tid, state } = &e.kind else {
            continue;
        };
        let rank = match state {
            ParkState::MonitorWait { .. } => 0,
            ParkState::ExecBlocked => 1,
            _ => 2,
        };
        if rank < phase {
            return Err(format!(
                "event {i}: thread {tid} ({state:?}) restored after a later relaunch class"
            ));
        }
        phase = rank;
        current = i;
    }
    // every thread's repark follows its own restore actions and precedes the next thread's
    let mut open: Option<u32> = None;
    for (i, e) in events.iter().enumerate().take(current + 1) {
        match &e.kind {
            EventKind::RestoreThread { tid, .. } => {
                if let Some(t) = open {
                    return Err(format!("event {i}: thread {tid} started before {t} re-parked"));
                }
                open = Some(*tid);
            }
            EventKind::RestoreRepark { tid, .. } if open == Some(*tid) => open = None,
            _ => {}
        }
    }
    Ok(())
}

/// Replays acquire/release/wait transitions and checks that no monitor is ever held by two
/// threads, and that an owner seeded by a restore keeps the lock until it releases it.
pub fn check_monitor_discipline(events: &[Event]) -> Result<(), String> {
    let mut owner: BTreeMap<ObjRef, (u32, u32)> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        match &e.kind {
            EventKind::RestoreMonitor {
                obj,
                owner: Some(o),
                recursion,
            } => {
                owner.insert(*obj, (*o, *recursion));
            }
            EventKind::Acquire {
                tid,
                obj,
                recursion,
            } => match owner.get(obj) {
                Some((o, _)) if o != tid => {
                    return Err(format!(
                        "event {i}: thread {tid} acquired {obj} while thread {o} holds it"
                    ))
                }
                _ => {
                    owner.insert(*obj, (*tid, *recursion));
                }
            },
            EventKind::Release { tid, obj } => match owner.remove(obj) {
                Some((o, _)) if o == *tid => {}
                Some((o, _)) => {
                    return Err(format!(
                        "event {i}: thread {tid} released {obj} owned by thread {o}"
                    ))
                }
                None => return Err(format!("event {i}: thread {tid} released free {obj}")),
            },
            _ => {}
        }
    }
    Ok(())
}
