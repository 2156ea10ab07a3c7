//! Portable execution images: capture a suspended entity, encode it, restore it elsewhere.

mod capture;
mod codec;
mod restore;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::isa::{ObjRef, Value};
use crate::vm::HeapObject;

pub use capture::{capture, CaptureError};
pub use codec::{decode_image, encode_image, ImageDecodeError, IMAGE_MAGIC, IMAGE_VERSION};
pub use restore::{restore, RestoreError};

/// How a captured thread was parked. Sleepers carry the time they still owe, not a deadline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParkKind {
    ExecBlocked,
    /// `reacquire` is set for a notified waiter queued to take the monitor back with that
    /// recursion count.
    MonitorEntry { obj: ObjRef, reacquire: Option<u32> },
    MonitorWait { obj: ObjRef },
    Sleeping { remaining_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameImage {
    pub method: String,
    pub apc: i64,
    pub locals: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThreadImage {
    pub tid: u32,
    pub park: ParkKind,
    /// Bottom to top.
    pub frames: Vec<FrameImage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MonitorImage {
    pub obj: ObjRef,
    pub owner: Option<u32>,
    pub recursion: u32,
    pub entry_order: Vec<u32>,
    pub wait_order: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExecutionImage {
    pub entity_id: String,
    #[serde(serialize_with = "hex32")]
    pub program_hash: [u8; 32],
    pub clock: u64,
    /// tid the next SPAWN receives; tids below it that have no thread record finished.
    pub next_tid: u32,
    pub globals: Vec<(String, Value)>,
    pub heap: Vec<HeapObject>,
    pub monitors: Vec<MonitorImage>,
    pub threads: Vec<ThreadImage>,
}

fn hex32<S: serde::Serializer>(h: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&h.iter().map(|b| format!("{b:02x}")).collect::<String>())
}

/// The image invariant a malformed image breaks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ImageRule {
    ApcOutOfRange,
    NoFrames,
    UnknownMethod,
    LocalsLength,
    CallerNotAtInvoke,
    CalleeMismatch,
    ParkKindMismatch,
    DuplicateTid,
    TidOutOfRange,
    UnknownTid,
    MonitorInvariant,
    QueueMismatch,
    EntryWithoutOwner,
    DanglingRef,
    HeapOrder,
    UnknownClass,
    FieldCount,
    GlobalsMismatch,
    DuplicateMonitor,
}

impl fmt::Display for ImageRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Malformed {
    pub rule: ImageRule,
    pub detail: String,
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.detail)
    }
}

pub(crate) fn malformed(rule: ImageRule, detail: impl Into<String>) -> Malformed {
    Malformed {
        rule,
        detail: detail.into(),
    }
}

impl ExecutionImage {
    pub fn thread(&self, tid: u32) -> Option<&ThreadImage> {
        self.threads.iter().find(|t| t.tid == tid)
    }

    pub fn monitor(&self, obj: ObjRef) -> Option<&MonitorImage> {
        self.monitors.iter().find(|m| m.obj == obj)
    }

    /// Checks the invariants that do not depend on the program: tids, monitor records and
    /// their agreement with thread park kinds, heap ordering, and reference bounds.
    pub fn check_structure(&self) -> Result<(), Malformed> {
        use ImageRule::*;
        let mut tids = BTreeSet::new();
        for t in &self.threads {
            if !tids.insert(t.tid) {
                return Err(malformed(DuplicateTid, format!("thread {} twice", t.tid)));
            }
            if t.tid >= self.next_tid {
                return Err(malformed(
                    TidOutOfRange,
                    format!("thread {} not below next tid {}", t.tid, self.next_tid),
                ));
            }
            if t.frames.is_empty() {
                return Err(malformed(NoFrames, format!("thread {} has no frames", t.tid)));
            }
        }

        for (i, o) in self.heap.iter().enumerate() {
            if o.id.0 as usize != i {
                return Err(malformed(HeapOrder, format!("object {} at position {i}", o.id)));
            }
        }
        let bound = self.heap.len();
        let check_ref = |v: &Value, at: &dyn Fn() -> String| match v {
            Value::Ref(r) if r.0 as usize >= bound => {
                Err(malformed(DanglingRef, format!("{r} in {}", at())))
            }
            _ => Ok(()),
        };
        for (name, v) in &self.globals {
            check_ref(v, &|| format!("global {name}"))?;
        }
        for o in &self.heap {
            for v in &o.fields {
                check_ref(v, &|| format!("object {}", o.id))?;
            }
        }
        for t in &self.threads {
            for f in &t.frames {
                for v in &f.locals {
                    check_ref(v, &|| format!("thread {} frame {}", t.tid, f.method))?;
                }
            }
        }

        let mut seen = BTreeSet::new();
        let mut queued: BTreeMap<u32, (ObjRef, bool, Option<u32>)> = BTreeMap::new();
        for m in &self.monitors {
            if !seen.insert(m.obj) {
                return Err(malformed(DuplicateMonitor, format!("monitor {} twice", m.obj)));
            }
            if m.obj.0 as usize >= bound {
                return Err(malformed(DanglingRef, format!("monitor {}", m.obj)));
            }
            let mon = crate::vm::MobileMonitor {
                owner: m.owner,
                recursion: m.recursion,
                entry_set: m.entry_order.iter().copied().collect(),
                wait_set: m.wait_order.iter().copied().collect(),
            };
            mon.check()
                .map_err(|e| malformed(MonitorInvariant, format!("monitor {}: {e}", m.obj)))?;
            for t in m.owner.iter().chain(&m.entry_order).chain(m.wait_order.iter().map(|(t, _)| t)) {
                if !tids.contains(t) {
                    return Err(malformed(
                        UnknownTid,
                        format!("monitor {} names missing thread {t}", m.obj),
                    ));
                }
            }
            for &t in &m.entry_order {
                if queued.insert(t, (m.obj, true, None)).is_some() {
                    return Err(malformed(QueueMismatch, format!("thread {t} queued twice")));
                }
            }
            for &(t, saved) in &m.wait_order {
                if queued.insert(t, (m.obj, false, Some(saved))).is_some() {
                    return Err(malformed(QueueMismatch, format!("thread {t} queued twice")));
                }
            }
            if !m.entry_order.is_empty() && m.owner.is_none() {
                return Err(malformed(
                    EntryWithoutOwner,
                    format!("monitor {} has blocked entrants but no owner", m.obj),
                ));
            }
        }

        for t in &self.threads {
            let expect = match t.park {
                ParkKind::MonitorEntry { obj, .. } => Some((obj, true)),
                ParkKind::MonitorWait { obj } => Some((obj, false)),
                _ => None,
            };
            let actual = queued.get(&t.tid).map(|(o, entry, _)| (*o, *entry));
            if expect != actual {
                return Err(malformed(
                    QueueMismatch,
                    format!("thread {} park kind disagrees with monitor queues", t.tid),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
