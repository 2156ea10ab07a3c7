//! Read-only view of a VM, the surface capture works from.

use serde::Serialize;

use crate::isa::{MethodDef, ObjRef, Pc, Value};

use super::{ExecStatus, HeapObject, ParkState, VmInstance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameView {
    pub method: String,
    pub pc: Pc,
    /// −1 for a frame that has not completed its entry checkpoint; uninstrumented frames too.
    pub apc: i64,
    pub locals: Vec<Value>,
    pub stack_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThreadView {
    pub tid: u32,
    pub park: ParkState,
    pub pending_reacquire: Option<u32>,
    pub frames: Vec<FrameView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MonitorView {
    pub obj: ObjRef,
    pub owner: Option<u32>,
    pub recursion: u32,
    pub entry_set: Vec<u32>,
    pub wait_set: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StateView {
    pub status: ExecStatus,
    pub clock: u64,
    pub threads: Vec<ThreadView>,
    pub monitors: Vec<MonitorView>,
    pub heap: Vec<HeapObject>,
    pub globals: Vec<(String, Value)>,
}

impl StateView {
    pub fn thread(&self, tid: u32) -> Option<&ThreadView> {
        self.threads.iter().find(|t| t.tid == tid)
    }

    /// Monitors that carry any state; lazily created monitors that went back to idle are
    /// indistinguishable from never-created ones.
    pub fn active_monitors(&self) -> Vec<&MonitorView> {
        self.monitors
            .iter()
            .filter(|m| m.owner.is_some() || !m.entry_set.is_empty() || !m.wait_set.is_empty())
            .collect()
    }
}

/// The APC of a frame stopped at an invoke-class instruction is that instruction's invocation
/// number, whatever the slot last recorded: the slot is only written after an invoke
/// completes, so it lags behind after a loop back edge or a branch that skips an invoke. The
/// entry checkpoint reads as −1, its value on a fresh call. Elsewhere the slot is reported as is.
pub(crate) fn frame_apc(def: &MethodDef, pc: Pc, locals: &[Value]) -> i64 {
    match def.invoke_table.binary_search(&pc) {
        Ok(0) => -1,
        Ok(i) => i as i64,
        Err(_) => locals[def.apc_slot() as usize].as_int().unwrap_or(-1),
    }
}

impl VmInstance {
    pub fn inspect(&self) -> StateView {
        let threads = self
            .threads
            .iter()
            .map(|t| ThreadView {
                tid: t.tid,
                park: t.park.clone(),
                pending_reacquire: t.pending_reacquire,
                frames: t
                    .frames
                    .iter()
                    .map(|f| {
                        let def = self.method_def(f.method);
                        let mut locals = f.locals.clone();
                        let apc = if def.instrumented {
                            let apc = frame_apc(def, f.pc, &f.locals);
                            locals[def.apc_slot() as usize] = Value::Int(apc);
                            apc
                        } else {
                            -1
                        };
                        FrameView {
                            method: def.name.clone(),
                            pc: f.pc,
                            apc,
                            locals,
                            stack_depth: f.stack.len(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let monitors = self
            .monitors
            .iter()
            .map(|(obj, m)| MonitorView {
                obj: *obj,
                owner: m.owner,
                recursion: m.recursion,
                entry_set: m.entry_set.iter().copied().collect(),
                wait_set: m.wait_set.iter().copied().collect(),
            })
            .collect();
        StateView {
            status: self.status,
            clock: self.clock,
            threads,
            monitors,
            heap: self.heap.clone(),
            globals: self.globals.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }
}
