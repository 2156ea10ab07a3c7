use std::collections::BTreeSet;

use thiserror::Error;

use crate::isa::{Instr, Pc, Program, Value};
use crate::vm::{EventKind, ExecStatus, Frame, MobileMonitor, ParkState, ThreadCtx, VmInstance};

use super::{malformed, ExecutionImage, ImageRule, Malformed, ParkKind, ThreadImage};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RestoreError {
    #[error("program is not instrumented")]
    NotInstrumented,
    #[error("image was captured from a different program")]
    HashMismatch,
    #[error("malformed image: {0}")]
    MalformedImage(Malformed),
}

impl From<Malformed> for RestoreError {
    fn from(m: Malformed) -> Self {
        RestoreError::MalformedImage(m)
    }
}

impl RestoreError {
    pub fn rule(&self) -> Option<ImageRule> {
        match self {
            RestoreError::MalformedImage(m) => Some(m.rule),
            _ => None,
        }
    }
}

/// Where DISPATCH sends a frame with this APC.
fn dispatch_target(table: &[Pc], apc: i64) -> Option<Pc> {
    if apc < 0 {
        // falls through to the entry checkpoint
        table.first().copied()
    } else {
        table.get(apc as usize).copied()
    }
}

/// Checks the image against the program it is about to run.
fn check_against(p: &Program, img: &ExecutionImage) -> Result<(), Malformed> {
    use ImageRule::*;
    let names: BTreeSet<&str> = img.globals.iter().map(|(k, _)| k.as_str()).collect();
    let declared: BTreeSet<&str> = p.globals.iter().map(String::as_str).collect();
    if names != declared || names.len() != img.globals.len() {
        return Err(malformed(GlobalsMismatch, "global names differ from the program's"));
    }
    for o in &img.heap {
        let fields = p
            .classes
            .get(&o.class)
            .ok_or_else(|| malformed(UnknownClass, format!("object {} of class {}", o.id, o.class)))?;
        if fields.len() != o.fields.len() {
            return Err(malformed(FieldCount, format!("object {}", o.id)));
        }
    }

    for t in &img.threads {
        let n = t.frames.len();
        for (i, f) in t.frames.iter().enumerate() {
            let at = || format!("thread {} frame {i} ({})", t.tid, f.method);
            let m = p
                .method(&f.method)
                .ok_or_else(|| malformed(UnknownMethod, at()))?;
            if f.locals.len() != m.local_count as usize {
                return Err(malformed(LocalsLength, at()));
            }
            if f.apc < -1 || f.apc >= m.invoke_table.len() as i64 {
                return Err(malformed(
                    ApcOutOfRange,
                    format!("{}: apc {} with {} dispatch entries", at(), f.apc, m.invoke_table.len()),
                ));
            }
            let pc = dispatch_target(&m.invoke_table, f.apc).expect("apc checked");
            let instr = &m.code[pc as usize];
            let local_is = |l: u16, obj| f.locals.get(l as usize) == Some(&Value::Ref(obj));
            if i + 1 < n {
                let Instr::Invoke { method, .. } = instr else {
                    return Err(malformed(CallerNotAtInvoke, at()));
                };
                if *method != t.frames[i + 1].method {
                    return Err(malformed(CalleeMismatch, at()));
                }
                continue;
            }
            let fits = match (&t.park, instr) {
                (ParkKind::ExecBlocked, Instr::Checkpoint) => true,
                (ParkKind::MonitorEntry { obj, reacquire: None }, Instr::MInvokeEnter(l)) => {
                    local_is(*l, *obj)
                }
                (ParkKind::MonitorEntry { obj, reacquire: Some(_) }, Instr::MInvokeWait(l))
                | (ParkKind::MonitorWait { obj }, Instr::MInvokeWait(l)) => local_is(*l, *obj),
                (ParkKind::Sleeping { .. }, Instr::Sleep(_)) => true,
                _ => false,
            };
            if !fits {
                return Err(malformed(
                    ParkKindMismatch,
                    format!("{}: parked as {:?} at {}", at(), t.park, instr.mnemonic()),
                ));
            }
        }
        if let ParkKind::MonitorEntry { obj, .. } = t.park {
            let owner = img.monitor(obj).and_then(|m| m.owner);
            if owner.is_none() || owner == Some(t.tid) {
                return Err(malformed(
                    EntryWithoutOwner,
                    format!("thread {} blocked on {obj} which no other thread owns", t.tid),
                ));
            }
        }
    }
    Ok(())
}

/// Relaunch order: waiters (by monitor, in wait order), then checkpoint-blocked threads (by
/// tid), then monitor entrants (by monitor, in entry order), then sleepers (by tid).
fn relaunch_order(img: &ExecutionImage) -> Vec<&ThreadImage> {
    let by_tid = |tid: u32| img.thread(tid).expect("structure checked");
    let mut order = Vec::with_capacity(img.threads.len());
    for m in &img.monitors {
        order.extend(m.wait_order.iter().map(|(t, _)| by_tid(*t)));
    }
    let mut sorted: Vec<&ThreadImage> = img.threads.iter().collect();
    sorted.sort_by_key(|t| t.tid);
    order.extend(sorted.iter().filter(|t| t.park == ParkKind::ExecBlocked));
    for m in &img.monitors {
        order.extend(m.entry_order.iter().map(|t| by_tid(*t)));
    }
    order.extend(
        sorted
            .iter()
            .filter(|t| matches!(t.park, ParkKind::Sleeping { .. })),
    );
    order
}

/// Rebuilds a parked, SUSPENDED VM from an image. The caller resumes it.
pub fn restore(p: &Program, img: &ExecutionImage) -> Result<VmInstance, RestoreError> {
    if !p.is_instrumented() {
        return Err(RestoreError::NotInstrumented);
    }
    if img.program_hash != p.content_hash || !p.hash_is_valid() {
        return Err(RestoreError::HashMismatch);
    }
    img.check_structure()?;
    check_against(p, img)?;

    let mut vm = VmInstance::empty(p.clone());
    vm.status = ExecStatus::Suspended;
    vm.clock = img.clock;
    vm.globals = img.globals.iter().cloned().collect();
    vm.heap = img.heap.clone();
    vm.threads = (0..img.next_tid)
        .map(|tid| ThreadCtx {
            tid,
            frames: Vec::new(),
            park: ParkState::Done,
            pending_reacquire: None,
        })
        .collect();
    for m in &img.monitors {
        vm.monitors.insert(
            m.obj,
            MobileMonitor {
                owner: m.owner,
                recursion: m.recursion,
                ..MobileMonitor::default()
            },
        );
        vm.log(EventKind::RestoreMonitor {
            obj: m.obj,
            owner: m.owner,
            recursion: m.recursion,
        });
    }

    for t in relaunch_order(img) {
        relaunch(&mut vm, img, t)?;
    }
    Ok(vm)
}

fn relaunch(vm: &mut VmInstance, img: &ExecutionImage, t: &ThreadImage) -> Result<(), Malformed> {
    let tid = t.tid as usize;
    let state = match t.park {
        ParkKind::ExecBlocked => ParkState::ExecBlocked,
        ParkKind::MonitorEntry { obj, .. } => ParkState::MonitorEntry { obj },
        ParkKind::MonitorWait { obj } => ParkState::MonitorWait { obj },
        ParkKind::Sleeping { remaining_ms } => ParkState::Sleeping {
            deadline: img.clock + remaining_ms,
        },
    };
    vm.log(EventKind::RestoreThread {
        tid: t.tid,
        state: state.clone(),
    });

    for f in &t.frames {
        let midx = vm.method_index(&f.method).expect("method checked");
        let def = vm.method_def(midx);
        let mut locals = f.locals.clone();
        locals[def.apc_slot() as usize] = Value::Int(f.apc);
        // APCINIT is skipped so the seeded APC survives; DISPATCH picks the pc.
        let pc = dispatch_target(&def.invoke_table, f.apc).expect("apc checked");
        vm.threads[tid].frames.push(Frame {
            method: midx,
            locals,
            stack: Vec::new(),
            pc,
        });
        vm.log(EventKind::RestoreFrame {
            tid: t.tid,
            method: f.method.clone(),
            apc: f.apc,
            pc,
        });
    }

    // Re-enter the recorded park state through the instruction the thread is parked on.
    match &t.park {
        ParkKind::ExecBlocked | ParkKind::MonitorEntry { .. } => {
            if let ParkKind::MonitorEntry { reacquire, .. } = t.park {
                vm.threads[tid].pending_reacquire = reacquire;
            }
            vm.threads[tid].park = ParkState::Runnable;
            vm.exec_one(tid)
                .map_err(|e| malformed(ImageRule::ParkKindMismatch, e.to_string()))?;
        }
        ParkKind::MonitorWait { obj } => {
            let saved = img
                .monitor(*obj)
                .and_then(|m| m.wait_order.iter().find(|(w, _)| *w == t.tid))
                .map(|(_, s)| *s)
                .expect("structure checked");
            vm.monitors
                .get_mut(obj)
                .expect("monitor restored")
                .wait_set
                .push_back((t.tid, saved));
            vm.park(tid, state.clone());
        }
        ParkKind::Sleeping { .. } => vm.park(tid, state.clone()),
    }
    if vm.threads[tid].park != state {
        return Err(malformed(
            ImageRule::ParkKindMismatch,
            format!("thread {} did not re-park as {state:?}", t.tid),
        ));
    }
    let pc = vm.threads[tid].frames.last().expect("frames pushed").pc;
    vm.log(EventKind::RestoreRepark {
        tid: t.tid,
        pc,
        state,
    });
    Ok(())
}
