use thiserror::Error;

use crate::vm::{ExecStatus, ParkState, VmInstance};

use super::{ExecutionImage, FrameImage, MonitorImage, ParkKind, ThreadImage};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error("entity is not suspended")]
    NotSuspended,
    #[error("thread {0} is still runnable")]
    NotAllParked(u32),
    #[error("thread {tid} has {depth} values on the operand stack of `{method}`")]
    NonEmptyStack { tid: u32, method: String, depth: usize },
}

/// Records a suspended, fully parked VM. The VM is not modified.
pub fn capture(vm: &VmInstance, entity_id: &str) -> Result<ExecutionImage, CaptureError> {
    if vm.status() != ExecStatus::Suspended {
        return Err(CaptureError::NotSuspended);
    }
    let view = vm.inspect();
    let mut threads = Vec::new();
    for t in &view.threads {
        let park = match t.park {
            ParkState::Done => continue,
            ParkState::Runnable => return Err(CaptureError::NotAllParked(t.tid)),
            ParkState::ExecBlocked => ParkKind::ExecBlocked,
            ParkState::MonitorEntry { obj } => ParkKind::MonitorEntry {
                obj,
                reacquire: t.pending_reacquire,
            },
            ParkState::MonitorWait { obj } => ParkKind::MonitorWait { obj },
            ParkState::Sleeping { deadline } => ParkKind::Sleeping {
                remaining_ms: deadline.saturating_sub(view.clock),
            },
        };
        if let Some(f) = t.frames.iter().find(|f| f.stack_depth != 0) {
            return Err(CaptureError::NonEmptyStack {
                tid: t.tid,
                method: f.method.clone(),
                depth: f.stack_depth,
            });
        }
        threads.push(ThreadImage {
            tid: t.tid,
            park,
            frames: t
                .frames
                .iter()
                .map(|f| FrameImage {
                    method: f.method.clone(),
                    apc: f.apc,
                    locals: f.locals.clone(),
                })
                .collect(),
        });
    }
    Ok(ExecutionImage {
        entity_id: entity_id.to_string(),
        program_hash: vm.program().content_hash,
        clock: view.clock,
        next_tid: vm.next_tid(),
        globals: view.globals,
        heap: view.heap,
        monitors: view
            .monitors
            .into_iter()
            .map(|m| MonitorImage {
                obj: m.obj,
                owner: m.owner,
                recursion: m.recursion,
                entry_order: m.entry_set,
                wait_order: m.wait_set,
            })
            .collect(),
        threads,
    })
}
