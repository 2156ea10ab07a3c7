//! Migrate-at-every-checkpoint sweeps.
//!
//! Each case runs a program until its `k`-th checkpoint, suspends, captures, encodes, decodes,
//! restores into a fresh VM, resumes, and runs to completion. Cases are independent, so with the
//! `parallel` feature they are spread over a rayon pool; [`sweep_sequential`] is always there.

use thiserror::Error;

use crate::image::{
    capture, decode_image, encode_image, restore, CaptureError, ExecutionImage, ImageDecodeError,
    RestoreError,
};
use crate::isa::{Program, Value};
use crate::vm::{Event, LoadError, RunEnd, StateView, VmError, VmInstance};

pub const DEFAULT_STEP_LIMIT: u64 = 5_000_000;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum SweepError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("program deadlocked while running")]
    Deadlock,
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Decode(#[from] ImageDecodeError),
    #[error(transparent)]
    Restore(#[from] RestoreError),
}

/// An uninterrupted run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub output: Vec<Value>,
    pub heap_bytes: Vec<u8>,
    pub checkpoints: u64,
    pub events: Vec<Event>,
}

pub fn oracle_run(p: &Program, quantum: u32) -> Result<RunResult, SweepError> {
    let mut vm = VmInstance::load(p)?.with_quantum(quantum);
    finish(&mut vm)?;
    Ok(RunResult {
        output: vm.output().to_vec(),
        heap_bytes: vm.heap_bytes(),
        checkpoints: vm.stats().checkpoints,
        events: vm.events().to_vec(),
    })
}

fn finish(vm: &mut VmInstance) -> Result<(), SweepError> {
    match vm.run(DEFAULT_STEP_LIMIT)? {
        RunEnd::Done => Ok(()),
        RunEnd::Parked => Err(SweepError::Deadlock),
    }
}

/// One migration at the `k`-th checkpoint.
#[derive(Clone, Debug)]
pub struct MigrationCase {
    pub k: u64,
    /// Source state at capture time.
    pub before: StateView,
    /// Destination state right after restore, before resume.
    pub restored: StateView,
    pub image: ExecutionImage,
    pub image_bytes: Vec<u8>,
    /// Source events up to capture.
    pub source_events: Vec<Event>,
    /// Destination events from restore through completion.
    pub dest_events: Vec<Event>,
    pub source_output: Vec<Value>,
    pub dest_output: Vec<Value>,
    pub heap_bytes: Vec<u8>,
}

impl MigrationCase {
    pub fn output(&self) -> Vec<Value> {
        self.source_output
            .iter()
            .chain(&self.dest_output)
            .cloned()
            .collect()
    }

    /// Inspect-visible state is the same before capture and after restore, status aside.
    pub fn fidelity_holds(&self) -> bool {
        let (a, b) = (&self.before, &self.restored);
        a.clock == b.clock
            && a.threads == b.threads
            && a.heap == b.heap
            && a.globals == b.globals
            && a.monitors == b.monitors
    }
}

/// Returns `None` when the program finishes before reaching its `k`-th checkpoint.
pub fn migrate_at(p: &Program, quantum: u32, k: u64) -> Result<Option<MigrationCase>, SweepError> {
    let mut src = VmInstance::load(p)?.with_quantum(quantum);
    src.suspend_at_checkpoint(k);
    if src.run(DEFAULT_STEP_LIMIT)? == RunEnd::Done {
        return Ok(None);
    }
    let image = capture(&src, "sweep")?;
    let image_bytes = encode_image(&image);
    let decoded = decode_image(&image_bytes)?;

    let mut dst = restore(p, &decoded)?.with_quantum(quantum);
    let restored = dst.inspect();
    dst.exec_resume()?;
    finish(&mut dst)?;

    Ok(Some(MigrationCase {
        k,
        before: src.inspect(),
        restored,
        image,
        image_bytes,
        source_events: src.events().to_vec(),
        dest_events: dst.events().to_vec(),
        source_output: src.output().to_vec(),
        dest_output: dst.output().to_vec(),
        heap_bytes: dst.heap_bytes(),
    }))
}

pub fn sweep_sequential(
    p: &Program,
    quantum: u32,
    ks: impl IntoIterator<Item = u64>,
) -> Result<Vec<MigrationCase>, SweepError> {
    let mut out = Vec::new();
    for k in ks {
        if let Some(c) = migrate_at(p, quantum, k)? {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
pub fn sweep_parallel(
    p: &Program,
    quantum: u32,
    ks: impl IntoIterator<Item = u64>,
) -> Result<Vec<MigrationCase>, SweepError> {
    use rayon::prelude::*;
    let ks: Vec<u64> = ks.into_iter().collect();
    let cases = ks
        .par_iter()
        .map(|&k| migrate_at(p, quantum, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cases.into_iter().flatten().collect())
}

/// Parallel when the `parallel` feature is on, sequential otherwise. Results are in `k` order
/// either way.
pub fn sweep(
    p: &Program,
    quantum: u32,
    ks: impl IntoIterator<Item = u64>,
) -> Result<Vec<MigrationCase>, SweepError> {
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(p, quantum, ks)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(p, quantum, ks)
    }
}
