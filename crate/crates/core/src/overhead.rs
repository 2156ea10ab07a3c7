//! Dynamic cost of instrumentation, measured by running both forms of a program.

use serde::Serialize;
use thiserror::Error;

use crate::instrument::{analyze_loops, instrument_program, overhead_pct, InstrumentError};
use crate::isa::Program;
use crate::vm::{LoadError, RunEnd, VmError, VmInstance};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum OverheadError {
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("program did not run to completion")]
    Deadlock,
}

/// Executed-instruction counts of one program in both forms, plus the terms that predict
/// their difference. All terms come from the uninstrumented run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DynamicCounts {
    pub original: u64,
    pub instrumented: u64,
    /// Frames created: entry, INVOKE and SPAWN.
    pub calls: u64,
    /// Completed INVOKE, SPAWN, SLEEP and monitor operations.
    pub invoke_class: u64,
    /// Executions of innermost-loop header instructions.
    pub innermost_iterations: u64,
}

impl DynamicCounts {
    pub fn predicted_delta(&self) -> u64 {
        4 * self.calls + self.invoke_class + 2 * self.innermost_iterations
    }

    pub fn identity_holds(&self) -> bool {
        self.instrumented.checked_sub(self.original) == Some(self.predicted_delta())
    }

    pub fn overhead_pct(&self) -> f64 {
        overhead_pct(self.original as f64, self.instrumented as f64)
    }
}

fn run_out(vm: &mut VmInstance) -> Result<(), OverheadError> {
    match vm.run(crate::sweep::DEFAULT_STEP_LIMIT)? {
        RunEnd::Done => Ok(()),
        RunEnd::Parked => Err(OverheadError::Deadlock),
    }
}

/// Runs `original` uninstrumented with a profile, then instrumented, at the same quantum.
pub fn measure(original: &Program, quantum: u32) -> Result<DynamicCounts, OverheadError> {
    let (instrumented, _) = instrument_program(original)?;

    let mut base = VmInstance::load_baseline(original)?.with_quantum(quantum);
    base.enable_profile();
    run_out(&mut base)?;
    let profile = base.profile().expect("profile enabled");
    let mut innermost_iterations = 0;
    for (name, m) in &original.methods {
        let counts = &profile[name];
        for h in analyze_loops(m)?.innermost_headers() {
            innermost_iterations += counts[h as usize];
        }
    }

    let mut inst = VmInstance::load(&instrumented)?.with_quantum(quantum);
    run_out(&mut inst)?;

    let stats = base.stats();
    Ok(DynamicCounts {
        original: stats.instructions,
        instrumented: inst.stats().instructions,
        calls: stats.invocations,
        invoke_class: stats.invoke_class_completed,
        innermost_iterations,
    })
}
