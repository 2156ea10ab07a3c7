//! Load-time instrumentation.
//!
//! Each method gets, in order: monitor opcodes rewritten to mobile-monitor calls, a checkpoint
//! at method start and at every innermost-loop header, an `APCSET k+1` after invoke-class
//! instruction `#k`, and the `APCINIT; DISPATCH` prologue. The size cost per method is exactly
//! `4 + 2L + V`.

mod loops;
mod report;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::isa::{verify, Instr, MethodDef, Pc, Program, VerificationReport};

pub use loops::{analyze_loops, LoopAnalysis, NaturalLoop};
pub use report::{
    overhead_pct, render_space_table, InstrumentationReport, MethodRow, Totals,
    REFERENCE_SPACE_ROWS,
};

#[derive(Clone, Debug, PartialEq, Error)]
pub enum InstrumentError {
    #[error("method `{0}` is already instrumented")]
    AlreadyInstrumented(String),
    #[error("input program failed verification:\n{0}")]
    Verification(Box<VerificationReport>),
    #[error("irreducible control flow in `{method}`: edge {src}->{dst}")]
    Irreducible { method: String, src: Pc, dst: Pc },
    #[error("method `{0}` has no room for the APC slot")]
    TooManyLocals(String),
}

fn rewrite_monitor(i: &Instr) -> Instr {
    match i {
        Instr::MEnter(l) => Instr::MInvokeEnter(*l),
        Instr::MExit(l) => Instr::MInvokeExit(*l),
        Instr::MWait(l) => Instr::MInvokeWait(*l),
        Instr::MNotify(l) => Instr::MInvokeNotify(*l),
        Instr::MNotifyAll(l) => Instr::MInvokeNotifyAll(*l),
        other => other.clone(),
    }
}

/// Instruments one method using a precomputed loop analysis.
pub fn instrument_method(m: &MethodDef, loops: &LoopAnalysis) -> Result<MethodDef, InstrumentError> {
    if m.instrumented {
        return Err(InstrumentError::AlreadyInstrumented(m.name.clone()));
    }
    let local_count = m
        .local_count
        .checked_add(1)
        .ok_or_else(|| InstrumentError::TooManyLocals(m.name.clone()))?;
    let headers = loops.innermost_headers();

    let mut code = vec![
        Instr::ApcInit,
        Instr::Dispatch(Vec::new()),
        Instr::Checkpoint,
        Instr::ApcSet(1),
    ];
    let mut invokes_done: u32 = 1;
    let mut relocate: Vec<Pc> = Vec::with_capacity(m.code.len() + 1);

    for (pc, instr) in m.code.iter().enumerate() {
        relocate.push(code.len() as Pc);
        if headers.contains(&(pc as Pc)) {
            code.push(Instr::Checkpoint);
            invokes_done += 1;
            code.push(Instr::ApcSet(invokes_done));
        }
        let rewritten = rewrite_monitor(instr);
        let counts = rewritten.is_invoke_class();
        code.push(rewritten);
        if counts {
            invokes_done += 1;
            code.push(Instr::ApcSet(invokes_done));
        }
    }
    relocate.push(code.len() as Pc);

    // Prologue instructions carry no original targets; skip them.
    for instr in code.iter_mut().skip(2) {
        if matches!(instr, Instr::Jmp(_) | Instr::JmpIf(_)) {
            for t in instr.branch_targets_mut() {
                *t = relocate.get(*t as usize).copied().unwrap_or(*t);
            }
        }
    }

    let mut out = MethodDef::new(m.name.clone(), m.param_count, local_count, code, true);
    out.code[1] = Instr::Dispatch(out.invoke_table.clone());
    Ok(out)
}

/// Verifies, instruments every method, re-hashes, and reports the size change.
pub fn instrument_program(p: &Program) -> Result<(Program, InstrumentationReport), InstrumentError> {
    if let Some(m) = p.methods.values().find(|m| m.instrumented) {
        return Err(InstrumentError::AlreadyInstrumented(m.name.clone()));
    }
    let report = verify(p);
    if !report.is_ok() {
        return Err(InstrumentError::Verification(Box::new(report)));
    }

    let mut methods = BTreeMap::new();
    let mut rows = Vec::with_capacity(p.methods.len());
    for (name, m) in &p.methods {
        let loops = analyze_loops(m)?;
        let out = instrument_method(m, &loops)?;
        rows.push(MethodRow {
            method: name.clone(),
            count_before: m.code.len(),
            count_after: out.code.len(),
            loops: loops.innermost_headers().len(),
            invokes: m.code.iter().filter(|i| i.is_original_invoke_class()).count(),
            delta: out.code.len() - m.code.len(),
        });
        methods.insert(name.clone(), out);
    }

    let mut out = p.clone();
    out.methods = methods;
    out.rehash();
    Ok((out, InstrumentationReport::from_rows(rows)))
}
