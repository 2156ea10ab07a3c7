//! Static verifier.
//!
//! Computes one operand-stack depth per reachable pc by forward dataflow and rejects any
//! program where a thread could park, return, loop back, or be dispatched to with values left on
//! the operand stack. Capture relies on that: a parked thread's stacks are always empty.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::cfg::Cfg;
use super::instr::{Instr, Pc};
use super::program::{MethodDef, Program};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    StackUnderflow,
    DepthMismatch,
    InvalidJumpTarget,
    FallOffEnd,
    NonEmptyStackAtInvoke,
    NonEmptyStackAtReturn,
    NonEmptyStackAtBackEdge,
    NonEmptyStackAtDispatchTarget,
    IrreducibleLoop,
    LocalOutOfRange,
    BadLocalCount,
    UnknownMethod,
    CallArityMismatch,
    UnknownClass,
    UnknownField,
    UnknownGlobal,
    InstrumentedOpcodeInSource,
    RawMonitorInInstrumented,
    BadPrologue,
    InvokeTableMismatch,
    ApcSequence,
    ApcSlotClobbered,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub method: String,
    pub pc: Pc,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}: {}: {}", self.method, self.pc, self.rule, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodReport {
    /// Static stack depth on entry to each pc; `None` when unreachable.
    pub depths: Vec<Option<u32>>,
    pub max_depth: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub methods: BTreeMap<String, MethodReport>,
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn rules(&self) -> BTreeSet<Rule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    pub fn depth_at(&self, method: &str, pc: Pc) -> Option<u32> {
        *self.methods.get(method)?.depths.get(pc as usize)?
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok ({} methods)", self.methods.len());
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

struct MethodCheck<'a> {
    program: &'a Program,
    method: &'a MethodDef,
    out: Vec<Violation>,
}

impl MethodCheck<'_> {
    fn flag(&mut self, pc: usize, rule: Rule, message: impl Into<String>) {
        self.out.push(Violation {
            method: self.method.name.clone(),
            pc: pc as Pc,
            rule,
            message: message.into(),
        });
    }

    fn operands(&mut self) {
        let m = self.method;
        if m.local_count < m.param_count + m.instrumented as u16 {
            self.flag(
                0,
                Rule::BadLocalCount,
                format!(
                    "localCount {} too small for {} parameters",
                    m.local_count, m.param_count
                ),
            );
        }
        let apc = m.instrumented.then(|| m.apc_slot());
        for (pc, instr) in m.code.iter().enumerate() {
            for l in instr.locals() {
                if l >= m.local_count {
                    self.flag(
                        pc,
                        Rule::LocalOutOfRange,
                        format!("local {l} >= localCount {}", m.local_count),
                    );
                } else if Some(l) == apc {
                    self.flag(pc, Rule::ApcSlotClobbered, format!("local {l} is the APC slot"));
                }
            }
            match instr {
                Instr::Invoke { method, args, .. } | Instr::Spawn { method, args, .. } => {
                    match self.program.methods.get(method) {
                        None => self.flag(pc, Rule::UnknownMethod, format!("no method `{method}`")),
                        Some(callee) if callee.param_count as usize != args.len() => self.flag(
                            pc,
                            Rule::CallArityMismatch,
                            format!(
                                "`{method}` takes {} arguments, {} given",
                                callee.param_count,
                                args.len()
                            ),
                        ),
                        Some(_) => {}
                    }
                }
                Instr::NewObj { class, .. } if !self.program.classes.contains_key(class) => {
                    self.flag(pc, Rule::UnknownClass, format!("no class `{class}`"));
                }
                Instr::GetField { field, .. } | Instr::PutField { field, .. }
                    if !self.program.classes.values().any(|fs| fs.contains(field)) =>
                {
                    self.flag(pc, Rule::UnknownField, format!("no class declares `{field}`"));
                }
                Instr::GetGlobal { name, .. } | Instr::PutGlobal { name, .. }
                    if !self.program.globals.contains(name) =>
                {
                    self.flag(pc, Rule::UnknownGlobal, format!("no global `{name}`"));
                }
                _ => {}
            }
            if !m.instrumented && instr.is_instrumentation_only() {
                self.flag(
                    pc,
                    Rule::InstrumentedOpcodeInSource,
                    format!("{} only appears in instrumented code", instr.mnemonic()),
                );
            }
            if m.instrumented
                && matches!(
                    instr,
                    Instr::MEnter(_)
                        | Instr::MExit(_)
                        | Instr::MWait(_)
                        | Instr::MNotify(_)
                        | Instr::MNotifyAll(_)
                )
            {
                self.flag(
                    pc,
                    Rule::RawMonitorInInstrumented,
                    format!("{} must be rewritten to a mobile-monitor call", instr.mnemonic()),
                );
            }
        }
    }

    fn instrumented_layout(&mut self) {
        let m = self.method;
        let code = &m.code;
        let prologue_ok = code.len() >= 3
            && code[0] == Instr::ApcInit
            && matches!(code[1], Instr::Dispatch(_))
            && code[2] == Instr::Checkpoint;
        if !prologue_ok {
            self.flag(0, Rule::BadPrologue, "expected APCINIT; DISPATCH; CHECKPOINT");
        }
        for (pc, instr) in code.iter().enumerate() {
            let misplaced = match instr {
                Instr::ApcInit => pc != 0,
                Instr::Dispatch(_) => pc != 1,
                _ => false,
            };
            if misplaced {
                self.flag(pc, Rule::BadPrologue, format!("{} outside prologue", instr.mnemonic()));
            }
        }
        let computed = m.compute_invoke_table();
        if m.invoke_table != computed {
            self.flag(1, Rule::InvokeTableMismatch, "invokeTable does not list the invoke-class pcs");
        }
        if let Some(Instr::Dispatch(table)) = code.get(1) {
            if *table != computed {
                self.flag(1, Rule::InvokeTableMismatch, "DISPATCH table differs from invokeTable");
            }
        }
        if computed.first() != Some(&2) {
            self.flag(2, Rule::InvokeTableMismatch, "invokeTable[0] must be 2");
        }
        for (k, &pc) in computed.iter().enumerate() {
            let next = code.get(pc as usize + 1);
            if next != Some(&Instr::ApcSet(k as u32 + 1)) {
                self.flag(
                    pc as usize,
                    Rule::ApcSequence,
                    format!("invoke #{k} must be followed by APCSET {}", k + 1),
                );
            }
        }
        let apcsets = code.iter().filter(|i| matches!(i, Instr::ApcSet(_))).count();
        if apcsets != computed.len() {
            self.flag(0, Rule::ApcSequence, "stray APCSET");
        }
    }

    fn dataflow(&mut self) -> MethodReport {
        let code = &self.method.code;
        let n = code.len();
        let mut depths: Vec<Option<u32>> = vec![None; n];
        if n == 0 {
            self.flag(0, Rule::FallOffEnd, "empty method body");
            return MethodReport::default();
        }
        let mut mismatch_reported = vec![false; n];
        let mut work = vec![0usize];
        depths[0] = Some(0);
        let mut max_depth = 0;
        while let Some(pc) = work.pop() {
            let d = depths[pc].expect("queued pcs have a depth");
            let instr = &code[pc];
            let (pop, push) = instr.stack_effect();
            if d < pop {
                self.flag(
                    pc,
                    Rule::StackUnderflow,
                    format!("{} needs {pop} operand(s), depth is {d}", instr.mnemonic()),
                );
                continue;
            }
            let out = d - pop + push;
            max_depth = max_depth.max(out).max(d);
            let mut succ: Vec<usize> = Vec::new();
            for t in instr.branch_targets() {
                if (t as usize) < n {
                    succ.push(t as usize);
                } else {
                    self.flag(pc, Rule::InvalidJumpTarget, format!("target {t} outside 0..{n}"));
                }
            }
            if !instr.is_terminator() {
                if pc + 1 < n {
                    succ.push(pc + 1);
                } else {
                    self.flag(pc, Rule::FallOffEnd, "control falls off the end of the method");
                }
            }
            for t in succ {
                match depths[t] {
                    None => {
                        depths[t] = Some(out);
                        work.push(t);
                    }
                    Some(existing) if existing != out && !mismatch_reported[t] => {
                        mismatch_reported[t] = true;
                        self.flag(
                            t,
                            Rule::DepthMismatch,
                            format!("merge of depths {existing} and {out}"),
                        );
                    }
                    Some(_) => {}
                }
            }
        }
        MethodReport { depths, max_depth }
    }

    fn capture_points(&mut self, report: &MethodReport) {
        let code = &self.method.code;
        let cfg = Cfg::build(code);
        let depth = |pc: usize| report.depths.get(pc).copied().flatten();
        for (pc, instr) in code.iter().enumerate() {
            let Some(d) = depth(pc) else { continue };
            if d == 0 {
                continue;
            }
            if instr.is_invoke_class() || instr.is_original_invoke_class() {
                self.flag(
                    pc,
                    Rule::NonEmptyStackAtInvoke,
                    format!("{} with stack depth {d}", instr.mnemonic()),
                );
            }
            if matches!(instr, Instr::Return(_)) {
                self.flag(pc, Rule::NonEmptyStackAtReturn, format!("RETURN with stack depth {d}"));
            }
        }
        let back_targets: BTreeSet<Pc> = cfg.retreating.iter().map(|(_, t)| *t).collect();
        for t in back_targets {
            if let Some(d) = depth(t as usize).filter(|d| *d != 0) {
                self.flag(
                    t as usize,
                    Rule::NonEmptyStackAtBackEdge,
                    format!("loop target with stack depth {d}"),
                );
            }
        }
        if let Some(Instr::Dispatch(table)) = code.get(1) {
            for &t in table {
                if let Some(d) = depth(t as usize).filter(|d| *d != 0) {
                    self.flag(
                        t as usize,
                        Rule::NonEmptyStackAtDispatchTarget,
                        format!("dispatch target with stack depth {d}"),
                    );
                }
            }
        }
        // Dispatch edges enter loop bodies sideways by construction; reducibility is a
        // property of the source.
        if !self.method.instrumented {
            for &(src, dst) in &cfg.retreating {
                if !cfg.dominates(dst, src) {
                    self.flag(
                        src as usize,
                        Rule::IrreducibleLoop,
                        format!("edge {src}->{dst} enters a loop whose target does not dominate it"),
                    );
                }
            }
        }
    }
}

/// Verifies every method. Never fails; problems are reported as violations.
pub fn verify(p: &Program) -> VerificationReport {
    let mut report = VerificationReport::default();
    for m in p.methods.values() {
        let mut check = MethodCheck {
            program: p,
            method: m,
            out: Vec::new(),
        };
        check.operands();
        if m.instrumented {
            check.instrumented_layout();
        }
        let mr = check.dataflow();
        check.capture_points(&mr);
        report.violations.extend(check.out);
        report.methods.insert(m.name.clone(), mr);
    }
    report
        .violations
        .sort_by(|a, b| (&a.method, a.pc, a.rule).cmp(&(&b.method, b.pc, b.rule)));
    report.violations.dedup();
    report
}
