//! Deterministic interpreter with cooperative virtual threads.
//!
//! Threads are scheduled round-robin by tid, `quantum` original instructions at a time. Time is a
//! virtual millisecond clock that only moves when every live thread is blocked and some thread
//! sleeps. Monitors are mobile: all their state lives in [`MobileMonitor`] values keyed by
//! object reference, so capture sees owners, recursion counts and both queues.

pub mod event;
mod inspect;
mod monitor;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytes::Writer;
use crate::isa::{verify, Instr, Local, MethodDef, MonitorOp, ObjRef, Pc, Program, Value, VerificationReport};

pub use event::{check_monitor_discipline, check_relaunch_order, to_json_lines, Event, EventKind, UnparkReason};
pub use inspect::{FrameView, MonitorView, StateView, ThreadView};
pub use monitor::MobileMonitor;

pub const DEFAULT_QUANTUM: u32 = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Running,
    Suspended,
}

/// Why a thread is not running. The four blocked variants are the capturable park states.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParkState {
    Runnable,
    /// Blocked at a checkpoint while the entity is suspended.
    ExecBlocked,
    MonitorEntry { obj: ObjRef },
    MonitorWait { obj: ObjRef },
    Sleeping { deadline: u64 },
    Done,
}

impl ParkState {
    pub fn is_live(&self) -> bool {
        !matches!(self, ParkState::Done)
    }

    pub fn is_parked(&self) -> bool {
        !matches!(self, ParkState::Runnable | ParkState::Done)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub(crate) method: usize,
    pub(crate) locals: Vec<Value>,
    pub(crate) stack: Vec<Value>,
    pub(crate) pc: Pc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThreadCtx {
    pub(crate) tid: u32,
    pub(crate) frames: Vec<Frame>,
    pub(crate) park: ParkState,
    /// Recursion to restore once a notified waiter gets the monitor back.
    pub(crate) pending_reacquire: Option<u32>,
}

impl ThreadCtx {
    pub fn tid(&self) -> u32 {
        self.tid
    }

    pub fn park(&self) -> &ParkState {
        &self.park
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapObject {
    pub id: ObjRef,
    pub class: String,
    /// Values in class field order.
    pub fields: Vec<Value>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    /// Completed instructions.
    pub instructions: u64,
    /// Frames created: the entry frame, every INVOKE and every SPAWN.
    pub invocations: u64,
    /// Completed INVOKE/SPAWN/SLEEP/monitor operations (either opcode family).
    pub invoke_class_completed: u64,
    /// CHECKPOINT evaluations while RUNNING.
    pub checkpoints: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TrapReason {
    #[error("division by zero")]
    DivisionByZero,
    #[error("{op}: expected {expected}, found {found}")]
    TypeMismatch {
        op: &'static str,
        expected: &'static str,
        found: &'static str,
    },
    #[error("null dereference")]
    NullDeref,
    #[error("dangling reference {0}")]
    DanglingRef(ObjRef),
    #[error("class `{class}` has no field `{field}`")]
    BadField { class: String, field: String },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("unknown global `{0}`")]
    UnknownGlobal(String),
    #[error("illegal monitor state: thread does not own {0}")]
    IllegalMonitorState(ObjRef),
    #[error("negative sleep of {0} ms")]
    NegativeSleep(i64),
    #[error("APC {0} outside the dispatch table")]
    BadApc(i64),
    #[error("operand stack underflow")]
    StackUnderflow,
    #[error("local {0} out of range")]
    BadLocal(Local),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("trap in thread {tid} at {method}@{pc}: {reason}")]
pub struct Trap {
    pub tid: u32,
    pub method: String,
    pub pc: Pc,
    pub reason: TrapReason,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LoadError {
    #[error("program is not instrumented")]
    NotInstrumented,
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error("program failed verification:\n{0}")]
    VerificationFailed(Box<VerificationReport>),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum VmError {
    #[error(transparent)]
    Trap(#[from] Trap),
    #[error("invalid transition: status is already {0:?}")]
    InvalidTransition(ExecStatus),
    #[error("step limit of {0} exhausted")]
    StepLimit(u64),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Progressed,
    AllParked,
    AllDone,
}

/// How a run driven by [`VmInstance::run`] ended.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RunEnd {
    Done,
    /// No thread can make progress. While RUNNING this is a deadlock.
    Parked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BranchRecord {
    pub tid: u32,
    pub method: String,
    pub taken: bool,
}

#[derive(Debug)]
pub(crate) struct Code {
    pub(crate) program: Program,
    pub(crate) methods: Vec<MethodDef>,
    pub(crate) index: HashMap<String, usize>,
}

impl Code {
    fn new(program: Program) -> Self {
        let methods: Vec<MethodDef> = program.methods.values().cloned().collect();
        let index = methods
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        Code {
            program,
            methods,
            index,
        }
    }
}

enum Flow {
    Next,
    Jump(Pc),
    Parked,
    /// Instruction completed and already moved control itself.
    Moved,
}

/// One entity's complete execution state.
#[derive(Debug, Clone)]
pub struct VmInstance {
    pub(crate) code: Arc<Code>,
    pub(crate) threads: Vec<ThreadCtx>,
    pub(crate) heap: Vec<HeapObject>,
    pub(crate) globals: BTreeMap<String, Value>,
    pub(crate) monitors: BTreeMap<ObjRef, MobileMonitor>,
    pub(crate) status: ExecStatus,
    pub(crate) clock: u64,
    pub(crate) output: Vec<Value>,
    pub(crate) events: Vec<Event>,
    cursor: Option<u32>,
    quantum: u32,
    stats: Stats,
    suspend_at: Option<u64>,
    failed: Option<Trap>,
    profile: Option<Vec<Vec<u64>>>,
    depth_oracle: Option<Arc<VerificationReport>>,
    depth_mismatches: u64,
    branch_trace: Option<Vec<BranchRecord>>,
}

impl VmInstance {
    /// Loads an instrumented, verified program with one RUNNABLE thread at the entry method.
    pub fn load(p: &Program) -> Result<Self, LoadError> {
        if !p.is_instrumented() {
            return Err(LoadError::NotInstrumented);
        }
        Self::load_checked(p)
    }

    /// Loads an uninstrumented program. Monitor opcodes run natively and there are no
    /// checkpoints, so the entity cannot be suspended; used as the overhead baseline.
    pub fn load_baseline(p: &Program) -> Result<Self, LoadError> {
        if p.methods.values().any(|m| m.instrumented) {
            return Err(LoadError::AlreadyInstrumented);
        }
        Self::load_checked(p)
    }

    fn load_checked(p: &Program) -> Result<Self, LoadError> {
        let report = verify(p);
        if !report.is_ok() {
            return Err(LoadError::VerificationFailed(Box::new(report)));
        }
        let mut vm = Self::empty(p.clone());
        let entry = vm.code.index[&p.entry];
        let frame = vm.new_frame(entry, &[]);
        vm.threads.push(ThreadCtx {
            tid: 0,
            frames: vec![frame],
            park: ParkState::Runnable,
            pending_reacquire: None,
        });
        vm.stats.invocations = 1;
        vm.log(EventKind::Spawn {
            tid: 0,
            parent: None,
            method: p.entry.clone(),
        });
        Ok(vm)
    }

    pub(crate) fn empty(p: Program) -> Self {
        let globals = p.globals.iter().map(|g| (g.clone(), Value::Null)).collect();
        VmInstance {
            code: Arc::new(Code::new(p)),
            threads: Vec::new(),
            heap: Vec::new(),
            globals,
            monitors: BTreeMap::new(),
            status: ExecStatus::Running,
            clock: 0,
            output: Vec::new(),
            events: Vec::new(),
            cursor: None,
            quantum: DEFAULT_QUANTUM,
            stats: Stats::default(),
            suspend_at: None,
            failed: None,
            profile: None,
            depth_oracle: None,
            depth_mismatches: 0,
            branch_trace: None,
        }
    }

    pub fn program(&self) -> &Program {
        &self.code.program
    }

    pub fn with_quantum(mut self, quantum: u32) -> Self {
        self.set_quantum(quantum);
        self
    }

    pub fn set_quantum(&mut self, quantum: u32) {
        self.quantum = quantum.max(1);
    }

    pub fn quantum(&self) -> u32 {
        self.quantum
    }

    pub fn status(&self) -> ExecStatus {
        self.status
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn output(&self) -> &[Value] {
        &self.output
    }

    pub fn output_lines(&self) -> Vec<String> {
        self.output.iter().map(Value::to_string).collect()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn threads(&self) -> &[ThreadCtx] {
        &self.threads
    }

    pub fn heap(&self) -> &[HeapObject] {
        &self.heap
    }

    pub fn globals(&self) -> &BTreeMap<String, Value> {
        &self.globals
    }

    pub fn monitors(&self) -> &BTreeMap<ObjRef, MobileMonitor> {
        &self.monitors
    }

    pub fn failure(&self) -> Option<&Trap> {
        self.failed.as_ref()
    }

    /// tid the next SPAWN will receive.
    pub fn next_tid(&self) -> u32 {
        self.threads.len() as u32
    }

    /// Suspends the entity right before the `k`-th (1-based) checkpoint evaluation, so the
    /// thread reaching it parks there. Models an external request arriving asynchronously.
    pub fn suspend_at_checkpoint(&mut self, k: u64) {
        self.suspend_at = Some(k);
    }

    /// Counts completions per (method, pc). Method order is the program's method order.
    pub fn enable_profile(&mut self) {
        self.profile = Some(self.code.methods.iter().map(|m| vec![0; m.code.len()]).collect());
    }

    pub fn profile(&self) -> Option<BTreeMap<String, Vec<u64>>> {
        let p = self.profile.as_ref()?;
        Some(
            self.code
                .methods
                .iter()
                .zip(p)
                .map(|(m, counts)| (m.name.clone(), counts.clone()))
                .collect(),
        )
    }

    /// Compares the live operand-stack depth to the verifier's static depth before every
    /// instruction; mismatches are counted, see [`Self::depth_mismatches`].
    pub fn enable_depth_check(&mut self, report: VerificationReport) {
        self.depth_oracle = Some(Arc::new(report));
    }

    pub fn depth_mismatches(&self) -> u64 {
        self.depth_mismatches
    }

    pub fn enable_branch_trace(&mut self) {
        self.branch_trace = Some(Vec::new());
    }

    pub fn branch_trace(&self) -> Option<&[BranchRecord]> {
        self.branch_trace.as_deref()
    }

    pub(crate) fn log(&mut self, kind: EventKind) {
        self.events.push(Event {
            clock: self.clock,
            kind,
        });
    }

    pub(crate) fn method_def(&self, idx: usize) -> &MethodDef {
        &self.code.methods[idx]
    }

    pub(crate) fn method_index(&self, name: &str) -> Option<usize> {
        self.code.index.get(name).copied()
    }

    pub(crate) fn new_frame(&self, method: usize, args: &[Value]) -> Frame {
        let def = &self.code.methods[method];
        let mut locals = vec![Value::Null; def.local_count as usize];
        if def.instrumented {
            locals[def.apc_slot() as usize] = Value::Int(-1);
        }
        for (slot, v) in locals.iter_mut().zip(args) {
            *slot = v.clone();
        }
        Frame {
            method,
            locals,
            stack: Vec::new(),
            pc: 0,
        }
    }

    // ---- execution flag ----------------------------------------------------------------

    /// Threads park lazily at their next checkpoint; already-parked threads are unaffected.
    pub fn exec_suspend(&mut self) -> Result<(), VmError> {
        if self.status == ExecStatus::Suspended {
            return Err(VmError::InvalidTransition(ExecStatus::Suspended));
        }
        self.status = ExecStatus::Suspended;
        self.log(EventKind::Suspend);
        Ok(())
    }

    /// Sets RUNNING and releases every thread blocked at a checkpoint, in tid order.
    pub fn exec_resume(&mut self) -> Result<(), VmError> {
        if self.status == ExecStatus::Running {
            return Err(VmError::InvalidTransition(ExecStatus::Running));
        }
        self.status = ExecStatus::Running;
        let mut unparked = Vec::new();
        for t in 0..self.threads.len() {
            if self.threads[t].park == ParkState::ExecBlocked {
                self.threads[t].park = ParkState::Runnable;
                self.complete_parked(t);
                unparked.push(t as u32);
            }
        }
        self.log(EventKind::Resume { unparked });
        Ok(())
    }

    // ---- scheduler ---------------------------------------------------------------------

    /// Runs one scheduling quantum of the next runnable thread.
    pub fn step(&mut self) -> Result<StepOutcome, Trap> {
        if let Some(t) = &self.failed {
            return Err(t.clone());
        }
        self.wake_sleepers();
        let Some(tid) = self.next_runnable() else {
            if !self.threads.iter().any(|t| t.park.is_live()) {
                return Ok(StepOutcome::AllDone);
            }
            if self.status == ExecStatus::Running {
                let earliest = self
                    .threads
                    .iter()
                    .filter_map(|t| match t.park {
                        ParkState::Sleeping { deadline } => Some(deadline),
                        _ => None,
                    })
                    .min();
                if let Some(deadline) = earliest {
                    self.clock = self.clock.max(deadline);
                    self.log(EventKind::ClockAdvance { to: self.clock });
                    self.wake_sleepers();
                    return Ok(StepOutcome::Progressed);
                }
            }
            return Ok(StepOutcome::AllParked);
        };
        self.cursor = Some(tid as u32);
        // Only original instructions are charged, so an instrumented program is preempted at
        // the same points as its uninstrumented form.
        let mut charged = 0;
        while charged < self.quantum && self.threads[tid].park == ParkState::Runnable {
            if !matches!(
                self.current_instr(tid),
                Instr::Checkpoint | Instr::ApcInit | Instr::ApcSet(_) | Instr::Dispatch(_)
            ) {
                charged += 1;
            }
            if let Err(reason) = self.exec_one(tid) {
                let th = &self.threads[tid];
                let (method, pc) = th
                    .frames
                    .last()
                    .map(|f| (self.code.methods[f.method].name.clone(), f.pc))
                    .unwrap_or_default();
                let trap = Trap {
                    tid: tid as u32,
                    method,
                    pc,
                    reason,
                };
                self.log(EventKind::Trap {
                    tid: trap.tid,
                    pc,
                    reason: trap.reason.to_string(),
                });
                self.failed = Some(trap.clone());
                return Err(trap);
            }
        }
        Ok(StepOutcome::Progressed)
    }

    /// Steps until every thread is done or nothing can run, up to `max_steps` quanta.
    pub fn run(&mut self, max_steps: u64) -> Result<RunEnd, VmError> {
        for _ in 0..max_steps {
            match self.step()? {
                StepOutcome::Progressed => {}
                StepOutcome::AllParked => return Ok(RunEnd::Parked),
                StepOutcome::AllDone => return Ok(RunEnd::Done),
            }
        }
        Err(VmError::StepLimit(max_steps))
    }

    fn current_instr(&self, tid: usize) -> &Instr {
        let f = self.threads[tid].frames.last().expect("live thread has a frame");
        &self.code.methods[f.method].code[f.pc as usize]
    }

    fn next_runnable(&self) -> Option<usize> {
        let n = self.threads.len();
        let start = self.cursor.map_or(0, |c| c as usize + 1);
        (0..n)
            .map(|i| (start + i) % n)
            .find(|&t| self.threads[t].park == ParkState::Runnable)
    }

    fn wake_sleepers(&mut self) {
        for t in 0..self.threads.len() {
            if let ParkState::Sleeping { deadline } = self.threads[t].park {
                if deadline <= self.clock {
                    self.threads[t].park = ParkState::Runnable;
                    self.complete_parked(t);
                    self.log(EventKind::Unpark {
                        tid: t as u32,
                        reason: UnparkReason::Woke,
                    });
                }
            }
        }
    }

    /// Finishes the instruction a thread parked on (SLEEP or CHECKPOINT) and moves past it.
    fn complete_parked(&mut self, tid: usize) {
        let frame = self.threads[tid].frames.last_mut().expect("live thread has a frame");
        let instr = &self.code.methods[frame.method].code[frame.pc as usize];
        let counts_invoke = instr.is_original_invoke_class() || instr.monitor_op().is_some();
        let (method, pc) = (frame.method, frame.pc);
        frame.pc += 1;
        self.count(method, pc, counts_invoke);
    }

    fn count(&mut self, method: usize, pc: Pc, invoke_class: bool) {
        self.stats.instructions += 1;
        if invoke_class {
            self.stats.invoke_class_completed += 1;
        }
        if let Some(p) = self.profile.as_mut() {
            p[method][pc as usize] += 1;
        }
    }

    pub(crate) fn park(&mut self, tid: usize, state: ParkState) {
        let th = &mut self.threads[tid];
        th.park = state.clone();
        let f = th.frames.last().expect("parked thread has a frame");
        let (method, pc) = (self.code.methods[f.method].name.clone(), f.pc);
        self.log(EventKind::Park {
            tid: tid as u32,
            method,
            pc,
            state,
        });
    }

    // ---- interpreter -------------------------------------------------------------------

    fn frame(&mut self, tid: usize) -> &mut Frame {
        self.threads[tid].frames.last_mut().expect("running thread has a frame")
    }

    fn local(&self, tid: usize, l: Local) -> Result<Value, TrapReason> {
        let f = self.threads[tid].frames.last().expect("running thread has a frame");
        f.locals.get(l as usize).cloned().ok_or(TrapReason::BadLocal(l))
    }

    fn set_local(&mut self, tid: usize, l: Local, v: Value) -> Result<(), TrapReason> {
        let slot = self
            .frame(tid)
            .locals
            .get_mut(l as usize)
            .ok_or(TrapReason::BadLocal(l))?;
        *slot = v;
        Ok(())
    }

    fn pop(&mut self, tid: usize) -> Result<Value, TrapReason> {
        self.frame(tid).stack.pop().ok_or(TrapReason::StackUnderflow)
    }

    fn pop_int(&mut self, tid: usize, op: &'static str) -> Result<i64, TrapReason> {
        let v = self.pop(tid)?;
        v.as_int().ok_or(TrapReason::TypeMismatch {
            op,
            expected: "int",
            found: v.type_name(),
        })
    }

    fn pop_bool(&mut self, tid: usize, op: &'static str) -> Result<bool, TrapReason> {
        let v = self.pop(tid)?;
        v.as_bool().ok_or(TrapReason::TypeMismatch {
            op,
            expected: "bool",
            found: v.type_name(),
        })
    }

    fn push(&mut self, tid: usize, v: Value) {
        self.frame(tid).stack.push(v);
    }

    fn object_ref(&self, v: &Value, op: &'static str) -> Result<ObjRef, TrapReason> {
        match v {
            Value::Ref(r) if (r.0 as usize) < self.heap.len() => Ok(*r),
            Value::Ref(r) => Err(TrapReason::DanglingRef(*r)),
            Value::Null => Err(TrapReason::NullDeref),
            other => Err(TrapReason::TypeMismatch {
                op,
                expected: "ref",
                found: other.type_name(),
            }),
        }
    }

    fn field_slot(&self, obj: ObjRef, field: &str) -> Result<usize, TrapReason> {
        let class = &self.heap[obj.0 as usize].class;
        self.code
            .program
            .field_index(class, field)
            .ok_or_else(|| TrapReason::BadField {
                class: class.clone(),
                field: field.to_string(),
            })
    }

    fn apc(&self, tid: usize) -> i64 {
        let f = self.threads[tid].frames.last().expect("frame");
        let slot = self.code.methods[f.method].apc_slot() as usize;
        f.locals[slot].as_int().unwrap_or(-1)
    }

    fn set_apc(&mut self, tid: usize, v: i64) {
        let code = Arc::clone(&self.code);
        let f = self.frame(tid);
        let slot = code.methods[f.method].apc_slot() as usize;
        f.locals[slot] = Value::Int(v);
    }

    /// Executes the instruction at the top frame's pc for a RUNNABLE thread.
    pub(crate) fn exec_one(&mut self, tid: usize) -> Result<(), TrapReason> {
        let code = Arc::clone(&self.code);
        let (midx, pc, depth) = {
            let f = self.threads[tid].frames.last().expect("runnable thread has a frame");
            (f.method, f.pc, f.stack.len())
        };
        let method = &code.methods[midx];
        let instr = &method.code[pc as usize];

        if let Some(report) = &self.depth_oracle {
            if report.depth_at(&method.name, pc) != Some(depth as u32) {
                self.depth_mismatches += 1;
            }
        }

        let flow = self.exec_instr(tid, instr, &method.name)?;
        let counts_invoke = instr.is_original_invoke_class() || instr.monitor_op().is_some();
        match flow {
            Flow::Next => {
                self.frame(tid).pc += 1;
                self.count(midx, pc, counts_invoke);
            }
            Flow::Jump(t) => {
                self.frame(tid).pc = t;
                self.count(midx, pc, counts_invoke);
            }
            Flow::Moved => self.count(midx, pc, counts_invoke),
            Flow::Parked => {}
        }
        Ok(())
    }

    fn binary(&mut self, tid: usize, instr: &Instr) -> Result<Value, TrapReason> {
        let op = instr.mnemonic();
        Ok(match instr {
            Instr::Eq => {
                let b = self.pop(tid)?;
                let a = self.pop(tid)?;
                Value::Bool(a == b)
            }
            Instr::And | Instr::Or => {
                let b = self.pop_bool(tid, op)?;
                let a = self.pop_bool(tid, op)?;
                Value::Bool(if matches!(instr, Instr::And) { a && b } else { a || b })
            }
            Instr::Add => {
                let b = self.pop(tid)?;
                let a = self.pop(tid)?;
                match (a, b) {
                    (Value::Int(a), Value::Int(b)) => Value::Int(a.wrapping_add(b)),
                    (Value::Str(a), b) => Value::Str(format!("{a}{b}")),
                    (a, _) => {
                        return Err(TrapReason::TypeMismatch {
                            op,
                            expected: "int or str",
                            found: a.type_name(),
                        })
                    }
                }
            }
            _ => {
                let b = self.pop_int(tid, op)?;
                let a = self.pop_int(tid, op)?;
                match instr {
                    Instr::Sub => Value::Int(a.wrapping_sub(b)),
                    Instr::Mul => Value::Int(a.wrapping_mul(b)),
                    Instr::Div if b == 0 => return Err(TrapReason::DivisionByZero),
                    Instr::Div => Value::Int(a.wrapping_div(b)),
                    Instr::Mod if b == 0 => return Err(TrapReason::DivisionByZero),
                    Instr::Mod => Value::Int(a.wrapping_rem(b)),
                    Instr::Lt => Value::Bool(a < b),
                    Instr::Le => Value::Bool(a <= b),
                    _ => unreachable!("not a binary op: {op}"),
                }
            }
        })
    }

    fn exec_instr(&mut self, tid: usize, instr: &Instr, method: &str) -> Result<Flow, TrapReason> {
        match instr {
            Instr::Const(v) => self.push(tid, v.clone()),
            Instr::Load(l) => {
                let v = self.local(tid, *l)?;
                self.push(tid, v);
            }
            Instr::Store(l) => {
                let v = self.pop(tid)?;
                self.set_local(tid, *l, v)?;
            }
            Instr::Add
            | Instr::Sub
            | Instr::Mul
            | Instr::Div
            | Instr::Mod
            | Instr::Eq
            | Instr::Lt
            | Instr::Le
            | Instr::And
            | Instr::Or => {
                let v = self.binary(tid, instr)?;
                self.push(tid, v);
            }
            Instr::Not => {
                let b = self.pop_bool(tid, "NOT")?;
                self.push(tid, Value::Bool(!b));
            }
            Instr::Jmp(t) => return Ok(Flow::Jump(*t)),
            Instr::JmpIf(t) => {
                let taken = self.pop_bool(tid, "JMPIF")?;
                if let Some(trace) = self.branch_trace.as_mut() {
                    trace.push(BranchRecord {
                        tid: tid as u32,
                        method: method.to_string(),
                        taken,
                    });
                }
                return Ok(if taken { Flow::Jump(*t) } else { Flow::Next });
            }
            Instr::Invoke { method, args, .. } => {
                let callee = self
                    .method_index(method)
                    .ok_or_else(|| TrapReason::UnknownMethod(method.clone()))?;
                let values = args
                    .iter()
                    .map(|a| self.local(tid, *a))
                    .collect::<Result<Vec<_>, _>>()?;
                let frame = self.new_frame(callee, &values);
                self.threads[tid].frames.push(frame);
                self.stats.invocations += 1;
                return Ok(Flow::Moved);
            }
            Instr::Return(l) => {
                let ret = match l {
                    Some(l) => Some(self.local(tid, *l)?),
                    None => None,
                };
                self.threads[tid].frames.pop();
                let code = Arc::clone(&self.code);
                match self.threads[tid].frames.last_mut() {
                    None => {
                        self.threads[tid].park = ParkState::Done;
                        self.log(EventKind::ThreadDone { tid: tid as u32 });
                    }
                    Some(caller) => {
                        if let Instr::Invoke { ret: Some(slot), .. } =
                            &code.methods[caller.method].code[caller.pc as usize]
                        {
                            caller.locals[*slot as usize] = ret.unwrap_or(Value::Null);
                        }
                        caller.pc += 1;
                    }
                }
                return Ok(Flow::Moved);
            }
            Instr::NewObj { class, dst } => {
                let n = self
                    .code
                    .program
                    .classes
                    .get(class)
                    .ok_or_else(|| TrapReason::UnknownClass(class.clone()))?
                    .len();
                let id = ObjRef(self.heap.len() as u32);
                self.heap.push(HeapObject {
                    id,
                    class: class.clone(),
                    fields: vec![Value::Null; n],
                });
                self.set_local(tid, *dst, Value::Ref(id))?;
            }
            Instr::GetField { obj, field, dst } => {
                let r = self.object_ref(&self.local(tid, *obj)?, "GETFIELD")?;
                let slot = self.field_slot(r, field)?;
                let v = self.heap[r.0 as usize].fields[slot].clone();
                self.set_local(tid, *dst, v)?;
            }
            Instr::PutField { obj, field, src } => {
                let r = self.object_ref(&self.local(tid, *obj)?, "PUTFIELD")?;
                let slot = self.field_slot(r, field)?;
                let v = self.local(tid, *src)?;
                self.heap[r.0 as usize].fields[slot] = v;
            }
            Instr::GetGlobal { name, dst } => {
                let v = self
                    .globals
                    .get(name)
                    .cloned()
                    .ok_or_else(|| TrapReason::UnknownGlobal(name.clone()))?;
                self.set_local(tid, *dst, v)?;
            }
            Instr::PutGlobal { name, src } => {
                let v = self.local(tid, *src)?;
                let slot = self
                    .globals
                    .get_mut(name)
                    .ok_or_else(|| TrapReason::UnknownGlobal(name.clone()))?;
                *slot = v;
            }
            Instr::MEnter(l)
            | Instr::MExit(l)
            | Instr::MWait(l)
            | Instr::MNotify(l)
            | Instr::MNotifyAll(l)
            | Instr::MInvokeEnter(l)
            | Instr::MInvokeExit(l)
            | Instr::MInvokeWait(l)
            | Instr::MInvokeNotify(l)
            | Instr::MInvokeNotifyAll(l) => {
                let (op, _) = instr.monitor_op().expect("monitor instruction");
                let obj = self.object_ref(&self.local(tid, *l)?, instr.mnemonic())?;
                return self.monitor(tid, op, obj);
            }
            Instr::Sleep(l) => {
                let ms = self.local(tid, *l)?;
                let ms = ms.as_int().ok_or(TrapReason::TypeMismatch {
                    op: "SLEEP",
                    expected: "int",
                    found: ms.type_name(),
                })?;
                if ms < 0 {
                    return Err(TrapReason::NegativeSleep(ms));
                }
                let deadline = self.clock + ms as u64;
                self.park(tid, ParkState::Sleeping { deadline });
                return Ok(Flow::Parked);
            }
            Instr::Spawn { method, args, dst } => {
                let callee = self
                    .method_index(method)
                    .ok_or_else(|| TrapReason::UnknownMethod(method.clone()))?;
                let values = args
                    .iter()
                    .map(|a| self.local(tid, *a))
                    .collect::<Result<Vec<_>, _>>()?;
                let child = self.threads.len() as u32;
                let frame = self.new_frame(callee, &values);
                self.threads.push(ThreadCtx {
                    tid: child,
                    frames: vec![frame],
                    park: ParkState::Runnable,
                    pending_reacquire: None,
                });
                self.stats.invocations += 1;
                self.log(EventKind::Spawn {
                    tid: child,
                    parent: Some(tid as u32),
                    method: method.clone(),
                });
                if let Some(d) = dst {
                    self.set_local(tid, *d, Value::Int(child as i64))?;
                }
            }
            Instr::Print(l) => {
                let v = self.local(tid, *l)?;
                self.output.push(v);
            }
            Instr::Checkpoint => return Ok(self.exec_check(tid)),
            Instr::ApcInit => self.set_apc(tid, -1),
            Instr::ApcSet(k) => self.set_apc(tid, *k as i64),
            Instr::Dispatch(table) => {
                let apc = self.apc(tid);
                if apc < 0 {
                    return Ok(Flow::Next);
                }
                return table
                    .get(apc as usize)
                    .map(|t| Flow::Jump(*t))
                    .ok_or(TrapReason::BadApc(apc));
            }
        }
        Ok(Flow::Next)
    }

    /// CHECKPOINT: falls through while RUNNING, parks EXEC_BLOCKED while SUSPENDED.
    fn exec_check(&mut self, tid: usize) -> Flow {
        if self.status == ExecStatus::Running {
            self.stats.checkpoints += 1;
            if self.suspend_at == Some(self.stats.checkpoints) {
                self.suspend_at = None;
                self.status = ExecStatus::Suspended;
                self.log(EventKind::Suspend);
            } else {
                return Flow::Next;
            }
        }
        self.park(tid, ParkState::ExecBlocked);
        Flow::Parked
    }

    fn release_to_entry_head(&mut self, obj: ObjRef) {
        let mon = self.monitors.get_mut(&obj).expect("monitor exists");
        if let Some(next) = mon.entry_set.pop_front() {
            self.threads[next as usize].park = ParkState::Runnable;
            self.log(EventKind::Unpark {
                tid: next,
                reason: UnparkReason::EntryReleased,
            });
        }
    }

    fn monitor(&mut self, tid: usize, op: MonitorOp, obj: ObjRef) -> Result<Flow, TrapReason> {
        let me = tid as u32;
        let mon = self.monitors.entry(obj).or_default();
        match op {
            MonitorOp::Enter => match mon.owner {
                None => {
                    mon.owner = Some(me);
                    mon.recursion = 1;
                    self.log(EventKind::Acquire {
                        tid: me,
                        obj,
                        recursion: 1,
                    });
                }
                Some(o) if o == me => {
                    mon.recursion += 1;
                    let recursion = mon.recursion;
                    self.log(EventKind::Acquire {
                        tid: me,
                        obj,
                        recursion,
                    });
                }
                Some(_) => {
                    mon.entry_set.push_back(me);
                    self.park(tid, ParkState::MonitorEntry { obj });
                    return Ok(Flow::Parked);
                }
            },
            MonitorOp::Exit => {
                if mon.owner != Some(me) {
                    return Err(TrapReason::IllegalMonitorState(obj));
                }
                mon.recursion -= 1;
                if mon.recursion == 0 {
                    mon.owner = None;
                    self.log(EventKind::Release { tid: me, obj });
                    self.release_to_entry_head(obj);
                }
            }
            MonitorOp::Wait => {
                if let Some(saved) = self.threads[tid].pending_reacquire {
                    let mon = self.monitors.get_mut(&obj).expect("monitor exists");
                    if mon.owner.is_none() {
                        mon.owner = Some(me);
                        mon.recursion = saved;
                        self.threads[tid].pending_reacquire = None;
                        self.log(EventKind::Acquire {
                            tid: me,
                            obj,
                            recursion: saved,
                        });
                        return Ok(Flow::Next);
                    }
                    mon.entry_set.push_back(me);
                    self.park(tid, ParkState::MonitorEntry { obj });
                    return Ok(Flow::Parked);
                }
                if mon.owner != Some(me) {
                    return Err(TrapReason::IllegalMonitorState(obj));
                }
                let saved = mon.recursion;
                mon.owner = None;
                mon.recursion = 0;
                mon.wait_set.push_back((me, saved));
                self.log(EventKind::Release { tid: me, obj });
                self.park(tid, ParkState::MonitorWait { obj });
                self.release_to_entry_head(obj);
                return Ok(Flow::Parked);
            }
            MonitorOp::Notify | MonitorOp::NotifyAll => {
                if mon.owner != Some(me) {
                    return Err(TrapReason::IllegalMonitorState(obj));
                }
                let n = if op == MonitorOp::Notify {
                    mon.wait_set.len().min(1)
                } else {
                    mon.wait_set.len()
                };
                let moved: Vec<(u32, u32)> = mon.wait_set.drain(..n).collect();
                for &(t, _) in &moved {
                    mon.entry_set.push_back(t);
                }
                for &(t, saved) in &moved {
                    let th = &mut self.threads[t as usize];
                    th.park = ParkState::MonitorEntry { obj };
                    th.pending_reacquire = Some(saved);
                }
                self.log(EventKind::Notify {
                    tid: me,
                    obj,
                    moved: moved.iter().map(|(t, _)| *t).collect(),
                });
            }
        }
        Ok(Flow::Next)
    }

    /// Canonical bytes of the heap and globals, for whole-state comparisons.
    pub fn heap_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.len_u32(self.heap.len());
        for o in &self.heap {
            w.u32(o.id.0);
            w.str16(&o.class);
            w.len_u32(o.fields.len());
            for v in &o.fields {
                w.value(v);
            }
        }
        w.len_u32(self.globals.len());
        for (k, v) in &self.globals {
            w.str16(k);
            w.value(v);
        }
        w.into_bytes()
    }
}

impl fmt::Display for StepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}
