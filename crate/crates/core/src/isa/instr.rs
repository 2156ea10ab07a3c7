use std::fmt;

use serde::{Deserialize, Serialize};

use super::value::Value;

/// Index of a local variable slot within a frame.
pub type Local = u16;

/// Index of an instruction within a method's code.
pub type Pc = u32;

/// One bytecode instruction.
///
/// Calls, spawns and field/global access move data between local slots, never through the
/// operand stack, so only arithmetic and branches touch the stack.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Const(Value),
    Load(Local),
    Store(Local),
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Lt,
    Le,
    Not,
    And,
    Or,
    Jmp(Pc),
    /// Pops a bool and jumps when it is `true`.
    JmpIf(Pc),
    Invoke {
        method: String,
        args: Vec<Local>,
        ret: Option<Local>,
    },
    Return(Option<Local>),
    NewObj {
        class: String,
        dst: Local,
    },
    GetField {
        obj: Local,
        field: String,
        dst: Local,
    },
    PutField {
        obj: Local,
        field: String,
        src: Local,
    },
    GetGlobal {
        name: String,
        dst: Local,
    },
    PutGlobal {
        name: String,
        src: Local,
    },
    MEnter(Local),
    MExit(Local),
    MWait(Local),
    MNotify(Local),
    MNotifyAll(Local),
    Sleep(Local),
    Spawn {
        method: String,
        args: Vec<Local>,
        dst: Option<Local>,
    },
    Print(Local),

    // Emitted only by the instrumentation pass.
    Checkpoint,
    ApcInit,
    ApcSet(u32),
    Dispatch(Vec<Pc>),
    MInvokeEnter(Local),
    MInvokeExit(Local),
    MInvokeWait(Local),
    MInvokeNotify(Local),
    MInvokeNotifyAll(Local),
}

/// Monitor operation shared by the raw and the instrumented opcode families.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonitorOp {
    Enter,
    Exit,
    Wait,
    Notify,
    NotifyAll,
}

impl Instr {
    pub fn mnemonic(&self) -> &'static str {
        use Instr::*;
        match self {
            Const(_) => "CONST",
            Load(_) => "LOAD",
            Store(_) => "STORE",
            Add => "ADD",
            Sub => "SUB",
            Mul => "MUL",
            Div => "DIV",
            Mod => "MOD",
            Eq => "EQ",
            Lt => "LT",
            Le => "LE",
            Not => "NOT",
            And => "AND",
            Or => "OR",
            Jmp(_) => "JMP",
            JmpIf(_) => "JMPIF",
            Invoke { .. } => "INVOKE",
            Return(_) => "RETURN",
            NewObj { .. } => "NEWOBJ",
            GetField { .. } => "GETFIELD",
            PutField { .. } => "PUTFIELD",
            GetGlobal { .. } => "GETGLOBAL",
            PutGlobal { .. } => "PUTGLOBAL",
            MEnter(_) => "MENTER",
            MExit(_) => "MEXIT",
            MWait(_) => "MWAIT",
            MNotify(_) => "MNOTIFY",
            MNotifyAll(_) => "MNOTIFYALL",
            Sleep(_) => "SLEEP",
            Spawn { .. } => "SPAWN",
            Print(_) => "PRINT",
            Checkpoint => "CHECKPOINT",
            ApcInit => "APCINIT",
            ApcSet(_) => "APCSET",
            Dispatch(_) => "DISPATCH",
            MInvokeEnter(_) => "MINVOKE_ENTER",
            MInvokeExit(_) => "MINVOKE_EXIT",
            MInvokeWait(_) => "MINVOKE_WAIT",
            MInvokeNotify(_) => "MINVOKE_NOTIFY",
            MInvokeNotifyAll(_) => "MINVOKE_NOTIFYALL",
        }
    }

    /// Instructions at which a thread may park; the APC counts exactly these.
    pub fn is_invoke_class(&self) -> bool {
        use Instr::*;
        matches!(
            self,
            Invoke { .. }
                | Spawn { .. }
                | Sleep(_)
                | Checkpoint
                | MInvokeEnter(_)
                | MInvokeExit(_)
                | MInvokeWait(_)
                | MInvokeNotify(_)
                | MInvokeNotifyAll(_)
        )
    }

    /// Source opcodes that become invoke-class after instrumentation (`V` in the size identity).
    pub fn is_original_invoke_class(&self) -> bool {
        use Instr::*;
        matches!(
            self,
            Invoke { .. }
                | Spawn { .. }
                | Sleep(_)
                | MEnter(_)
                | MExit(_)
                | MWait(_)
                | MNotify(_)
                | MNotifyAll(_)
        )
    }

    pub fn is_instrumentation_only(&self) -> bool {
        use Instr::*;
        matches!(
            self,
            Checkpoint
                | ApcInit
                | ApcSet(_)
                | Dispatch(_)
                | MInvokeEnter(_)
                | MInvokeExit(_)
                | MInvokeWait(_)
                | MInvokeNotify(_)
                | MInvokeNotifyAll(_)
        )
    }

    /// Monitor operation and object local for either monitor opcode family.
    pub fn monitor_op(&self) -> Option<(MonitorOp, Local)> {
        use Instr::*;
        Some(match self {
            MEnter(l) | MInvokeEnter(l) => (MonitorOp::Enter, *l),
            MExit(l) | MInvokeExit(l) => (MonitorOp::Exit, *l),
            MWait(l) | MInvokeWait(l) => (MonitorOp::Wait, *l),
            MNotify(l) | MInvokeNotify(l) => (MonitorOp::Notify, *l),
            MNotifyAll(l) | MInvokeNotifyAll(l) => (MonitorOp::NotifyAll, *l),
            _ => return None,
        })
    }

    /// Does control never continue to `pc + 1`?
    pub fn is_terminator(&self) -> bool {
        matches!(self, Instr::Jmp(_) | Instr::Return(_))
    }

    /// Explicit branch targets (not including fall-through).
    pub fn branch_targets(&self) -> Vec<Pc> {
        match self {
            Instr::Jmp(t) | Instr::JmpIf(t) => vec![*t],
            Instr::Dispatch(table) => table.clone(),
            _ => Vec::new(),
        }
    }

    pub fn branch_targets_mut(&mut self) -> Vec<&mut Pc> {
        match self {
            Instr::Jmp(t) | Instr::JmpIf(t) => vec![t],
            Instr::Dispatch(table) => table.iter_mut().collect(),
            _ => Vec::new(),
        }
    }

    /// Stack slots consumed and produced.
    pub fn stack_effect(&self) -> (u32, u32) {
        use Instr::*;
        match self {
            Const(_) | Load(_) => (0, 1),
            Store(_) | JmpIf(_) => (1, 0),
            Add | Sub | Mul | Div | Mod | Eq | Lt | Le | And | Or => (2, 1),
            Not => (1, 1),
            _ => (0, 0),
        }
    }

    /// Every local slot named by the instruction's operands.
    pub fn locals(&self) -> Vec<Local> {
        use Instr::*;
        match self {
            Load(l) | Store(l) | MEnter(l) | MExit(l) | MWait(l) | MNotify(l) | MNotifyAll(l)
            | Sleep(l) | Print(l) | MInvokeEnter(l) | MInvokeExit(l) | MInvokeWait(l)
            | MInvokeNotify(l) | MInvokeNotifyAll(l) => vec![*l],
            Invoke { args, ret, .. } => args.iter().copied().chain(*ret).collect(),
            Spawn { args, dst, .. } => args.iter().copied().chain(*dst).collect(),
            Return(l) => l.iter().copied().collect(),
            NewObj { dst, .. } => vec![*dst],
            GetField { obj, dst, .. } => vec![*obj, *dst],
            PutField { obj, src, .. } => vec![*obj, *src],
            GetGlobal { dst, .. } => vec![*dst],
            PutGlobal { src, .. } => vec![*src],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Instr {
    /// Assembly form with numeric branch targets.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::asm::render_instr(self, &|pc| pc.to_string()))
    }
}
