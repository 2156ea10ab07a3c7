//! Canonical binary program encoding.
//!
//! Layout: `"MVMP"`, u16 version, entry name, then the class, global and method sections (each
//! u32-counted), then a 32-byte SHA-256 of everything before it. Integers are little-endian and
//! identifiers are u16-length-prefixed UTF-8. Maps are written in key order so a program has
//! exactly one encoding.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::instr::Instr;
use super::program::{MethodDef, Program, ProgramError, FORMAT_VERSION};
use crate::bytes::{ReadError, Reader, Writer};

pub const PROGRAM_MAGIC: &[u8; 4] = b"MVMP";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic (expected \"MVMP\")")]
    BadMagic,
    #[error("unsupported program format version {0}")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("unknown opcode {opcode:#04x} at offset {offset}")]
    BadOpcode { opcode: u8, offset: usize },
    #[error("{0} trailing bytes after content hash")]
    TrailingBytes(usize),
    #[error("content hash does not match the encoded program")]
    HashMismatch,
    #[error("duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error(transparent)]
    Invalid(#[from] ProgramError),
}

impl DecodeError {
    pub fn is_truncated(&self) -> bool {
        matches!(self, DecodeError::Read(ReadError::Truncated { .. }))
    }
}

mod op {
    pub const CONST: u8 = 0x01;
    pub const LOAD: u8 = 0x02;
    pub const STORE: u8 = 0x03;
    pub const ADD: u8 = 0x10;
    pub const SUB: u8 = 0x11;
    pub const MUL: u8 = 0x12;
    pub const DIV: u8 = 0x13;
    pub const MOD: u8 = 0x14;
    pub const EQ: u8 = 0x15;
    pub const LT: u8 = 0x16;
    pub const LE: u8 = 0x17;
    pub const NOT: u8 = 0x18;
    pub const AND: u8 = 0x19;
    pub const OR: u8 = 0x1a;
    pub const JMP: u8 = 0x20;
    pub const JMPIF: u8 = 0x21;
    pub const INVOKE: u8 = 0x30;
    pub const RETURN: u8 = 0x31;
    pub const NEWOBJ: u8 = 0x40;
    pub const GETFIELD: u8 = 0x41;
    pub const PUTFIELD: u8 = 0x42;
    pub const GETGLOBAL: u8 = 0x43;
    pub const PUTGLOBAL: u8 = 0x44;
    pub const MENTER: u8 = 0x50;
    pub const MEXIT: u8 = 0x51;
    pub const MWAIT: u8 = 0x52;
    pub const MNOTIFY: u8 = 0x53;
    pub const MNOTIFYALL: u8 = 0x54;
    pub const SLEEP: u8 = 0x60;
    pub const SPAWN: u8 = 0x61;
    pub const PRINT: u8 = 0x62;
    pub const CHECKPOINT: u8 = 0x80;
    pub const APCINIT: u8 = 0x81;
    pub const APCSET: u8 = 0x82;
    pub const DISPATCH: u8 = 0x83;
    pub const MINVOKE_ENTER: u8 = 0x90;
    pub const MINVOKE_EXIT: u8 = 0x91;
    pub const MINVOKE_WAIT: u8 = 0x92;
    pub const MINVOKE_NOTIFY: u8 = 0x93;
    pub const MINVOKE_NOTIFYALL: u8 = 0x94;
}

fn write_locals(w: &mut Writer, locals: &[u16]) {
    w.u16(u16::try_from(locals.len()).expect("too many call arguments"));
    for l in locals {
        w.u16(*l);
    }
}

fn write_instr(w: &mut Writer, i: &Instr) {
    use Instr::*;
    match i {
        Const(v) => {
            w.u8(op::CONST);
            w.value(v);
        }
        Load(l) => {
            w.u8(op::LOAD);
            w.u16(*l);
        }
        Store(l) => {
            w.u8(op::STORE);
            w.u16(*l);
        }
        Add => w.u8(op::ADD),
        Sub => w.u8(op::SUB),
        Mul => w.u8(op::MUL),
        Div => w.u8(op::DIV),
        Mod => w.u8(op::MOD),
        Eq => w.u8(op::EQ),
        Lt => w.u8(op::LT),
        Le => w.u8(op::LE),
        Not => w.u8(op::NOT),
        And => w.u8(op::AND),
        Or => w.u8(op::OR),
        Jmp(t) => {
            w.u8(op::JMP);
            w.u32(*t);
        }
        JmpIf(t) => {
            w.u8(op::JMPIF);
            w.u32(*t);
        }
        Invoke { method, args, ret } => {
            w.u8(op::INVOKE);
            w.str16(method);
            write_locals(w, args);
            w.opt_u16(*ret);
        }
        Return(l) => {
            w.u8(op::RETURN);
            w.opt_u16(*l);
        }
        NewObj { class, dst } => {
            w.u8(op::NEWOBJ);
            w.str16(class);
            w.u16(*dst);
        }
        GetField { obj, field, dst } => {
            w.u8(op::GETFIELD);
            w.u16(*obj);
            w.str16(field);
            w.u16(*dst);
        }
        PutField { obj, field, src } => {
            w.u8(op::PUTFIELD);
            w.u16(*obj);
            w.str16(field);
            w.u16(*src);
        }
        GetGlobal { name, dst } => {
            w.u8(op::GETGLOBAL);
            w.str16(name);
            w.u16(*dst);
        }
        PutGlobal { name, src } => {
            w.u8(op::PUTGLOBAL);
            w.str16(name);
            w.u16(*src);
        }
        MEnter(l) => {
            w.u8(op::MENTER);
            w.u16(*l);
        }
        MExit(l) => {
            w.u8(op::MEXIT);
            w.u16(*l);
        }
        MWait(l) => {
            w.u8(op::MWAIT);
            w.u16(*l);
        }
        MNotify(l) => {
            w.u8(op::MNOTIFY);
            w.u16(*l);
        }
        MNotifyAll(l) => {
            w.u8(op::MNOTIFYALL);
            w.u16(*l);
        }
        Sleep(l) => {
            w.u8(op::SLEEP);
            w.u16(*l);
        }
        Spawn { method, args, dst } => {
            w.u8(op::SPAWN);
            w.str16(method);
            write_locals(w, args);
            w.opt_u16(*dst);
        }
        Print(l) => {
            w.u8(op::PRINT);
            w.u16(*l);
        }
        Checkpoint => w.u8(op::CHECKPOINT),
        ApcInit => w.u8(op::APCINIT),
        ApcSet(k) => {
            w.u8(op::APCSET);
            w.u32(*k);
        }
        Dispatch(table) => {
            w.u8(op::DISPATCH);
            w.len_u32(table.len());
            for t in table {
                w.u32(*t);
            }
        }
        MInvokeEnter(l) => {
            w.u8(op::MINVOKE_ENTER);
            w.u16(*l);
        }
        MInvokeExit(l) => {
            w.u8(op::MINVOKE_EXIT);
            w.u16(*l);
        }
        MInvokeWait(l) => {
            w.u8(op::MINVOKE_WAIT);
            w.u16(*l);
        }
        MInvokeNotify(l) => {
            w.u8(op::MINVOKE_NOTIFY);
            w.u16(*l);
        }
        MInvokeNotifyAll(l) => {
            w.u8(op::MINVOKE_NOTIFYALL);
            w.u16(*l);
        }
    }
}

fn read_locals(r: &mut Reader<'_>) -> Result<Vec<u16>, ReadError> {
    let n = r.u16()? as usize;
    (0..n).map(|_| r.u16()).collect()
}

fn read_instr(r: &mut Reader<'_>) -> Result<Instr, DecodeError> {
    use Instr::*;
    let offset = r.pos();
    let opcode = r.u8()?;
    Ok(match opcode {
        op::CONST => Const(r.value()?),
        op::LOAD => Load(r.u16()?),
        op::STORE => Store(r.u16()?),
        op::ADD => Add,
        op::SUB => Sub,
        op::MUL => Mul,
        op::DIV => Div,
        op::MOD => Mod,
        op::EQ => Eq,
        op::LT => Lt,
        op::LE => Le,
        op::NOT => Not,
        op::AND => And,
        op::OR => Or,
        op::JMP => Jmp(r.u32()?),
        op::JMPIF => JmpIf(r.u32()?),
        op::INVOKE => Invoke {
            method: r.str16()?,
            args: read_locals(r)?,
            ret: r.opt_u16()?,
        },
        op::RETURN => Return(r.opt_u16()?),
        op::NEWOBJ => NewObj {
            class: r.str16()?,
            dst: r.u16()?,
        },
        op::GETFIELD => GetField {
            obj: r.u16()?,
            field: r.str16()?,
            dst: r.u16()?,
        },
        op::PUTFIELD => PutField {
            obj: r.u16()?,
            field: r.str16()?,
            src: r.u16()?,
        },
        op::GETGLOBAL => GetGlobal {
            name: r.str16()?,
            dst: r.u16()?,
        },
        op::PUTGLOBAL => PutGlobal {
            name: r.str16()?,
            src: r.u16()?,
        },
        op::MENTER => MEnter(r.u16()?),
        op::MEXIT => MExit(r.u16()?),
        op::MWAIT => MWait(r.u16()?),
        op::MNOTIFY => MNotify(r.u16()?),
        op::MNOTIFYALL => MNotifyAll(r.u16()?),
        op::SLEEP => Sleep(r.u16()?),
        op::SPAWN => Spawn {
            method: r.str16()?,
            args: read_locals(r)?,
            dst: r.opt_u16()?,
        },
        op::PRINT => Print(r.u16()?),
        op::CHECKPOINT => Checkpoint,
        op::APCINIT => ApcInit,
        op::APCSET => ApcSet(r.u32()?),
        op::DISPATCH => {
            let n = r.count(4)?;
            Dispatch((0..n).map(|_| r.u32()).collect::<Result<_, _>>()?)
        }
        op::MINVOKE_ENTER => MInvokeEnter(r.u16()?),
        op::MINVOKE_EXIT => MInvokeExit(r.u16()?),
        op::MINVOKE_WAIT => MInvokeWait(r.u16()?),
        op::MINVOKE_NOTIFY => MInvokeNotify(r.u16()?),
        op::MINVOKE_NOTIFYALL => MInvokeNotifyAll(r.u16()?),
        opcode => return Err(DecodeError::BadOpcode { opcode, offset }),
    })
}

/// Everything except the trailing hash.
pub fn encode_body(p: &Program) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(PROGRAM_MAGIC);
    w.u16(p.format_version);
    w.str16(&p.entry);

    w.len_u32(p.classes.len());
    for (name, fields) in &p.classes {
        w.str16(name);
        w.u16(u16::try_from(fields.len()).expect("too many fields"));
        for f in fields {
            w.str16(f);
        }
    }

    w.len_u32(p.globals.len());
    for g in &p.globals {
        w.str16(g);
    }

    w.len_u32(p.methods.len());
    for m in p.methods.values() {
        w.str16(&m.name);
        w.u16(m.param_count);
        w.u16(m.local_count);
        w.u8(m.instrumented as u8);
        w.len_u32(m.code.len());
        for i in &m.code {
            write_instr(&mut w, i);
        }
    }
    w.into_bytes()
}

pub fn hash_body(body: &[u8]) -> [u8; 32] {
    Sha256::digest(body).into()
}

pub fn encode_program(p: &Program) -> Vec<u8> {
    let mut body = encode_body(p);
    let h = hash_body(&body);
    body.extend_from_slice(&h);
    body
}

pub fn decode_program(bytes: &[u8]) -> Result<Program, DecodeError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| DecodeError::BadMagic)? != PROGRAM_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let entry = r.str16()?;

    let mut classes = BTreeMap::new();
    for _ in 0..r.count(4)? {
        let name = r.str16()?;
        let n = r.u16()? as usize;
        let fields = (0..n).map(|_| r.str16()).collect::<Result<Vec<_>, _>>()?;
        if classes.insert(name.clone(), fields).is_some() {
            return Err(DecodeError::Duplicate { what: "class", name });
        }
    }

    let globals = (0..r.count(2)?)
        .map(|_| r.str16())
        .collect::<Result<Vec<_>, _>>()?;

    let mut methods = BTreeMap::new();
    for _ in 0..r.count(11)? {
        let name = r.str16()?;
        let param_count = r.u16()?;
        let local_count = r.u16()?;
        let at = r.pos();
        let instrumented = match r.u8()? {
            0 => false,
            1 => true,
            tag => {
                return Err(ReadError::BadTag {
                    what: "instrumented flag",
                    tag,
                    offset: at,
                }
                .into())
            }
        };
        let n = r.count(1)?;
        let code = (0..n)
            .map(|_| read_instr(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let m = MethodDef::new(name.clone(), param_count, local_count, code, instrumented);
        if methods.insert(name.clone(), m).is_some() {
            return Err(DecodeError::Duplicate { what: "method", name });
        }
    }

    let body_len = r.pos();
    let stored = r.hash32()?;
    if !r.is_empty() {
        return Err(DecodeError::TrailingBytes(r.remaining()));
    }
    if hash_body(&bytes[..body_len]) != stored {
        return Err(DecodeError::HashMismatch);
    }

    let p = Program {
        format_version: version,
        classes,
        globals,
        methods,
        entry,
        content_hash: stored,
    };
    p.check_structure()?;
    Ok(p)
}
