//! Instruction set, assembly text, binary program format and the static verifier.

pub mod asm;
pub mod cfg;
pub mod codec;
mod instr;
mod program;
mod value;
pub mod verify;

pub use asm::{emit_assembly, parse_assembly, DiagCode, Diagnostic};
pub use codec::{decode_program, encode_program, DecodeError};
pub use instr::{Instr, Local, MonitorOp, Pc};
pub use program::{MethodDef, Program, ProgramError, FORMAT_VERSION};
pub use value::{ObjRef, Value};
pub use verify::{verify, Rule, VerificationReport, Violation};
