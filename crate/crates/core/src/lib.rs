//! A migratable mini virtual machine.
//!
//! Programs in a small stack bytecode are instrumented at load time with execution checkpoints,
//! an artificial program counter and mobile monitors. The interpreter can then suspend every
//! virtual thread at a checkpoint, capture the whole entity into a portable [`image`], and
//! restore it elsewhere to continue exactly where it stopped.

pub mod bytes;
pub mod isa;
pub mod instrument;
pub mod vm;
pub mod image;
pub mod sweep;
pub mod overhead;
