//! Image encoding.
//!
//! `"DGEI"`, u16 version, entity id, program hash, status byte (always SUSPENDED), clock, next
//! tid, then the u32-counted global, heap, monitor and thread sections, then a SHA-256 of
//! everything before it so a damaged image is refused instead of restored.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bytes::{ReadError, Reader, Writer};
use crate::isa::ObjRef;
use crate::vm::HeapObject;

use super::{ExecutionImage, FrameImage, Malformed, MonitorImage, ParkKind, ThreadImage};

pub const IMAGE_MAGIC: &[u8; 4] = b"DGEI";
pub const IMAGE_VERSION: u16 = 1;
const STATUS_SUSPENDED: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ImageDecodeError {
    #[error("bad magic (expected \"DGEI\")")]
    BadMagic,
    #[error("unsupported image version {0}")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("control status {0} is not SUSPENDED")]
    BadStatus(u8),
    #[error("unknown park kind {0}")]
    BadParkKind(u8),
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("image checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed image: {0}")]
    Invalid(Malformed),
}

impl ImageDecodeError {
    pub fn is_truncated(&self) -> bool {
        matches!(self, ImageDecodeError::Read(ReadError::Truncated { .. }))
    }
}

fn encode_body(img: &ExecutionImage) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(IMAGE_MAGIC);
    w.u16(IMAGE_VERSION);
    w.str16(&img.entity_id);
    w.raw(&img.program_hash);
    w.u8(STATUS_SUSPENDED);
    w.u64(img.clock);
    w.u32(img.next_tid);

    w.len_u32(img.globals.len());
    for (name, v) in &img.globals {
        w.str16(name);
        w.value(v);
    }

    w.len_u32(img.heap.len());
    for o in &img.heap {
        w.u32(o.id.0);
        w.str16(&o.class);
        w.len_u32(o.fields.len());
        for v in &o.fields {
            w.value(v);
        }
    }

    w.len_u32(img.monitors.len());
    for m in &img.monitors {
        w.u32(m.obj.0);
        w.opt_u32(m.owner);
        w.u32(m.recursion);
        w.len_u32(m.entry_order.len());
        for t in &m.entry_order {
            w.u32(*t);
        }
        w.len_u32(m.wait_order.len());
        for (t, saved) in &m.wait_order {
            w.u32(*t);
            w.u32(*saved);
        }
    }

    w.len_u32(img.threads.len());
    for t in &img.threads {
        w.u32(t.tid);
        match &t.park {
            ParkKind::ExecBlocked => w.u8(0),
            ParkKind::MonitorEntry { obj, reacquire } => {
                w.u8(1);
                w.u32(obj.0);
                w.opt_u32(*reacquire);
            }
            ParkKind::MonitorWait { obj } => {
                w.u8(2);
                w.u32(obj.0);
            }
            ParkKind::Sleeping { remaining_ms } => {
                w.u8(3);
                w.u64(*remaining_ms);
            }
        }
        w.len_u32(t.frames.len());
        for f in &t.frames {
            w.str16(&f.method);
            w.i64(f.apc);
            w.len_u32(f.locals.len());
            for v in &f.locals {
                w.value(v);
            }
        }
    }
    w.into_bytes()
}

pub fn encode_image(img: &ExecutionImage) -> Vec<u8> {
    let mut body = encode_body(img);
    let sum = Sha256::digest(&body);
    body.extend_from_slice(&sum);
    body
}

pub fn decode_image(bytes: &[u8]) -> Result<ExecutionImage, ImageDecodeError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| ImageDecodeError::BadMagic)? != IMAGE_MAGIC {
        return Err(ImageDecodeError::BadMagic);
    }
    let version = r.u16()?;
    if version != IMAGE_VERSION {
        return Err(ImageDecodeError::UnsupportedVersion(version));
    }
    let entity_id = r.str16()?;
    let program_hash = r.hash32()?;
    let status = r.u8()?;
    if status != STATUS_SUSPENDED {
        return Err(ImageDecodeError::BadStatus(status));
    }
    let clock = r.u64()?;
    let next_tid = r.u32()?;

    let globals = (0..r.count(3)?)
        .map(|_| Ok((r.str16()?, r.value()?)))
        .collect::<Result<Vec<_>, ReadError>>()?;

    let mut heap = Vec::new();
    for _ in 0..r.count(10)? {
        let id = ObjRef(r.u32()?);
        let class = r.str16()?;
        let fields = (0..r.count(1)?)
            .map(|_| r.value())
            .collect::<Result<Vec<_>, _>>()?;
        heap.push(HeapObject { id, class, fields });
    }

    let mut monitors = Vec::new();
    for _ in 0..r.count(17)? {
        let obj = ObjRef(r.u32()?);
        let owner = r.opt_u32()?;
        let recursion = r.u32()?;
        let entry_order = (0..r.count(4)?)
            .map(|_| r.u32())
            .collect::<Result<Vec<_>, _>>()?;
        let wait_order = (0..r.count(8)?)
            .map(|_| Ok((r.u32()?, r.u32()?)))
            .collect::<Result<Vec<_>, ReadError>>()?;
        monitors.push(MonitorImage {
            obj,
            owner,
            recursion,
            entry_order,
            wait_order,
        });
    }

    let mut threads = Vec::new();
    for _ in 0..r.count(9)? {
        let tid = r.u32()?;
        let park = match r.u8()? {
            0 => ParkKind::ExecBlocked,
            1 => ParkKind::MonitorEntry {
                obj: ObjRef(r.u32()?),
                reacquire: r.opt_u32()?,
            },
            2 => ParkKind::MonitorWait {
                obj: ObjRef(r.u32()?),
            },
            3 => ParkKind::Sleeping {
                remaining_ms: r.u64()?,
            },
            k => return Err(ImageDecodeError::BadParkKind(k)),
        };
        let mut frames = Vec::new();
        for _ in 0..r.count(14)? {
            let method = r.str16()?;
            let apc = r.i64()?;
            let locals = (0..r.count(1)?)
                .map(|_| r.value())
                .collect::<Result<Vec<_>, _>>()?;
            frames.push(FrameImage { method, apc, locals });
        }
        threads.push(ThreadImage { tid, park, frames });
    }

    let body_len = r.pos();
    let sum = r.hash32()?;
    if !r.is_empty() {
        return Err(ImageDecodeError::TrailingBytes(r.remaining()));
    }
    if Sha256::digest(&bytes[..body_len]).as_slice() != sum {
        return Err(ImageDecodeError::ChecksumMismatch);
    }

    let img = ExecutionImage {
        entity_id,
        program_hash,
        clock,
        next_tid,
        globals,
        heap,
        monitors,
        threads,
    };
    img.check_structure().map_err(ImageDecodeError::Invalid)?;
    Ok(img)
}
