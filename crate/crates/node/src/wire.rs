//! Node wire protocol.
//!
//! A frame is a u32 little-endian length followed by that many bytes: one kind byte and the
//! kind's payload. Integers and strings use the same encoding as the program format. Every
//! request gets exactly one response frame.

use std::io::{self, Read, Write};

use mvm::bytes::{ReadError, Reader, Writer};
use serde::Serialize;
use thiserror::Error;

use crate::entity::ShellState;

/// Frames larger than this are refused without reading the payload.
pub const MAX_FRAME: u32 = 64 << 20;

pub mod kind {
    pub const SUBMIT: u8 = 1;
    pub const SUBMIT_OK: u8 = 2;
    pub const CONTROL: u8 = 3;
    pub const CONTROL_OK: u8 = 4;
    pub const MIGRATE: u8 = 5;
    pub const TRANSFER: u8 = 6;
    pub const TRANSFER_OK: u8 = 7;
    pub const STATUS_REQ: u8 = 8;
    pub const STATUS_RESP: u8 = 9;
    pub const OUTPUT_REQ: u8 = 10;
    pub const OUTPUT_RESP: u8 = 11;
    pub const ERROR: u8 = 12;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownKind = 1,
    MalformedFrame = 2,
    UnknownEntity = 3,
    DuplicateEntity = 4,
    VerificationFailed = 5,
    IllegalTransition = 6,
    DestinationUnreachable = 7,
    TransferRejected = 8,
    HashMismatch = 9,
    MalformedImage = 10,
    MalformedProgram = 11,
    EntityFailed = 12,
    Internal = 13,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => UnknownKind,
            2 => MalformedFrame,
            3 => UnknownEntity,
            4 => DuplicateEntity,
            5 => VerificationFailed,
            6 => IllegalTransition,
            7 => DestinationUnreachable,
            8 => TransferRejected,
            9 => HashMismatch,
            10 => MalformedImage,
            11 => MalformedProgram,
            12 => EntityFailed,
            13 => Internal,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlOp {
    Start = 1,
    Stop = 2,
    Suspend = 3,
    Resume = 4,
}

impl ControlOp {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "start" => ControlOp::Start,
            "stop" => ControlOp::Stop,
            "suspend" => ControlOp::Suspend,
            "resume" => ControlOp::Resume,
            _ => return None,
        })
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => ControlOp::Start,
            2 => ControlOp::Stop,
            3 => ControlOp::Suspend,
            4 => ControlOp::Resume,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EntityStatus {
    pub entity: String,
    pub state: ShellState,
    pub clock: u64,
    pub instructions: u64,
    #[serde(rename = "outputLines")]
    pub output_lines: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// An empty `entity` asks the node to pick one.
    Submit { entity: String, program: Vec<u8> },
    SubmitOk { entity: String },
    Control { entity: String, op: ControlOp },
    ControlOk { entity: String, state: ShellState },
    Migrate { entity: String, destination: String },
    Transfer { entity: String, program: Vec<u8>, image: Vec<u8> },
    TransferOk { entity: String, image_bytes: u32 },
    /// An empty `entity` asks for every entity.
    StatusReq { entity: String },
    StatusResp { entities: Vec<EntityStatus> },
    OutputReq { entity: String },
    OutputResp { entity: String, state: ShellState, lines: Vec<String> },
    Error { code: ErrorCode, message: String },
}

impl Message {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> u8 {
        match self {
            Message::Submit { .. } => kind::SUBMIT,
            Message::SubmitOk { .. } => kind::SUBMIT_OK,
            Message::Control { .. } => kind::CONTROL,
            Message::ControlOk { .. } => kind::CONTROL_OK,
            Message::Migrate { .. } => kind::MIGRATE,
            Message::Transfer { .. } => kind::TRANSFER,
            Message::TransferOk { .. } => kind::TRANSFER_OK,
            Message::StatusReq { .. } => kind::STATUS_REQ,
            Message::StatusResp { .. } => kind::STATUS_RESP,
            Message::OutputReq { .. } => kind::OUTPUT_REQ,
            Message::OutputResp { .. } => kind::OUTPUT_RESP,
            Message::Error { .. } => kind::ERROR,
        }
    }

    /// Kind byte and payload, without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind());
        match self {
            Message::Submit { entity, program } => {
                w.str16(entity);
                w.blob(program);
            }
            Message::SubmitOk { entity }
            | Message::StatusReq { entity }
            | Message::OutputReq { entity } => w.str16(entity),
            Message::Control { entity, op } => {
                w.str16(entity);
                w.u8(*op as u8);
            }
            Message::ControlOk { entity, state } => {
                w.str16(entity);
                w.u8(*state as u8);
            }
            Message::Migrate {
                entity,
                destination,
            } => {
                w.str16(entity);
                w.str16(destination);
            }
            Message::Transfer {
                entity,
                program,
                image,
            } => {
                w.str16(entity);
                w.blob(program);
                w.blob(image);
            }
            Message::TransferOk {
                entity,
                image_bytes,
            } => {
                w.str16(entity);
                w.u32(*image_bytes);
            }
            Message::StatusResp { entities } => {
                w.len_u32(entities.len());
                for e in entities {
                    w.str16(&e.entity);
                    w.u8(e.state as u8);
                    w.u64(e.clock);
                    w.u64(e.instructions);
                    w.u32(e.output_lines);
                }
            }
            Message::OutputResp {
                entity,
                state,
                lines,
            } => {
                w.str16(entity);
                w.u8(*state as u8);
                w.len_u32(lines.len());
                for l in lines {
                    w.str32(l);
                }
            }
            Message::Error { code, message } => {
                w.u16(*code as u16);
                w.str32(message);
            }
        }
        w.into_bytes()
    }

    pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
        let (&k, body) = frame.split_first().ok_or(WireError::Empty)?;
        let mut r = Reader::new(body);
        let state = |r: &mut Reader| {
            let v = r.u8()?;
            ShellState::from_u8(v).ok_or(WireError::BadField("shell state", v as u32))
        };
        let msg = match k {
            kind::SUBMIT => Message::Submit {
                entity: r.str16()?,
                program: r.blob()?,
            },
            kind::SUBMIT_OK => Message::SubmitOk { entity: r.str16()? },
            kind::CONTROL => {
                let entity = r.str16()?;
                let v = r.u8()?;
                let op = ControlOp::from_u8(v).ok_or(WireError::BadField("control op", v as u32))?;
                Message::Control { entity, op }
            }
            kind::CONTROL_OK => Message::ControlOk {
                entity: r.str16()?,
                state: state(&mut r)?,
            },
            kind::MIGRATE => Message::Migrate {
                entity: r.str16()?,
                destination: r.str16()?,
            },
            kind::TRANSFER => Message::Transfer {
                entity: r.str16()?,
                program: r.blob()?,
                image: r.blob()?,
            },
            kind::TRANSFER_OK => Message::TransferOk {
                entity: r.str16()?,
                image_bytes: r.u32()?,
            },
            kind::STATUS_REQ => Message::StatusReq { entity: r.str16()? },
            kind::STATUS_RESP => {
                let mut entities = Vec::new();
                for _ in 0..r.count(24)? {
                    entities.push(EntityStatus {
                        entity: r.str16()?,
                        state: state(&mut r)?,
                        clock: r.u64()?,
                        instructions: r.u64()?,
                        output_lines: r.u32()?,
                    });
                }
                Message::StatusResp { entities }
            }
            kind::OUTPUT_REQ => Message::OutputReq { entity: r.str16()? },
            kind::OUTPUT_RESP => {
                let entity = r.str16()?;
                let state = state(&mut r)?;
                let lines = (0..r.count(4)?)
                    .map(|_| r.str32())
                    .collect::<Result<Vec<_>, _>>()?;
                Message::OutputResp {
                    entity,
                    state,
                    lines,
                }
            }
            kind::ERROR => {
                let v = r.u16()?;
                let code = ErrorCode::from_u16(v).ok_or(WireError::BadField("error code", v as u32))?;
                Message::Error {
                    code,
                    message: r.str32()?,
                }
            }
            other => return Err(WireError::UnknownKind(other)),
        };
        if !r.is_empty() {
            return Err(WireError::TrailingBytes(r.remaining()));
        }
        Ok(msg)
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("empty frame")]
    Empty,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error("bad {0} {1}")]
    BadField(&'static str, u32),
    #[error("{0} bytes left over after the payload")]
    TrailingBytes(usize),
}

impl WireError {
    /// The stream is still aligned on a frame boundary after this error.
    pub fn recoverable(&self) -> bool {
        !matches!(self, WireError::Io(_) | WireError::TooLarge(_))
    }

    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::UnknownKind(_) => ErrorCode::UnknownKind,
            _ => ErrorCode::MalformedFrame,
        }
    }
}

pub fn write_raw(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    let len = u32::try_from(frame.len()).map_err(|_| io::Error::other("frame too large"))?;
    let mut buf = Vec::with_capacity(4 + frame.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(frame);
    w.write_all(&buf)?;
    w.flush()
}

pub fn write_message(w: &mut impl Write, m: &Message) -> io::Result<()> {
    write_raw(w, &m.encode())
}

/// Reads one frame. `Ok(None)` means the peer closed the connection between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn read_message(r: &mut impl Read) -> Result<Option<Message>, WireError> {
    match read_frame(r)? {
        Some(f) => Message::decode(&f).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples() -> Vec<Message> {
        vec![
            Message::Submit {
                entity: "e1".into(),
                program: vec![1, 2, 3],
            },
            Message::SubmitOk { entity: "e1".into() },
            Message::Control {
                entity: "e1".into(),
                op: ControlOp::Suspend,
            },
            Message::ControlOk {
                entity: "e1".into(),
                state: ShellState::Suspended,
            },
            Message::Migrate {
                entity: "e1".into(),
                destination: "127.0.0.1:7102".into(),
            },
            Message::Transfer {
                entity: "e1".into(),
                program: vec![9; 10],
                image: vec![7; 20],
            },
            Message::TransferOk {
                entity: "e1".into(),
                image_bytes: 20,
            },
            Message::StatusReq { entity: String::new() },
            Message::StatusResp {
                entities: vec![EntityStatus {
                    entity: "e1".into(),
                    state: ShellState::Running,
                    clock: 5,
                    instructions: 99,
                    output_lines: 2,
                }],
            },
            Message::OutputReq { entity: "e1".into() },
            Message::OutputResp {
                entity: "e1".into(),
                state: ShellState::Done,
                lines: vec!["1".into(), "hello".into()],
            },
            Message::error(ErrorCode::UnknownEntity, "no entity e9"),
        ]
    }

    #[test]
    fn every_kind_round_trips() {
        for (i, m) in samples().into_iter().enumerate() {
            assert_eq!(m.kind() as usize, i + 1);
            let mut buf = Vec::new();
            write_message(&mut buf, &m).unwrap();
            assert_eq!(u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize, buf.len() - 4);
            assert_eq!(read_message(&mut buf.as_slice()).unwrap(), Some(m));
        }
    }

    #[test]
    fn unknown_kind_is_recoverable() {
        let e = Message::decode(&[42, 0, 0]).unwrap_err();
        assert_eq!(e.code(), ErrorCode::UnknownKind);
        assert!(e.recoverable());
    }

    #[test]
    fn oversized_length_is_refused_before_reading() {
        let mut b = (MAX_FRAME + 1).to_le_bytes().to_vec();
        b.push(kind::STATUS_REQ);
        assert!(matches!(read_frame(&mut b.as_slice()), Err(WireError::TooLarge(_))));
    }

    proptest! {
        #[test]
        fn damaged_frames_never_panic(i in any::<prop::sample::Index>(), at in any::<usize>(), x in 1u8..=255) {
            let ms = samples();
            let mut f = ms[i.index(ms.len())].encode();
            let n = f.len();
            f[at % n] ^= x;
            let _ = Message::decode(&f);
            let _ = Message::decode(&f[..at % n]);
        }
    }
}
