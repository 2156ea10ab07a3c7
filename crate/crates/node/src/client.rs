use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::entity::ShellState;
use crate::wire::{read_message, write_message, ControlOp, EntityStatus, ErrorCode, Message, WireError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("connection closed before a response arrived")]
    Closed,
    #[error("{code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected response kind {0}")]
    Unexpected(u8),
    #[error("timed out waiting for `{0}`")]
    Timeout(String),
}

impl ClientError {
    /// The node answered with an ERROR frame.
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Client, ClientError> {
        Client::connect_timeout(addr, Duration::from_secs(5))
    }

    /// Connects with `timeout` bounding both the connect and every later response.
    pub fn connect_timeout(addr: &str, timeout: Duration) -> Result<Client, ClientError> {
        let err = |source| ClientError::Connect {
            addr: addr.to_string(),
            source,
        };
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing");
        for sa in addr.to_socket_addrs().map_err(err)? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true).map_err(err)?;
                    stream.set_read_timeout(Some(timeout)).map_err(err)?;
                    let reader = BufReader::new(stream.try_clone().map_err(err)?);
                    return Ok(Client { reader, stream });
                }
                Err(e) => last = e,
            }
        }
        Err(err(last))
    }

    /// Sends raw frame bytes (length prefix included) and reads one response.
    pub fn raw(&mut self, bytes: &[u8]) -> Result<Message, ClientError> {
        io::Write::write_all(&mut self.stream, bytes).map_err(WireError::Io)?;
        self.response()
    }

    fn response(&mut self) -> Result<Message, ClientError> {
        match read_message(&mut self.reader)? {
            None => Err(ClientError::Closed),
            Some(Message::Error { code, message }) => Err(ClientError::Remote { code, message }),
            Some(m) => Ok(m),
        }
    }

    pub fn request(&mut self, m: &Message) -> Result<Message, ClientError> {
        write_message(&mut self.stream, m).map_err(WireError::Io)?;
        self.response()
    }

    /// Submits a program; an empty `entity` lets the node name it.
    pub fn submit(&mut self, entity: &str, program: Vec<u8>) -> Result<String, ClientError> {
        match self.request(&Message::Submit {
            entity: entity.into(),
            program,
        })? {
            Message::SubmitOk { entity } => Ok(entity),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    pub fn control(&mut self, entity: &str, op: ControlOp) -> Result<ShellState, ClientError> {
        match self.request(&Message::Control {
            entity: entity.into(),
            op,
        })? {
            Message::ControlOk { state, .. } => Ok(state),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    /// Returns the image size the destination acknowledged.
    pub fn migrate(&mut self, entity: &str, destination: &str) -> Result<u32, ClientError> {
        match self.request(&Message::Migrate {
            entity: entity.into(),
            destination: destination.into(),
        })? {
            Message::TransferOk { image_bytes, .. } => Ok(image_bytes),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    pub fn transfer(&mut self, entity: &str, program: Vec<u8>, image: Vec<u8>) -> Result<u32, ClientError> {
        match self.request(&Message::Transfer {
            entity: entity.into(),
            program,
            image,
        })? {
            Message::TransferOk { image_bytes, .. } => Ok(image_bytes),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    /// Every entity when `entity` is empty.
    pub fn status(&mut self, entity: &str) -> Result<Vec<EntityStatus>, ClientError> {
        match self.request(&Message::StatusReq {
            entity: entity.into(),
        })? {
            Message::StatusResp { entities } => Ok(entities),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    pub fn output(&mut self, entity: &str) -> Result<(ShellState, Vec<String>), ClientError> {
        match self.request(&Message::OutputReq {
            entity: entity.into(),
        })? {
            Message::OutputResp { state, lines, .. } => Ok((state, lines)),
            other => Err(ClientError::Unexpected(other.kind())),
        }
    }

    /// Polls until the entity is in one of `states`.
    pub fn wait_for(
        &mut self,
        entity: &str,
        states: &[ShellState],
        timeout: Duration,
    ) -> Result<ShellState, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self
                .status(entity)?
                .first()
                .map(|s| s.state)
                .ok_or_else(|| ClientError::Timeout(entity.into()))?;
            if states.contains(&s) {
                return Ok(s);
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(entity.into()));
            }
            thread::sleep(Duration::from_millis(2));
        }
    }
}
