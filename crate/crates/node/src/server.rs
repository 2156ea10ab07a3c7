//! The node process: accepts connections, keeps the entity table and runs one executor thread
//! per entity. Every command for an entity goes through that entity's queue, so its effects
//! follow arrival order.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mvm::image::{capture, decode_image, encode_image, restore, RestoreError};
use mvm::instrument::instrument_program;
use mvm::isa::{decode_program, encode_program, verify};
use mvm::vm::{RunEnd, VmError, VmInstance};
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::entity::{EntityRecord, ShellState};
use crate::wire::{
    read_frame, write_message, ControlOp, EntityStatus, ErrorCode, Message, WireError,
};

/// Deliberate misbehaviour, for exercising the rollback paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip one byte of every outgoing image after encoding.
    CorruptImage,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub listen: String,
    /// Resume imported entities immediately instead of waiting for a `resume`.
    pub auto_resume: bool,
    pub quantum: u32,
    /// Pause after every executed instruction. Zero runs flat out.
    pub throttle: Duration,
    pub transfer_timeout: Duration,
    pub fault: Option<Fault>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            listen: "127.0.0.1:7100".into(),
            auto_resume: true,
            quantum: 10,
            throttle: Duration::ZERO,
            transfer_timeout: Duration::from_secs(10),
            fault: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Reply = Sender<Message>;

enum Command {
    Control(ControlOp, Reply),
    Migrate(String, Reply),
    Status(Sender<EntityStatus>),
    Output(Reply),
}

struct Handle {
    tx: Sender<Command>,
    state: Arc<AtomicU8>,
}

impl Handle {
    fn state(&self) -> ShellState {
        ShellState::from_u8(self.state.load(Ordering::Acquire)).expect("valid state")
    }
}

struct Shared {
    config: NodeConfig,
    entities: Mutex<BTreeMap<String, Handle>>,
    next_id: AtomicU64,
}

pub struct Node {
    shared: Arc<Shared>,
    listener: TcpListener,
}

impl Node {
    pub fn bind(config: NodeConfig) -> Result<Node, NodeError> {
        let listener = TcpListener::bind(&config.listen).map_err(|source| NodeError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
        Ok(Node {
            shared: Arc::new(Shared {
                config,
                entities: Mutex::new(BTreeMap::new()),
                next_id: AtomicU64::new(1),
            }),
            listener,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn serve(self) -> Result<(), NodeError> {
        for conn in self.listener.incoming() {
            let stream = conn?;
            let shared = Arc::clone(&self.shared);
            thread::spawn(move || {
                // a broken connection only affects its own client
                let _ = serve_connection(&shared, stream);
            });
        }
        Ok(())
    }

    /// Serves on a background thread and returns the bound address.
    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.serve());
        Ok(addr)
    }
}

fn serve_connection(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(None) => return Ok(()),
            Ok(Some(frame)) => match Message::decode(&frame) {
                Ok(m) => handle(shared, m),
                Err(e) => Message::error(e.code(), e.to_string()),
            },
            Err(WireError::Io(e)) => return Err(e),
            Err(e) => {
                // the stream is no longer on a frame boundary
                write_message(&mut writer, &Message::error(ErrorCode::MalformedFrame, e.to_string()))?;
                return Ok(());
            }
        };
        write_message(&mut writer, &reply)?;
    }
}

fn handle(shared: &Shared, m: Message) -> Message {
    match m {
        Message::Submit { entity, program } => submit(shared, entity, &program),
        Message::Transfer {
            entity,
            program,
            image,
        } => import(shared, entity, &program, &image),
        Message::Control { entity, op } => ask(shared, &entity, |tx| Command::Control(op, tx)),
        Message::Migrate {
            entity,
            destination,
        } => ask(shared, &entity, |tx| Command::Migrate(destination, tx)),
        Message::OutputReq { entity } => ask(shared, &entity, Command::Output),
        Message::StatusReq { entity } => status(shared, &entity),
        other => Message::error(
            ErrorCode::MalformedFrame,
            format!("message kind {} is not a request", other.kind()),
        ),
    }
}

fn unknown(entity: &str) -> Message {
    Message::error(ErrorCode::UnknownEntity, format!("no entity `{entity}` on this node"))
}

fn ask(shared: &Shared, entity: &str, cmd: impl FnOnce(Reply) -> Command) -> Message {
    let (tx, rx) = mpsc::channel();
    {
        let table = shared.entities.lock().expect("entity table poisoned");
        let Some(h) = table.get(entity) else {
            return unknown(entity);
        };
        if h.tx.send(cmd(tx)).is_err() {
            return Message::error(ErrorCode::Internal, "entity executor is gone");
        }
    }
    rx.recv()
        .unwrap_or_else(|_| Message::error(ErrorCode::Internal, "entity executor dropped the request"))
}

fn status(shared: &Shared, entity: &str) -> Message {
    let pending: Vec<_> = {
        let table = shared.entities.lock().expect("entity table poisoned");
        if !entity.is_empty() && !table.contains_key(entity) {
            return unknown(entity);
        }
        table
            .iter()
            .filter(|(id, _)| entity.is_empty() || id.as_str() == entity)
            .filter_map(|(_, h)| {
                let (tx, rx) = mpsc::channel();
                h.tx.send(Command::Status(tx)).ok().map(|_| rx)
            })
            .collect()
    };
    let entities = pending.into_iter().filter_map(|rx| rx.recv().ok()).collect();
    Message::StatusResp { entities }
}

fn register(shared: &Shared, mut rec: EntityRecord) -> Result<String, Message> {
    let mut table = shared.entities.lock().expect("entity table poisoned");
    if rec.id.is_empty() {
        rec.id = loop {
            let id = format!("e{}", shared.next_id.fetch_add(1, Ordering::Relaxed));
            if !table.contains_key(&id) {
                break id;
            }
        };
    } else if table.get(&rec.id).is_some_and(|h| h.state().is_active()) {
        return Err(Message::error(
            ErrorCode::DuplicateEntity,
            format!("entity `{}` is already active here", rec.id),
        ));
    }
    let id = rec.id.clone();
    let (tx, rx) = mpsc::channel();
    let state = Arc::new(AtomicU8::new(rec.state() as u8));
    let exec = Executor {
        rec,
        rx,
        state: Arc::clone(&state),
        config: shared.config.clone(),
    };
    thread::Builder::new()
        .name(format!("entity-{id}"))
        .spawn(move || exec.run())
        .expect("spawn executor");
    table.insert(id.clone(), Handle { tx, state });
    Ok(id)
}

fn submit(shared: &Shared, entity: String, bytes: &[u8]) -> Message {
    let p = match decode_program(bytes) {
        Ok(p) => p,
        Err(e) => return Message::error(ErrorCode::MalformedProgram, e.to_string()),
    };
    let p = if p.is_instrumented() {
        p
    } else {
        let report = verify(&p);
        if !report.is_ok() {
            return Message::error(ErrorCode::VerificationFailed, report.to_string());
        }
        match instrument_program(&p) {
            Ok((inst, _)) => inst,
            Err(e) => return Message::error(ErrorCode::VerificationFailed, e.to_string()),
        }
    };
    let vm = match VmInstance::load(&p) {
        Ok(vm) => vm.with_quantum(shared.config.quantum),
        Err(e) => return Message::error(ErrorCode::VerificationFailed, e.to_string()),
    };
    match register(shared, EntityRecord::new(entity, p, vm, ShellState::Loaded)) {
        Ok(entity) => Message::SubmitOk { entity },
        Err(m) => m,
    }
}

fn import(shared: &Shared, entity: String, program: &[u8], image: &[u8]) -> Message {
    let p = match decode_program(program) {
        Ok(p) => p,
        Err(e) => return Message::error(ErrorCode::MalformedProgram, e.to_string()),
    };
    let img = match decode_image(image) {
        Ok(img) => img,
        Err(e) => return Message::error(ErrorCode::MalformedImage, e.to_string()),
    };
    if img.entity_id != entity {
        return Message::error(
            ErrorCode::MalformedImage,
            format!("image belongs to `{}`, not `{entity}`", img.entity_id),
        );
    }
    let mut vm = match restore(&p, &img) {
        Ok(vm) => vm.with_quantum(shared.config.quantum),
        Err(RestoreError::HashMismatch) => {
            return Message::error(ErrorCode::HashMismatch, RestoreError::HashMismatch.to_string())
        }
        Err(e @ RestoreError::NotInstrumented) => {
            return Message::error(ErrorCode::MalformedProgram, e.to_string())
        }
        Err(e) => return Message::error(ErrorCode::MalformedImage, e.to_string()),
    };
    let state = if shared.config.auto_resume {
        vm.exec_resume().expect("restored VM is suspended");
        ShellState::Running
    } else {
        ShellState::Imported
    };
    let image_bytes = image.len() as u32;
    match register(shared, EntityRecord::new(entity, p, vm, state)) {
        Ok(entity) => Message::TransferOk {
            entity,
            image_bytes,
        },
        Err(m) => m,
    }
}

/// Why an entity could not be brought to a fully parked, suspended state.
enum DrainError {
    Finished,
    Failed(String),
}

struct Executor {
    rec: EntityRecord,
    rx: Receiver<Command>,
    state: Arc<AtomicU8>,
    config: NodeConfig,
}

impl Executor {
    fn run(mut self) {
        loop {
            let cmd = if self.rec.state() == ShellState::Running {
                match self.rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                }
            } else {
                match self.rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                }
            };
            match cmd {
                Some(c) => self.handle(c),
                None => self.slice(),
            }
        }
    }

    fn set(&mut self, to: ShellState) -> Result<(), Message> {
        let r = self
            .rec
            .transition(to)
            .map_err(|e| Message::error(ErrorCode::IllegalTransition, e.to_string()));
        self.state.store(self.rec.state() as u8, Ordering::Release);
        r
    }

    fn vm(&mut self) -> &mut VmInstance {
        self.rec.vm.as_mut().expect("active entity has a VM")
    }

    fn fail(&mut self, why: String) {
        self.rec.failure = Some(why);
        let _ = self.set(ShellState::Failed);
    }

    /// Runs the entity for a little while.
    fn slice(&mut self) {
        let steps = if self.config.throttle.is_zero() { 256 } else { 1 };
        match self.vm().run(steps) {
            Ok(RunEnd::Done) => {
                let _ = self.set(ShellState::Done);
            }
            Ok(RunEnd::Parked) => self.fail("deadlock: no thread can run".into()),
            Err(VmError::StepLimit(_)) => {}
            Err(e) => self.fail(e.to_string()),
        }
        if !self.config.throttle.is_zero() {
            thread::sleep(self.config.throttle);
        }
    }

    /// Raises the suspend flag and runs until every thread has parked.
    fn drain(&mut self) -> Result<(), DrainError> {
        self.vm()
            .exec_suspend()
            .map_err(|e| DrainError::Failed(e.to_string()))?;
        loop {
            match self.vm().run(100_000) {
                Ok(RunEnd::Parked) => return Ok(()),
                Ok(RunEnd::Done) => {
                    let _ = self.set(ShellState::Done);
                    return Err(DrainError::Finished);
                }
                Err(VmError::StepLimit(_)) => {}
                Err(e) => {
                    let why = e.to_string();
                    self.fail(why.clone());
                    return Err(DrainError::Failed(why));
                }
            }
        }
    }

    fn refuse(&self, what: &str) -> Message {
        Message::error(
            ErrorCode::IllegalTransition,
            format!("cannot {what} a {} entity", self.rec.state()),
        )
    }

    fn suspend(&mut self) -> Result<(), Message> {
        if self.rec.state() != ShellState::Running {
            return Err(self.refuse("suspend"));
        }
        match self.drain() {
            Ok(()) => self.set(ShellState::Suspended),
            Err(DrainError::Finished) => Err(Message::error(
                ErrorCode::IllegalTransition,
                "entity finished before it could be suspended",
            )),
            Err(DrainError::Failed(why)) => Err(Message::error(ErrorCode::EntityFailed, why)),
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Status(tx) => {
                let (clock, instructions) = self.rec.progress();
                let _ = tx.send(EntityStatus {
                    entity: self.rec.id.clone(),
                    state: self.rec.state(),
                    clock,
                    instructions,
                    output_lines: self.rec.output().len() as u32,
                });
            }
            Command::Output(tx) => {
                let _ = tx.send(Message::OutputResp {
                    entity: self.rec.id.clone(),
                    state: self.rec.state(),
                    lines: self.rec.output(),
                });
            }
            Command::Control(op, tx) => {
                let r = self.control(op);
                let _ = tx.send(r.map_or_else(
                    |e| e,
                    |()| Message::ControlOk {
                        entity: self.rec.id.clone(),
                        state: self.rec.state(),
                    },
                ));
            }
            Command::Migrate(dest, tx) => {
                let r = self.export(&dest);
                let _ = tx.send(r.unwrap_or_else(|e| e));
            }
        }
    }

    fn control(&mut self, op: ControlOp) -> Result<(), Message> {
        let state = self.rec.state();
        match op {
            ControlOp::Start if state == ShellState::Loaded => self.set(ShellState::Running),
            ControlOp::Start => Err(self.refuse("start")),
            ControlOp::Suspend => self.suspend(),
            ControlOp::Resume if matches!(state, ShellState::Suspended | ShellState::Imported) => {
                self.vm()
                    .exec_resume()
                    .map_err(|e| Message::error(ErrorCode::Internal, e.to_string()))?;
                self.set(ShellState::Running)
            }
            ControlOp::Resume => Err(self.refuse("resume")),
            ControlOp::Stop => self.set(ShellState::Done),
        }
    }

    /// Suspends, ships the image, and discards the local copy only once the destination has
    /// acknowledged it. Any failure before that leaves the entity as it was.
    fn export(&mut self, dest: &str) -> Result<Message, Message> {
        let was = self.rec.state();
        match was {
            ShellState::Running => self.suspend()?,
            ShellState::Suspended => {}
            _ => return Err(self.refuse("migrate")),
        }
        self.set(ShellState::MigratingOut)?;

        let sent = self.transfer(dest);
        match sent {
            Ok(image_bytes) => {
                self.set(ShellState::Done)?;
                Ok(Message::TransferOk {
                    entity: self.rec.id.clone(),
                    image_bytes,
                })
            }
            Err(err) => {
                if was == ShellState::Running {
                    self.vm().exec_resume().expect("entity was suspended");
                }
                self.set(was)?;
                Err(err)
            }
        }
    }

    fn transfer(&mut self, dest: &str) -> Result<u32, Message> {
        let internal = |e: String| Message::error(ErrorCode::Internal, e);
        let img = capture(self.rec.vm.as_ref().expect("active"), &self.rec.id)
            .map_err(|e| internal(e.to_string()))?;
        let mut image = encode_image(&img);
        if self.config.fault == Some(Fault::CorruptImage) {
            let mid = image.len() / 2;
            image[mid] ^= 0x5a;
        }
        let program = encode_program(&self.rec.program);
        let msg = Message::Transfer {
            entity: self.rec.id.clone(),
            program,
            image,
        };
        let mut client = Client::connect_timeout(dest, self.config.transfer_timeout).map_err(|e| {
            Message::error(ErrorCode::DestinationUnreachable, e.to_string())
        })?;
        match client.request(&msg) {
            Ok(Message::TransferOk { image_bytes, .. }) => Ok(image_bytes),
            Ok(other) => Err(Message::error(
                ErrorCode::TransferRejected,
                format!("destination answered with kind {}", other.kind()),
            )),
            Err(ClientError::Remote { code, message }) => Err(Message::error(
                ErrorCode::TransferRejected,
                format!("destination refused the entity: {code:?}: {message}"),
            )),
            Err(e) => Err(Message::error(ErrorCode::DestinationUnreachable, e.to_string())),
        }
    }
}
