//! Node process, wire protocol and operator tooling for the migratable VM.

pub mod bench;
pub mod client;
pub mod entity;
pub mod server;
pub mod wire;

pub use client::{Client, ClientError};
pub use entity::ShellState;
pub use server::{Fault, Node, NodeConfig, NodeError};
pub use wire::{ControlOp, ErrorCode, Message};
