//! Comanche core: a component runtime and the storage components built on it.
//!
//! Components are created through factories, talk to each other through
//! UUID-typed interfaces and are wired into stacks by binding. Block devices
//! move data only between registered IO buffers and their backing store;
//! composite devices (partition, RAID-0, RAID-1, cache) and the KV store
//! consume and expose the same interfaces. An [`service::IoService`] puts a
//! stack behind one of four threading arrangements.

pub mod bench;
pub mod blockdev;
pub mod builtin;
pub mod component;
pub mod compose;
pub mod composite;
pub mod kv;
pub mod memory;
pub mod mgmt;
pub mod ring;
pub mod service;
#[cfg(test)]
mod testutil;

pub use component::{bind, Component, ComponentError, ComponentId, ComponentRef, InterfaceId, Registry};
pub use memory::{IoArena, IoBuffer, MemoryError, ZerocopyMemory};
