//! Key-value store over a raw block device.
//!
//! Layout: superblock, allocation bitmap, an open-addressed hash index of
//! 64-byte buckets, then the data region. Values occupy whole blocks.
//! See [`format`] for the byte layout.

pub mod bitmap;
mod component;
pub mod contract;
pub mod format;
mod store;

use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::blockdev::{IoQueue, IoStatus};
use crate::memory::{IoBuffer, MemoryError, ZerocopyMemory};

pub use bitmap::BitmapAllocator;
pub use component::{KvComponent, KvConfig};
pub use format::{Bucket, BucketState, Superblock, MAX_KEY_LEN, MIN_DEVICE_BLOCKS};
pub use store::KvEngine;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("KeyTooLong: {0} bytes (max {MAX_KEY_LEN})")]
    KeyTooLong(usize),
    #[error("NotFound")]
    NotFound,
    #[error("NoSpace")]
    NoSpace,
    #[error("DeviceTooSmall: {0} blocks (need {MIN_DEVICE_BLOCKS})")]
    DeviceTooSmall(u64),
    #[error("E_CRC: superblock checksum mismatch")]
    Crc,
    #[error("bad store format: {0}")]
    BadFormat(String),
    #[error("{0}")]
    Io(IoStatus),
    #[error("store is not open")]
    NotOpen,
    #[error("device: {0}")]
    Device(String),
    #[error("buffer too small for value")]
    BufferTooSmall,
}

impl From<MemoryError> for KvError {
    fn from(e: MemoryError) -> Self {
        KvError::Device(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvAttr {
    pub value_len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvStats {
    pub keys: u64,
    pub data_blocks: u64,
    pub free_blocks: u64,
    /// Sum of `data_blocks` over live buckets.
    pub referenced_blocks: u64,
    pub index_buckets: u64,
}

/// The `IKVStore` interface.
pub trait KvStore: Send + Sync {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), KvError>;

    fn get(&self, key: &[u8]) -> Result<Vec<u8>, KvError>;

    fn erase(&self, key: &[u8]) -> Result<(), KvError>;

    /// Answered from the index alone.
    fn get_attr(&self, key: &[u8]) -> Result<KvAttr, KvError>;

    /// Live keys starting with `prefix`, sorted.
    fn list(&self, prefix: &[u8]) -> Result<Vec<Vec<u8>>, KvError>;

    fn flush(&self) -> Result<(), KvError>;

    /// Put the first `len` bytes of `buffer`. A buffer registered with
    /// [`KvStore::memory`] and sized to whole blocks goes to the device
    /// without a copy.
    fn put_from_buffer(&self, key: &[u8], buffer: &IoBuffer, len: usize) -> Result<(), KvError>;

    /// Read a value into a registered buffer with room for its whole
    /// blocks; returns the value length.
    fn get_into_buffer(&self, key: &[u8], buffer: &IoBuffer) -> Result<usize, KvError>;

    /// Memory that zero-copy buffers must come from (or be registered with).
    fn memory(&self) -> Result<Arc<dyn ZerocopyMemory>, KvError>;

    fn block_size(&self) -> Result<u32, KvError>;

    fn stats(&self) -> Result<KvStats, KvError>;

    /// Line-oriented text dump of the superblock and live buckets.
    fn dump(&self) -> Result<String, KvError>;
}

/// A [`KvEngine`] made shareable: calls are serialized and the engine can
/// be closed while handles remain.
#[derive(Default)]
pub struct KvHandle {
    engine: Mutex<Option<KvEngine>>,
}

impl KvHandle {
    pub fn format(queue: Arc<dyn IoQueue>) -> Result<KvHandle, KvError> {
        Ok(KvHandle::from_engine(KvEngine::format(queue)?))
    }

    pub fn open(queue: Arc<dyn IoQueue>) -> Result<KvHandle, KvError> {
        Ok(KvHandle::from_engine(KvEngine::open(queue)?))
    }

    pub fn from_engine(engine: KvEngine) -> KvHandle {
        KvHandle {
            engine: Mutex::new(Some(engine)),
        }
    }

    pub fn is_open(&self) -> bool {
        self.engine.lock().is_some()
    }

    pub fn install(&self, engine: KvEngine) {
        if let Some(old) = self.engine.lock().replace(engine) {
            old.close();
        }
    }

    /// Flush and close; later calls fail with `NotOpen`.
    pub fn close(&self) -> Result<(), KvError> {
        match self.engine.lock().take() {
            Some(mut engine) => {
                let flushed = engine.flush();
                engine.close();
                flushed
            }
            None => Ok(()),
        }
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut KvEngine) -> Result<R, KvError>) -> Result<R, KvError> {
        match self.engine.lock().as_mut() {
            Some(engine) => f(engine),
            None => Err(KvError::NotOpen),
        }
    }

    pub fn fsck(&self) -> Result<KvStats, KvError> {
        self.with(|e| e.fsck())
    }
}

impl KvStore for KvHandle {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), KvError> {
        self.with(|e| e.put(key, value))
    }

    fn get(&self, key: &[u8]) -> Result<Vec<u8>, KvError> {
        self.with(|e| e.get(key))
    }

    fn erase(&self, key: &[u8]) -> Result<(), KvError> {
        self.with(|e| e.erase(key))
    }

    fn get_attr(&self, key: &[u8]) -> Result<KvAttr, KvError> {
        self.with(|e| e.get_attr(key))
    }

    fn list(&self, prefix: &[u8]) -> Result<Vec<Vec<u8>>, KvError> {
        self.with(|e| e.list(prefix))
    }

    fn flush(&self) -> Result<(), KvError> {
        self.with(|e| e.flush())
    }

    fn put_from_buffer(&self, key: &[u8], buffer: &IoBuffer, len: usize) -> Result<(), KvError> {
        self.with(|e| e.put_from_buffer(key, buffer, len))
    }

    fn get_into_buffer(&self, key: &[u8], buffer: &IoBuffer) -> Result<usize, KvError> {
        self.with(|e| e.get_into_buffer(key, buffer))
    }

    fn memory(&self) -> Result<Arc<dyn ZerocopyMemory>, KvError> {
        self.with(|e| Ok(e.memory()))
    }

    fn block_size(&self) -> Result<u32, KvError> {
        self.with(|e| Ok(e.superblock().block_size))
    }

    fn stats(&self) -> Result<KvStats, KvError> {
        self.with(|e| e.stats())
    }

    fn dump(&self) -> Result<String, KvError> {
        self.with(|e| e.dump())
    }
}

impl Drop for KvHandle {
    fn drop(&mut self) {
        if let Some(engine) = self.engine.get_mut().take() {
            engine.close();
        }
    }
}
