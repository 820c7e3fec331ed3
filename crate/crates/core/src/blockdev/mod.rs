//! The asynchronous block-device interface.
//!
//! A device hands out [`IoQueue`]s, each an independent submission and
//! completion queue pair in the NVMe style. A queue follows a two-party
//! contract: one thread may submit while another polls. Every accepted
//! descriptor completes exactly once; descriptors that fail validation are
//! rejected synchronously by `submit` and never complete.

mod diag;
mod file;
mod leaf;
mod ram;

use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use thiserror::Error;

use crate::memory::{IoBuffer, ZerocopyMemory};

pub use diag::{AuditRecord, DeviceDiagnostics, DeviceStats, Fault};
pub use file::{FileBackend, FileBlockDevice, FileConfig};
pub(crate) use leaf::next_device_id;
pub use leaf::{Backend, LeafDevice, DEFAULT_QUEUE_DEPTH};
pub use ram::{RamBackend, RamBlockDevice, RamConfig};

pub const DEFAULT_BLOCK_SIZE: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum IoOp {
    Read = 0,
    Write = 1,
    Flush = 2,
}

impl IoOp {
    pub fn from_u8(v: u8) -> Option<IoOp> {
        match v {
            0 => Some(IoOp::Read),
            1 => Some(IoOp::Write),
            2 => Some(IoOp::Flush),
            _ => None,
        }
    }
}

/// Descriptor status, with errno-style values on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum IoStatus {
    Ok = 0,
    Pending = 1,
    Bounds = -34,
    Access = -13,
    Io = -5,
}

impl IoStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn from_code(code: i32) -> Option<IoStatus> {
        match code {
            0 => Some(IoStatus::Ok),
            1 => Some(IoStatus::Pending),
            -34 => Some(IoStatus::Bounds),
            -13 => Some(IoStatus::Access),
            -5 => Some(IoStatus::Io),
            _ => None,
        }
    }

    pub fn is_ok(self) -> bool {
        self == IoStatus::Ok
    }

    fn severity(self) -> u8 {
        match self {
            IoStatus::Ok => 0,
            IoStatus::Pending => 1,
            IoStatus::Bounds => 2,
            IoStatus::Access => 3,
            IoStatus::Io => 4,
        }
    }

    /// The more severe of two statuses, for ops fanned out to several
    /// children.
    pub fn worst(self, other: IoStatus) -> IoStatus {
        if other.severity() > self.severity() {
            other
        } else {
            self
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IoStatus::Ok => "OK",
            IoStatus::Pending => "PENDING",
            IoStatus::Bounds => "E_BOUNDS",
            IoStatus::Access => "E_ACCESS",
            IoStatus::Io => "E_IO",
        }
    }
}

impl std::fmt::Display for IoStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One IO request. `offset` is the byte offset of the transfer inside
/// `buffer`; flushes carry no buffer.
#[derive(Debug, Clone)]
pub struct IoDescriptor {
    pub op: IoOp,
    pub lba: u64,
    pub block_count: u32,
    pub buffer: Option<IoBuffer>,
    pub offset: usize,
    pub tag: u64,
}

impl IoDescriptor {
    pub fn read(lba: u64, block_count: u32, buffer: &IoBuffer, offset: usize, tag: u64) -> IoDescriptor {
        IoDescriptor {
            op: IoOp::Read,
            lba,
            block_count,
            buffer: Some(buffer.clone()),
            offset,
            tag,
        }
    }

    pub fn write(lba: u64, block_count: u32, buffer: &IoBuffer, offset: usize, tag: u64) -> IoDescriptor {
        IoDescriptor {
            op: IoOp::Write,
            ..IoDescriptor::read(lba, block_count, buffer, offset, tag)
        }
    }

    pub fn flush(tag: u64) -> IoDescriptor {
        IoDescriptor {
            op: IoOp::Flush,
            lba: 0,
            block_count: 0,
            buffer: None,
            offset: 0,
            tag,
        }
    }

    pub fn byte_len(&self, block_size: u32) -> usize {
        self.block_count as usize * block_size as usize
    }

    /// Synchronous checks every device applies before accepting.
    pub fn validate(&self, info: &DeviceInfo, memory: &dyn ZerocopyMemory) -> Result<(), IoStatus> {
        if self.op == IoOp::Flush {
            return Ok(());
        }
        let end = self.lba.checked_add(self.block_count as u64);
        if self.block_count == 0 || end.map_or(true, |e| e > info.block_count) {
            return Err(IoStatus::Bounds);
        }
        let Some(buffer) = &self.buffer else {
            return Err(IoStatus::Access);
        };
        let len = self.byte_len(info.block_size);
        if buffer.is_freed() {
            return Err(IoStatus::Access);
        }
        if self.offset.checked_add(len).map_or(true, |e| e > buffer.len()) {
            return Err(IoStatus::Bounds);
        }
        if !memory.check_access(buffer.base() + self.offset, len) {
            return Err(IoStatus::Access);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Completion {
    pub tag: u64,
    pub status: IoStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceInfo {
    pub block_size: u32,
    pub block_count: u64,
    pub device_id: u64,
    pub supports_flush: bool,
    /// How the backend moves data: `ram`, `direct`, `buffered` or
    /// `virtual` for composite devices.
    pub io_mode: &'static str,
}

impl DeviceInfo {
    pub fn capacity_bytes(&self) -> u64 {
        self.block_count * self.block_size as u64
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("DeviceNotOpen")]
    NotOpen,
    #[error("device IO error: {0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SubmitError {
    #[error("QueueFull")]
    QueueFull,
    #[error("DeviceNotOpen")]
    NotOpen,
    #[error("rejected: {0}")]
    Rejected(IoStatus),
}

/// A submission/completion queue pair on a device.
pub trait IoQueue: Send + Sync {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError>;

    /// Append up to `max` completions to `out`, returning how many.
    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize;

    fn info(&self) -> DeviceInfo;

    fn memory(&self) -> Arc<dyn ZerocopyMemory>;

    /// Accepted descriptors not yet returned by `poll`.
    fn outstanding(&self) -> usize;
}

pub trait BlockDevice: Send + Sync {
    fn info(&self) -> Result<DeviceInfo, DeviceError>;

    /// The device's IO memory; buffers must be registered here to be used.
    fn memory(&self) -> Arc<dyn ZerocopyMemory>;

    /// A fresh, independent queue pair.
    fn open_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError>;

    /// Queue backing the device-level `async_submit`/`poll_completions`.
    fn primary_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError>;

    /// Mutex-guarded queue used by the `*_sync` helpers.
    fn sync_queue(&self) -> Result<&SyncQueue, DeviceError>;

    fn async_submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        self.primary_queue()
            .map_err(|_| SubmitError::NotOpen)?
            .submit(desc)
    }

    fn poll_completions(&self, max: usize) -> Vec<Completion> {
        let mut out = Vec::new();
        if let Ok(q) = self.primary_queue() {
            q.poll(max, &mut out);
        }
        out
    }

    fn read_sync(&self, lba: u64, block_count: u32, buffer: &IoBuffer, offset: usize) -> Result<(), IoStatus> {
        self.sync_queue()
            .map_err(|_| IoStatus::Io)?
            .run(&IoDescriptor::read(lba, block_count, buffer, offset, 0))
    }

    fn write_sync(&self, lba: u64, block_count: u32, buffer: &IoBuffer, offset: usize) -> Result<(), IoStatus> {
        self.sync_queue()
            .map_err(|_| IoStatus::Io)?
            .run(&IoDescriptor::write(lba, block_count, buffer, offset, 0))
    }

    fn flush_sync(&self) -> Result<(), IoStatus> {
        self.sync_queue()
            .map_err(|_| IoStatus::Io)?
            .run(&IoDescriptor::flush(0))
    }
}

/// Submit `desc` on a queue with nothing else outstanding and wait for it.
pub fn run_sync(queue: &dyn IoQueue, desc: &IoDescriptor) -> Result<(), IoStatus> {
    let mut spins = 0u32;
    loop {
        match queue.submit(desc) {
            Ok(()) => break,
            Err(SubmitError::QueueFull) => backoff(&mut spins),
            Err(SubmitError::Rejected(status)) => return Err(status),
            Err(SubmitError::NotOpen) => return Err(IoStatus::Io),
        }
    }
    let mut out = Vec::with_capacity(1);
    spins = 0;
    loop {
        out.clear();
        if queue.poll(1, &mut out) == 1 {
            let c = out[0];
            debug_assert_eq!(c.tag, desc.tag, "run_sync used on a busy queue");
            return if c.status.is_ok() { Ok(()) } else { Err(c.status) };
        }
        backoff(&mut spins);
    }
}

/// Spin briefly, then yield the CPU.
pub fn backoff(spins: &mut u32) {
    if *spins < 64 {
        std::hint::spin_loop();
    } else {
        std::thread::yield_now();
    }
    *spins = spins.saturating_add(1);
}

/// A lazily opened queue used one request at a time.
#[derive(Default)]
pub struct SyncQueue {
    queue: Mutex<Option<Arc<dyn IoQueue>>>,
}

impl SyncQueue {
    pub fn run(&self, desc: &IoDescriptor) -> Result<(), IoStatus> {
        let slot = self.queue.lock();
        match slot.as_ref() {
            Some(q) => run_sync(q.as_ref(), desc),
            None => Err(IoStatus::Io),
        }
    }

    pub fn clear(&self) {
        *self.queue.lock() = None;
    }
}

/// Primary and sync queues of a device, opened on first use.
#[derive(Default)]
pub struct DeviceQueues {
    primary: OnceLock<Arc<dyn IoQueue>>,
    sync: SyncQueue,
    sync_opened: OnceLock<()>,
}

impl DeviceQueues {
    pub fn primary(
        &self,
        open: impl FnOnce() -> Result<Arc<dyn IoQueue>, DeviceError>,
    ) -> Result<Arc<dyn IoQueue>, DeviceError> {
        if let Some(q) = self.primary.get() {
            return Ok(q.clone());
        }
        let q = open()?;
        Ok(self.primary.get_or_init(|| q).clone())
    }

    pub fn sync(
        &self,
        open: impl FnOnce() -> Result<Arc<dyn IoQueue>, DeviceError>,
    ) -> Result<&SyncQueue, DeviceError> {
        if self.sync_opened.get().is_none() {
            let mut slot = self.sync.queue.lock();
            if slot.is_none() {
                *slot = Some(open()?);
            }
            drop(slot);
            let _ = self.sync_opened.set(());
        }
        Ok(&self.sync)
    }
}

/// Allocate a buffer from a device and write it with `data`, padded with
/// zeros to whole blocks.
pub fn buffer_with(
    memory: &dyn ZerocopyMemory,
    data: &[u8],
    block_size: u32,
) -> Result<IoBuffer, crate::memory::MemoryError> {
    let bs = block_size as usize;
    let len = data.len().div_ceil(bs).max(1) * bs;
    let buf = memory.allocate_io_buffer(len, crate::memory::DEFAULT_ALIGNMENT, -1)?;
    buf.write_at(0, data);
    Ok(buf)
}
