use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde_json::Value;

use super::diag::{Diagnostics, WriteFate};
use super::{
    AuditRecord, BlockDevice, Completion, DeviceDiagnostics, DeviceError, DeviceInfo,
    DeviceQueues, DeviceStats, Fault, IoDescriptor, IoOp, IoQueue, IoStatus, SubmitError,
    SyncQueue,
};
use crate::component::{
    Component, ComponentError, ComponentId, InterfaceId, IBLOCK_DEVICE, IDEVICE_DIAGNOSTICS,
    IZEROCOPY_MEMORY,
};
use crate::memory::{InflightGuard, IoArena, ZerocopyMemory};
use crate::ring::{self, Consumer, Producer};

/// Completions a queue holds before `submit` reports `QueueFull`.
pub const DEFAULT_QUEUE_DEPTH: usize = 256;
const QUEUE_ORDER: u32 = 8;

/// Storage behind a leaf device. Transfers go straight between the
/// caller's buffer and the store.
pub trait Backend: Sized + Send + Sync + 'static {
    type Config: DeserializeOwned + Send + Sync;
    const COMPONENT_ID: ComponentId;

    fn open(config: &Self::Config) -> Result<Self, DeviceError>;
    fn block_size(&self) -> u32;
    fn block_count(&self) -> u64;
    fn io_mode(&self) -> &'static str;
    fn read(&self, lba: u64, dst: &mut [u8]) -> std::io::Result<()>;
    fn write(&self, lba: u64, src: &[u8]) -> std::io::Result<()>;
    fn flush(&self) -> std::io::Result<()>;
}

pub(crate) fn next_device_id() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    let pid = std::process::id() as u64;
    (pid << 32) | NEXT.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn check_block_size(block_size: u32) -> Result<(), DeviceError> {
    if block_size < 512 || !block_size.is_power_of_two() {
        return Err(DeviceError::Invalid(format!(
            "block size {block_size} must be a power of two >= 512"
        )));
    }
    Ok(())
}

struct Shared<B> {
    backend: B,
    info: DeviceInfo,
    arena: Arc<IoArena>,
    diag: Arc<Diagnostics>,
}

impl<B: Backend> Shared<B> {
    fn execute(&self, desc: &IoDescriptor) -> IoStatus {
        let diag = &self.diag;
        diag.count(desc.op, desc.block_count);
        if desc.op == IoOp::Flush {
            return match self.backend.flush() {
                Ok(()) => IoStatus::Ok,
                Err(_) => IoStatus::Io,
            };
        }
        let buffer = desc.buffer.as_ref().expect("validated descriptor has a buffer");
        let len = desc.byte_len(self.info.block_size);
        if diag.audit_enabled() {
            diag.record(AuditRecord {
                op: desc.op,
                lba: desc.lba,
                block_count: desc.block_count,
                buffer_handle: buffer.handle(),
                base: buffer.base() + desc.offset,
                offset: desc.offset,
                len,
            });
        }
        // SAFETY: the caller holds an in-flight guard on the buffer and
        // `validate` checked the range.
        let result = match desc.op {
            IoOp::Read => {
                if diag.read_fails(desc.lba, desc.block_count) {
                    return IoStatus::Io;
                }
                let dst = unsafe { buffer.device_slice_mut(desc.offset, len) };
                self.backend.read(desc.lba, dst)
            }
            IoOp::Write => match diag.write_fate(desc.lba, desc.block_count) {
                WriteFate::Apply => {
                    let src = unsafe { buffer.device_slice(desc.offset, len) };
                    self.backend.write(desc.lba, src)
                }
                WriteFate::Drop => Ok(()),
                WriteFate::Fail => return IoStatus::Io,
            },
            IoOp::Flush => unreachable!(),
        };
        match result {
            Ok(()) => IoStatus::Ok,
            Err(e) => {
                log::warn!("device {:#x}: {:?} lba {} failed: {e}", self.info.device_id, desc.op, desc.lba);
                IoStatus::Io
            }
        }
    }
}

type Slot = (Completion, Option<InflightGuard>);

/// Executes synchronously inside `submit`; the completion waits in the
/// queue's ring, keeping the buffer marked in flight until it is polled.
struct LeafQueue<B> {
    shared: Arc<Shared<B>>,
    producer: Mutex<Producer<Slot>>,
    consumer: Mutex<Consumer<Slot>>,
    outstanding: AtomicUsize,
}

impl<B: Backend> IoQueue for LeafQueue<B> {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        let shared = &self.shared;
        if let Err(status) = desc.validate(&shared.info, shared.arena.as_ref()) {
            shared.diag.count_rejected();
            return Err(SubmitError::Rejected(status));
        }
        let mut producer = self.producer.lock();
        if producer.free_slots() == 0 {
            return Err(SubmitError::QueueFull);
        }
        let guard = desc.buffer.as_ref().map(|b| b.inflight_guard());
        let status = shared.execute(desc);
        if status == IoStatus::Io {
            shared.diag.count_error();
        }
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        let pushed = producer.push((Completion { tag: desc.tag, status }, guard));
        debug_assert!(pushed.is_ok());
        Ok(())
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        let mut consumer = self.consumer.lock();
        let mut n = 0;
        while n < max {
            match consumer.pop() {
                Some((c, guard)) => {
                    drop(guard);
                    self.outstanding.fetch_sub(1, Ordering::AcqRel);
                    out.push(c);
                    n += 1;
                }
                None => break,
            }
        }
        n
    }

    fn info(&self) -> DeviceInfo {
        self.shared.info.clone()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.shared.arena.clone()
    }

    fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }
}

/// A device over a [`Backend`]; also the component wrapping it.
pub struct LeafDevice<B: Backend> {
    config: Mutex<Option<B::Config>>,
    shared: RwLock<Option<Arc<Shared<B>>>>,
    arena: Arc<IoArena>,
    diag: Arc<Diagnostics>,
    queues: DeviceQueues,
    device_id: u64,
}

impl<B: Backend> Default for LeafDevice<B> {
    fn default() -> Self {
        LeafDevice {
            config: Mutex::new(None),
            shared: RwLock::new(None),
            arena: Arc::new(IoArena::default()),
            diag: Arc::new(Diagnostics::default()),
            queues: DeviceQueues::default(),
            device_id: next_device_id(),
        }
    }
}

impl<B: Backend> LeafDevice<B> {
    /// Unconfigured, unopened device.
    pub fn new() -> LeafDevice<B> {
        LeafDevice::default()
    }

    /// Configure and open in one step, outside the component runtime.
    pub fn open(config: B::Config) -> Result<Arc<LeafDevice<B>>, DeviceError> {
        let device = Arc::new(LeafDevice::new());
        *device.config.lock() = Some(config);
        device.open_backend()?;
        Ok(device)
    }

    fn open_backend(&self) -> Result<(), DeviceError> {
        let config = self.config.lock();
        let config = config
            .as_ref()
            .ok_or_else(|| DeviceError::Invalid("device is not configured".into()))?;
        let backend = B::open(config)?;
        check_block_size(backend.block_size())?;
        if backend.block_count() == 0 {
            return Err(DeviceError::Invalid("device has no blocks".into()));
        }
        let info = DeviceInfo {
            block_size: backend.block_size(),
            block_count: backend.block_count(),
            device_id: self.device_id,
            supports_flush: true,
            io_mode: backend.io_mode(),
        };
        *self.shared.write() = Some(Arc::new(Shared {
            backend,
            info,
            arena: self.arena.clone(),
            diag: self.diag.clone(),
        }));
        Ok(())
    }

    fn shared(&self) -> Result<Arc<Shared<B>>, DeviceError> {
        self.shared.read().clone().ok_or(DeviceError::NotOpen)
    }

    pub fn is_open(&self) -> bool {
        self.shared.read().is_some()
    }

    pub fn arena(&self) -> &Arc<IoArena> {
        &self.arena
    }
}

impl<B: Backend> BlockDevice for LeafDevice<B> {
    fn info(&self) -> Result<DeviceInfo, DeviceError> {
        Ok(self.shared()?.info.clone())
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.arena.clone()
    }

    fn open_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        let shared = self.shared()?;
        let (producer, consumer) = ring::channel(QUEUE_ORDER);
        Ok(Arc::new(LeafQueue {
            shared,
            producer: Mutex::new(producer),
            consumer: Mutex::new(consumer),
            outstanding: AtomicUsize::new(0),
        }))
    }

    fn primary_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        self.queues.primary(|| self.open_queue())
    }

    fn sync_queue(&self) -> Result<&SyncQueue, DeviceError> {
        self.queues.sync(|| self.open_queue())
    }
}

impl<B: Backend> DeviceDiagnostics for LeafDevice<B> {
    fn stats(&self) -> DeviceStats {
        self.diag.stats()
    }
    fn reset_stats(&self) {
        self.diag.reset_stats()
    }
    fn set_audit(&self, enabled: bool) {
        self.diag.set_audit(enabled)
    }
    fn take_audit(&self) -> Vec<AuditRecord> {
        self.diag.take_audit()
    }
    fn inject_fault(&self, fault: Fault) {
        self.diag.inject_fault(fault)
    }
    fn clear_faults(&self) {
        self.diag.clear_faults()
    }
}

impl<B: Backend> Component for LeafDevice<B> {
    fn component_id(&self) -> ComponentId {
        B::COMPONENT_ID
    }

    fn interfaces(&self) -> &[InterfaceId] {
        &[IBLOCK_DEVICE, IZEROCOPY_MEMORY, IDEVICE_DIAGNOSTICS]
    }

    fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        let parsed: B::Config = serde_json::from_value(config.clone())
            .map_err(|e| ComponentError::Config(e.to_string()))?;
        *self.config.lock() = Some(parsed);
        Ok(())
    }

    fn start(&self) -> Result<(), ComponentError> {
        if self.is_open() {
            return Ok(());
        }
        self.open_backend()
            .map_err(|e| ComponentError::StartFailed(e.to_string()))
    }

    fn teardown(&self) {
        if let Ok(shared) = self.shared() {
            let _ = shared.backend.flush();
        }
        *self.shared.write() = None;
    }

    fn as_block_device(self: Arc<Self>) -> Option<Arc<dyn BlockDevice>> {
        Some(self)
    }

    fn as_zerocopy_memory(self: Arc<Self>) -> Option<Arc<dyn ZerocopyMemory>> {
        Some(self.arena.clone())
    }

    fn as_diagnostics(self: Arc<Self>) -> Option<Arc<dyn DeviceDiagnostics>> {
        Some(self)
    }
}
