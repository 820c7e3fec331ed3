//! Threading arrangements for sharing a stack.
//!
//! * `DIRECT`: the client calls into the stack on its own thread.
//! * `LOCKED`: clients share one stack queue under a lock.
//! * `QUEUED`: each client gets a ring pair drained by service threads.
//! * `SHM`: as `QUEUED`, but the rings and data live in a segment file
//!   that another process can attach to.
//!
//! An [`IoService`] wraps a stack root and is itself a block device, so it
//! can sit anywhere a device can, including under a KV store.

mod direct;
mod locked;
pub mod poller;
mod queued;
pub mod shm;
pub mod worker;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::blockdev::{BlockDevice, DeviceError, DeviceInfo, DeviceQueues, IoQueue, SyncQueue};
use crate::component::{
    Component, ComponentError, ComponentId, ComponentRef, Dependencies, InterfaceId, IBLOCK_DEVICE,
    IO_SERVICE_ID, IZEROCOPY_MEMORY,
};
use crate::memory::{IoArena, ZerocopyMemory};

pub use direct::DirectQueue;
pub use locked::{LockedQueue, LockedStack};
pub use poller::{CompletionSink, Poller};
pub use queued::{queued_pair, QueuedQueue, QueuedTask};
pub use shm::{ShmClient, ShmCounts, ShmDescriptor, ShmError, ShmLayout, ShmQueue, ShmSegment, ShmServer};
pub use worker::{Idle, Task, WorkerPool, IDLE_SPINS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("BadMode: {0}")]
    BadMode(String),
    #[error("SpawnFailure: {0}")]
    SpawnFailure(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Shm(#[from] ShmError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ServiceMode {
    #[default]
    Direct,
    Locked,
    Queued,
    Shm,
}

impl ServiceMode {
    pub const ALL: [ServiceMode; 4] = [ServiceMode::Direct, ServiceMode::Locked, ServiceMode::Queued, ServiceMode::Shm];

    pub fn name(&self) -> &'static str {
        match self {
            ServiceMode::Direct => "DIRECT",
            ServiceMode::Locked => "LOCKED",
            ServiceMode::Queued => "QUEUED",
            ServiceMode::Shm => "SHM",
        }
    }
}

impl fmt::Display for ServiceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ServiceMode {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, ServiceError> {
        match s.to_ascii_uppercase().as_str() {
            "DIRECT" => Ok(ServiceMode::Direct),
            "LOCKED" => Ok(ServiceMode::Locked),
            "QUEUED" => Ok(ServiceMode::Queued),
            "SHM" => Ok(ServiceMode::Shm),
            _ => Err(ServiceError::BadMode(format!(
                "`{s}` is not one of DIRECT, LOCKED, QUEUED, SHM"
            ))),
        }
    }
}

impl TryFrom<String> for ServiceMode {
    type Error = ServiceError;

    fn try_from(s: String) -> Result<Self, ServiceError> {
        s.parse()
    }
}

impl From<ServiceMode> for String {
    fn from(m: ServiceMode) -> String {
        m.name().to_string()
    }
}

fn one() -> usize {
    1
}

fn default_order() -> u32 {
    8
}

fn default_desc_count() -> u32 {
    256
}

fn default_data_size() -> usize {
    16 << 20
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub mode: ServiceMode,
    /// Shared service threads when `coalesce` is set.
    #[serde(default = "one")]
    pub service_threads: usize,
    /// QUEUED/SHM: clients share `service_threads` threads instead of
    /// getting one each.
    #[serde(default)]
    pub coalesce: bool,
    #[serde(default = "default_order")]
    pub ring_order: u32,
    /// SHM: descriptors per client segment.
    #[serde(default = "default_desc_count")]
    pub desc_count: u32,
    /// SHM: data region bytes per client segment.
    #[serde(default = "default_data_size")]
    pub shm_data_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig::new(ServiceMode::Direct)
    }
}

impl ServiceConfig {
    pub fn new(mode: ServiceMode) -> ServiceConfig {
        ServiceConfig {
            mode,
            service_threads: 1,
            coalesce: false,
            ring_order: default_order(),
            desc_count: default_desc_count(),
            shm_data_size: default_data_size(),
        }
    }

    pub fn coalesced(mut self, threads: usize) -> ServiceConfig {
        self.coalesce = true;
        self.service_threads = threads;
        self
    }

    fn check(&self) -> Result<(), ServiceError> {
        if self.service_threads == 0 {
            return Err(ServiceError::BadMode("service_threads must be at least 1".into()));
        }
        if self.ring_order == 0 || self.ring_order > shm::MAX_RING_ORDER {
            return Err(ServiceError::BadMode(format!("ring_order {} out of range", self.ring_order)));
        }
        if self.mode == ServiceMode::Shm {
            ShmLayout::new(self.ring_order, self.desc_count, self.shm_data_size)?;
        }
        Ok(())
    }
}

struct Core {
    config: ServiceConfig,
    stack: Arc<dyn BlockDevice>,
    info: DeviceInfo,
    locked: Option<Arc<LockedStack>>,
    pool: Option<WorkerPool>,
}

impl Core {
    fn new(stack: Arc<dyn BlockDevice>, config: ServiceConfig) -> Result<Core, ServiceError> {
        config.check()?;
        let info = stack.info()?;
        let mut core = Core {
            info,
            locked: None,
            pool: None,
            stack,
            config,
        };
        match core.config.mode {
            ServiceMode::Direct => {}
            ServiceMode::Locked => core.locked = Some(Arc::new(LockedStack::new(core.stack.open_queue()?))),
            ServiceMode::Queued | ServiceMode::Shm => {
                let name = format!("comanche-{}", core.config.mode.name().to_ascii_lowercase());
                core.pool = Some(if core.config.coalesce {
                    WorkerPool::shared(&name, core.config.service_threads)?
                } else {
                    WorkerPool::dedicated(&name)
                });
            }
        }
        Ok(core)
    }

    fn open_queue(&self) -> Result<Arc<dyn IoQueue>, ServiceError> {
        let order = self.config.ring_order;
        Ok(match self.config.mode {
            ServiceMode::Direct => Arc::new(DirectQueue::new(self.stack.open_queue()?)),
            ServiceMode::Locked => Arc::new(LockedQueue::new(self.locked.clone().unwrap(), 1 << order)),
            ServiceMode::Queued => {
                let (client, task) = queued_pair(self.stack.open_queue()?, order);
                self.pool.as_ref().unwrap().add(Box::new(task))?;
                Arc::new(client)
            }
            ServiceMode::Shm => {
                let c = &self.config;
                let seg = shm::create_unique("comanche-svc", order, c.desc_count, c.shm_data_size)?;
                let name = seg.name().to_string();
                let server = ShmServer::new(Arc::new(seg), self.stack.open_queue()?)?;
                // the client maps the segment separately, as another process would
                let client = ShmClient::attach(&name)?;
                self.pool.as_ref().unwrap().add(Box::new(server))?;
                Arc::new(ShmQueue::new(client, self.info.clone(), self.stack.memory()))
            }
        })
    }
}

/// A stack behind one of the service arrangements; also the `service`
/// component.
#[derive(Default)]
pub struct IoService {
    config: Mutex<ServiceConfig>,
    deps: Dependencies,
    stack: RwLock<Option<Arc<dyn BlockDevice>>>,
    core: RwLock<Option<Arc<Core>>>,
    queues: DeviceQueues,
}

impl IoService {
    pub fn new() -> IoService {
        IoService::default()
    }

    /// Start a service over `stack` outside the component runtime.
    pub fn over(stack: Arc<dyn BlockDevice>, config: ServiceConfig) -> Result<Arc<IoService>, ServiceError> {
        let service = IoService::new();
        *service.config.lock() = config;
        *service.stack.write() = Some(stack);
        service.open()?;
        Ok(Arc::new(service))
    }

    fn open(&self) -> Result<(), ServiceError> {
        let stack = self
            .stack
            .read()
            .clone()
            .ok_or_else(|| ServiceError::Device(DeviceError::Invalid("service has no stack".into())))?;
        let core = Core::new(stack, self.config.lock().clone())?;
        *self.core.write() = Some(Arc::new(core));
        Ok(())
    }

    fn core(&self) -> Result<Arc<Core>, DeviceError> {
        self.core.read().clone().ok_or(DeviceError::NotOpen)
    }

    pub fn mode(&self) -> ServiceMode {
        self.config.lock().mode
    }

    pub fn config(&self) -> ServiceConfig {
        self.config.lock().clone()
    }

    /// Live service threads.
    pub fn thread_count(&self) -> usize {
        self.core
            .read()
            .as_ref()
            .and_then(|c| c.pool.as_ref().map(|p| p.thread_count()))
            .unwrap_or(0)
    }

    pub fn stack(&self) -> Option<Arc<dyn BlockDevice>> {
        self.stack.read().clone()
    }

    pub fn shutdown(&self) {
        if let Some(core) = self.core.write().take() {
            if let Some(pool) = &core.pool {
                pool.shutdown();
            }
        }
    }
}

impl BlockDevice for IoService {
    fn info(&self) -> Result<DeviceInfo, DeviceError> {
        Ok(self.core()?.info.clone())
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        match self.stack.read().as_ref() {
            Some(stack) => stack.memory(),
            None => Arc::new(IoArena::new(0)),
        }
    }

    fn open_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        self.core()?.open_queue().map_err(|e| match e {
            ServiceError::Device(d) => d,
            other => DeviceError::Io(other.to_string()),
        })
    }

    fn primary_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        self.queues.primary(|| self.open_queue())
    }

    fn sync_queue(&self) -> Result<&SyncQueue, DeviceError> {
        self.queues.sync(|| self.open_queue())
    }
}

impl Component for IoService {
    fn component_id(&self) -> ComponentId {
        IO_SERVICE_ID
    }

    fn interfaces(&self) -> &[InterfaceId] {
        &[IBLOCK_DEVICE, IZEROCOPY_MEMORY]
    }

    fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        let parsed: ServiceConfig = match config {
            Value::Null => ServiceConfig::default(),
            v => serde_json::from_value(v.clone()).map_err(|e| ComponentError::Config(e.to_string()))?,
        };
        parsed.check().map_err(|e| ComponentError::Config(e.to_string()))?;
        *self.config.lock() = parsed;
        Ok(())
    }

    fn bind(&self, dependency: &ComponentRef) -> Result<(), ComponentError> {
        let device = dependency.block_device()?;
        if !self.deps.is_empty() {
            return Err(ComponentError::IncompatibleDependency(
                "service wraps exactly one stack".into(),
            ));
        }
        self.deps.push(dependency)?;
        *self.stack.write() = Some(device);
        Ok(())
    }

    fn start(&self) -> Result<(), ComponentError> {
        if self.core.read().is_some() {
            return Ok(());
        }
        self.open().map_err(|e| ComponentError::StartFailed(e.to_string()))
    }

    fn teardown(&self) {
        self.shutdown();
        *self.stack.write() = None;
        self.deps.release_all();
    }

    fn as_block_device(self: Arc<Self>) -> Option<Arc<dyn BlockDevice>> {
        Some(self)
    }

    fn as_zerocopy_memory(self: Arc<Self>) -> Option<Arc<dyn ZerocopyMemory>> {
        self.stack.read().as_ref().map(|s| s.memory())
    }
}

impl Drop for IoService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests;
