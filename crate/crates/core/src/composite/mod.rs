//! Block devices stacked on other block devices.
//!
//! Each composite is a [`Router`] plugged into [`CompositeDevice`]. The
//! router turns a descriptor into child IOs and folds child completions
//! back into one status; [`CompositeQueue`] does the bookkeeping: internal
//! tags, backlog on child `QueueFull`, and completion delivery. Every queue
//! opened on a composite opens its own queue on each child, so a child
//! shared by several parents sees one independent queue per consumer.
//!
//! Child IOs reference the caller's buffer at an adjusted offset; nothing is
//! copied on the way down (the cache keeps resident copies by design).

mod cache;
mod partition;
mod raid0;
mod raid1;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::blockdev::{
    BlockDevice, Completion, DeviceError, DeviceInfo, DeviceQueues, IoDescriptor, IoOp, IoQueue,
    IoStatus, SubmitError, SyncQueue, DEFAULT_QUEUE_DEPTH,
};
use crate::component::{
    Component, ComponentError, ComponentId, ComponentRef, Dependencies, InterfaceId,
    IBLOCK_DEVICE, IZEROCOPY_MEMORY,
};
use crate::memory::{InflightGuard, IoArena, IoBuffer, MemoryError, ZerocopyMemory};

pub use cache::{BlockCache, CacheConfig, CacheRouter, CacheStats};
pub use partition::{
    partition_format, partition_read, Partition, PartitionConfig, PartitionEntry,
    PartitionError, PartitionRouter, PARTITION_MAGIC, PARTITION_NAME_LEN,
};
pub use raid0::{raid0_map, Raid0, Raid0Config, Raid0Router};
pub use raid1::{Raid1, Raid1Config, Raid1Router};

pub type Raid0Device = CompositeDevice<Raid0>;
pub type Raid1Device = CompositeDevice<Raid1>;
pub type CacheDevice = CompositeDevice<BlockCache>;
pub type PartitionDevice = CompositeDevice<Partition>;

/// One IO a router wants issued to a child. `offset` is relative to the
/// parent descriptor's buffer offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildIo {
    pub child: usize,
    pub op: IoOp,
    pub lba: u64,
    pub block_count: u32,
    pub offset: usize,
}

impl ChildIo {
    pub fn flush(child: usize) -> ChildIo {
        ChildIo {
            child,
            op: IoOp::Flush,
            lba: 0,
            block_count: 0,
            offset: 0,
        }
    }
}

pub enum Begin<O> {
    Wait(O),
    Done(IoStatus),
}

pub enum Step {
    Wait,
    Done(IoStatus),
}

pub trait Router: Send + Sync + 'static {
    type Op: Send;

    fn info(&self) -> &DeviceInfo;

    /// Start a validated descriptor, pushing child IOs into `io`.
    fn start(&self, desc: &IoDescriptor, io: &mut Vec<ChildIo>) -> Begin<Self::Op>;

    /// One child IO of `desc` finished; may push further child IOs.
    fn child_done(
        &self,
        op: &mut Self::Op,
        desc: &IoDescriptor,
        child: usize,
        status: IoStatus,
        io: &mut Vec<ChildIo>,
    ) -> Step;
}

/// Fan-out bookkeeping for ops sent to several children at once.
#[derive(Debug, Clone, Copy)]
pub struct FanOut {
    pub remaining: usize,
    pub status: IoStatus,
}

impl FanOut {
    pub fn new(remaining: usize) -> FanOut {
        FanOut {
            remaining,
            status: IoStatus::Ok,
        }
    }

    pub fn complete(&mut self, status: IoStatus) -> Step {
        self.status = self.status.worst(status);
        self.remaining -= 1;
        if self.remaining == 0 {
            Step::Done(self.status)
        } else {
            Step::Wait
        }
    }
}

/// Memory of a composite: its own arena, with every buffer also registered
/// with each child so child IOs pass their access checks.
pub struct CompositeMemory {
    arena: IoArena,
    children: RwLock<Vec<Arc<dyn ZerocopyMemory>>>,
}

impl Default for CompositeMemory {
    fn default() -> Self {
        CompositeMemory {
            arena: IoArena::default(),
            children: RwLock::new(Vec::new()),
        }
    }
}

impl CompositeMemory {
    pub fn add_child(&self, child: Arc<dyn ZerocopyMemory>) {
        self.children.write().push(child);
    }

    pub fn clear_children(&self) {
        self.children.write().clear();
    }

    fn register_with_children(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        for child in self.children.read().iter() {
            child.register_io_buffer(buffer)?;
        }
        Ok(())
    }
}

impl ZerocopyMemory for CompositeMemory {
    fn allocate_io_buffer(&self, size: usize, alignment: usize, numa_node: i32) -> Result<IoBuffer, MemoryError> {
        let buffer = self.arena.allocate_io_buffer(size, alignment, numa_node)?;
        if let Err(e) = self.register_with_children(&buffer) {
            let _ = self.free_io_buffer(&buffer);
            return Err(e);
        }
        Ok(buffer)
    }

    fn realloc_io_buffer(&self, buffer: &IoBuffer, size: usize, alignment: usize) -> Result<(), MemoryError> {
        self.arena.realloc_io_buffer(buffer, size, alignment)?;
        self.register_with_children(buffer)
    }

    fn free_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        self.arena.free_io_buffer(buffer)?;
        for child in self.children.read().iter() {
            let _ = child.unregister_io_buffer(buffer);
        }
        Ok(())
    }

    fn register_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        self.arena.register_io_buffer(buffer)?;
        self.register_with_children(buffer)
    }

    fn unregister_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        for child in self.children.read().iter() {
            let _ = child.unregister_io_buffer(buffer);
        }
        self.arena.unregister_io_buffer(buffer)
    }

    fn check_access(&self, base: usize, len: usize) -> bool {
        self.arena.check_access(base, len)
    }

    fn bytes_outstanding(&self) -> usize {
        self.arena.bytes_outstanding()
    }
}

struct Pending<O> {
    desc: IoDescriptor,
    op: O,
    _guard: Option<InflightGuard>,
}

struct QueueState<O> {
    next_id: u64,
    ops: HashMap<u64, Pending<O>>,
    backlog: VecDeque<(usize, IoDescriptor)>,
    /// Child IOs the child rejected synchronously, delivered on next poll.
    rejected: Vec<(usize, Completion)>,
    ready: VecDeque<Completion>,
    scratch: Vec<Completion>,
    io: Vec<ChildIo>,
}

/// Queue pair on a composite device.
pub struct CompositeQueue<R: Router> {
    router: Arc<R>,
    children: Vec<Arc<dyn IoQueue>>,
    memory: Arc<CompositeMemory>,
    state: Mutex<QueueState<R::Op>>,
    outstanding: AtomicUsize,
    depth: usize,
}

impl<R: Router> CompositeQueue<R> {
    pub fn new(router: Arc<R>, children: Vec<Arc<dyn IoQueue>>, memory: Arc<CompositeMemory>) -> Self {
        CompositeQueue {
            router,
            children,
            memory,
            state: Mutex::new(QueueState {
                next_id: 1,
                ops: HashMap::new(),
                backlog: VecDeque::new(),
                rejected: Vec::new(),
                ready: VecDeque::new(),
                scratch: Vec::new(),
                io: Vec::new(),
            }),
            outstanding: AtomicUsize::new(0),
            depth: DEFAULT_QUEUE_DEPTH,
        }
    }

    fn issue(&self, state: &mut QueueState<R::Op>, id: u64, parent: &IoDescriptor, ios: &[ChildIo]) {
        for io in ios {
            let desc = IoDescriptor {
                op: io.op,
                lba: io.lba,
                block_count: io.block_count,
                buffer: if io.op == IoOp::Flush { None } else { parent.buffer.clone() },
                offset: parent.offset + io.offset,
                tag: id,
            };
            if !state.backlog.is_empty() {
                state.backlog.push_back((io.child, desc));
                continue;
            }
            self.submit_child(state, io.child, desc);
        }
    }

    /// Returns false if the child queue was full and the IO was backlogged.
    fn submit_child(&self, state: &mut QueueState<R::Op>, child: usize, desc: IoDescriptor) -> bool {
        match self.children[child].submit(&desc) {
            Ok(()) => true,
            Err(SubmitError::QueueFull) => {
                state.backlog.push_back((child, desc));
                false
            }
            Err(SubmitError::Rejected(status)) => {
                state.rejected.push((child, Completion { tag: desc.tag, status }));
                true
            }
            Err(SubmitError::NotOpen) => {
                state.rejected.push((
                    child,
                    Completion {
                        tag: desc.tag,
                        status: IoStatus::Io,
                    },
                ));
                true
            }
        }
    }

    fn drain_backlog(&self, state: &mut QueueState<R::Op>) -> bool {
        let mut progressed = false;
        while let Some((child, desc)) = state.backlog.pop_front() {
            if !self.submit_child(state, child, desc) {
                // put it back at the front to keep submission order
                let last = state.backlog.pop_back().unwrap();
                state.backlog.push_front(last);
                break;
            }
            progressed = true;
        }
        progressed
    }

    fn child_completed(&self, state: &mut QueueState<R::Op>, child: usize, c: Completion) {
        let Some(pending) = state.ops.get_mut(&c.tag) else {
            log::error!("composite: completion for unknown child tag {}", c.tag);
            return;
        };
        let mut io = std::mem::take(&mut state.io);
        io.clear();
        let step = self
            .router
            .child_done(&mut pending.op, &pending.desc, child, c.status, &mut io);
        if !io.is_empty() {
            let parent = pending.desc.clone();
            self.issue(state, c.tag, &parent, &io);
        }
        state.io = io;
        if let Step::Done(status) = step {
            let pending = state.ops.remove(&c.tag).unwrap();
            state.ready.push_back(Completion {
                tag: pending.desc.tag,
                status,
            });
        }
    }

    fn progress(&self, state: &mut QueueState<R::Op>) -> bool {
        let mut progressed = self.drain_backlog(state);
        let rejected = std::mem::take(&mut state.rejected);
        for (child, c) in rejected {
            self.child_completed(state, child, c);
            progressed = true;
        }
        let mut scratch = std::mem::take(&mut state.scratch);
        for (i, child) in self.children.iter().enumerate() {
            scratch.clear();
            if child.poll(DEFAULT_QUEUE_DEPTH, &mut scratch) > 0 {
                progressed = true;
                for c in scratch.drain(..) {
                    self.child_completed(state, i, c);
                }
            }
        }
        state.scratch = scratch;
        progressed
    }
}

impl<R: Router> IoQueue for CompositeQueue<R> {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        desc.validate(self.router.info(), self.memory.as_ref())
            .map_err(SubmitError::Rejected)?;
        if self.outstanding.load(Ordering::Acquire) >= self.depth {
            return Err(SubmitError::QueueFull);
        }
        let mut state = self.state.lock();
        let id = state.next_id;
        state.next_id += 1;
        let mut io = std::mem::take(&mut state.io);
        io.clear();
        let guard = desc.buffer.as_ref().map(|b| b.inflight_guard());
        match self.router.start(desc, &mut io) {
            Begin::Done(status) => state.ready.push_back(Completion {
                tag: desc.tag,
                status,
            }),
            Begin::Wait(op) => {
                state.ops.insert(
                    id,
                    Pending {
                        desc: desc.clone(),
                        op,
                        _guard: guard,
                    },
                );
                self.issue(&mut state, id, desc, &io);
            }
        }
        state.io = io;
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        if self.outstanding.load(Ordering::Acquire) == 0 {
            return 0;
        }
        let mut state = self.state.lock();
        for _ in 0..4 {
            if state.ready.len() >= max || !self.progress(&mut state) {
                break;
            }
        }
        let n = state.ready.len().min(max);
        out.extend(state.ready.drain(..n));
        self.outstanding.fetch_sub(n, Ordering::AcqRel);
        n
    }

    fn info(&self) -> DeviceInfo {
        self.router.info().clone()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.memory.clone()
    }

    fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }
}

/// Static description of one composite type.
pub trait Kind: Send + Sync + 'static {
    type Config: DeserializeOwned + Default + Send + Sync;
    type Router: Router;
    const COMPONENT_ID: ComponentId;
    const NAME: &'static str;
    const MIN_CHILDREN: usize;
    const MAX_CHILDREN: usize;

    fn build(
        config: &Self::Config,
        children: &[Arc<dyn BlockDevice>],
        device_id: u64,
    ) -> Result<Self::Router, DeviceError>;
}

/// A composite device component, generic over its [`Kind`].
pub struct CompositeDevice<K: Kind> {
    config: Mutex<K::Config>,
    deps: Dependencies,
    children: RwLock<Vec<Arc<dyn BlockDevice>>>,
    router: RwLock<Option<Arc<K::Router>>>,
    memory: Arc<CompositeMemory>,
    queues: DeviceQueues,
    device_id: u64,
}

impl<K: Kind> Default for CompositeDevice<K> {
    fn default() -> Self {
        CompositeDevice {
            config: Mutex::new(K::Config::default()),
            deps: Dependencies::default(),
            children: RwLock::new(Vec::new()),
            router: RwLock::new(None),
            memory: Arc::new(CompositeMemory::default()),
            queues: DeviceQueues::default(),
            device_id: crate::blockdev::next_device_id(),
        }
    }
}

impl<K: Kind> CompositeDevice<K> {
    /// Build directly over devices, outside the component runtime.
    pub fn over(config: K::Config, children: Vec<Arc<dyn BlockDevice>>) -> Result<Arc<Self>, DeviceError> {
        let device = Arc::new(Self::default());
        *device.config.lock() = config;
        for child in &children {
            device.memory.add_child(child.memory());
        }
        *device.children.write() = children;
        device.open()?;
        Ok(device)
    }

    fn open(&self) -> Result<(), DeviceError> {
        let children = self.children.read().clone();
        if children.len() < K::MIN_CHILDREN {
            return Err(DeviceError::Invalid(format!(
                "{} needs at least {} children, has {}",
                K::NAME,
                K::MIN_CHILDREN,
                children.len()
            )));
        }
        let router = K::build(&self.config.lock(), &children, self.device_id)?;
        *self.router.write() = Some(Arc::new(router));
        Ok(())
    }

    pub fn router(&self) -> Result<Arc<K::Router>, DeviceError> {
        self.router.read().clone().ok_or(DeviceError::NotOpen)
    }

    pub fn children(&self) -> Vec<Arc<dyn BlockDevice>> {
        self.children.read().clone()
    }
}

impl<K: Kind> BlockDevice for CompositeDevice<K> {
    fn info(&self) -> Result<DeviceInfo, DeviceError> {
        Ok(self.router()?.info().clone())
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.memory.clone()
    }

    fn open_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        let router = self.router()?;
        let children = self
            .children
            .read()
            .iter()
            .map(|c| c.open_queue())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Arc::new(CompositeQueue::new(router, children, self.memory.clone())))
    }

    fn primary_queue(&self) -> Result<Arc<dyn IoQueue>, DeviceError> {
        self.queues.primary(|| self.open_queue())
    }

    fn sync_queue(&self) -> Result<&SyncQueue, DeviceError> {
        self.queues.sync(|| self.open_queue())
    }
}

impl<K: Kind> Component for CompositeDevice<K> {
    fn component_id(&self) -> ComponentId {
        K::COMPONENT_ID
    }

    fn interfaces(&self) -> &[InterfaceId] {
        &[IBLOCK_DEVICE, IZEROCOPY_MEMORY]
    }

    fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        let config = if config.is_null() {
            Value::Object(Default::default())
        } else {
            config.clone()
        };
        *self.config.lock() = serde_json::from_value(config)
            .map_err(|e| ComponentError::Config(format!("{}: {e}", K::NAME)))?;
        Ok(())
    }

    fn bind(&self, dependency: &ComponentRef) -> Result<(), ComponentError> {
        if self.deps.len() >= K::MAX_CHILDREN {
            return Err(ComponentError::IncompatibleDependency(format!(
                "{} accepts at most {} children",
                K::NAME,
                K::MAX_CHILDREN
            )));
        }
        let device = dependency.block_device()?;
        let memory = dependency.zerocopy_memory()?;
        self.deps.push(dependency)?;
        self.memory.add_child(memory);
        self.children.write().push(device);
        Ok(())
    }

    fn start(&self) -> Result<(), ComponentError> {
        if self.children.read().len() < K::MIN_CHILDREN {
            return Err(ComponentError::IncompatibleDependency(format!(
                "{} needs at least {} bound block devices, has {}",
                K::NAME,
                K::MIN_CHILDREN,
                self.children.read().len()
            )));
        }
        self.open()
            .map_err(|e| ComponentError::StartFailed(format!("{}: {e}", K::NAME)))
    }

    fn teardown(&self) {
        *self.router.write() = None;
        self.children.write().clear();
        self.memory.clear_children();
        self.deps.release_all();
    }

    fn as_block_device(self: Arc<Self>) -> Option<Arc<dyn BlockDevice>> {
        Some(self)
    }

    fn as_zerocopy_memory(self: Arc<Self>) -> Option<Arc<dyn ZerocopyMemory>> {
        Some(self.memory.clone())
    }
}

/// Common geometry checks for children that must share a block size.
pub(crate) fn child_infos(children: &[Arc<dyn BlockDevice>]) -> Result<Vec<DeviceInfo>, DeviceError> {
    let infos = children
        .iter()
        .map(|c| c.info())
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = infos.first() {
        if infos.iter().any(|i| i.block_size != first.block_size) {
            return Err(DeviceError::Invalid("children have different block sizes".into()));
        }
    }
    Ok(infos)
}

pub(crate) fn virtual_info(block_size: u32, block_count: u64, device_id: u64) -> DeviceInfo {
    DeviceInfo {
        block_size,
        block_count,
        device_id,
        supports_flush: true,
        io_mode: "virtual",
    }
}
