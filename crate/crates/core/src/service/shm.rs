//! Cross-process descriptor queues in a memory-mapped segment file.
//!
//! ```text
//! 0     header: magic "CMNC", version u32 = 1, ring_order u32,
//!       desc_count u32, data_offset u64, data_size u64
//! 64    control block, one cache line per writer:
//!         +0   server seq u64, in_service u64
//!         +64  client seq u64, client_held u64
//!         +128 attach count u64, stop request u64, server state u64,
//!              client closed u64
//! 256   free ring        u32 descriptor indices (server -> client)
//!       submission ring  u32 descriptor indices (client -> server)
//!       completion ring  16-byte (tag u64, status i32, pad u32)
//!       descriptor pool  desc_count x 64-byte records
//!       data region      4096-aligned
//! ```
//!
//! Each ring uses the layout of [`crate::ring`]. The client allocates a
//! descriptor from the free ring and submits it; the server executes it,
//! posts a self-contained completion and returns the index to the free
//! ring. The header magic is written last, so a half-built segment never
//! attaches.
//!
//! Both sides bump their seq (odd while updating) around every change that
//! moves a descriptor, so a third party can take a consistent census.

use std::any::Any;
use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{fence, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use memmap2::MmapRaw;
use parking_lot::Mutex;
use thiserror::Error;

use super::worker::Task;
use crate::blockdev::{
    Completion, DeviceInfo, IoDescriptor, IoOp, IoQueue, IoStatus, SubmitError, DEFAULT_QUEUE_DEPTH,
};
use crate::memory::{InflightGuard, IoArena, IoBuffer, ZerocopyMemory, DEFAULT_ALIGNMENT};
use crate::ring::{ring_bytes, Consumer, Producer, RawRing, CACHE_LINE};

pub const SHM_MAGIC: [u8; 4] = *b"CMNC";
pub const SHM_VERSION: u32 = 1;
pub const SHM_DIR_ENV: &str = "COMANCHE_SHM_DIR";
pub const DESCRIPTOR_LEN: usize = 64;
pub const MAX_RING_ORDER: u32 = 20;

const CONTROL: usize = 64;
const SERVER_SEQ: usize = CONTROL;
const IN_SERVICE: usize = CONTROL + 8;
const CLIENT_SEQ: usize = CONTROL + 64;
const CLIENT_HELD: usize = CONTROL + 72;
const ATTACHED: usize = CONTROL + 128;
const STOP_REQUEST: usize = CONTROL + 136;
const SERVER_STATE: usize = CONTROL + 144;
const CLIENT_CLOSED: usize = CONTROL + 152;
const RINGS: usize = 256;

pub const SERVER_IDLE: u64 = 0;
pub const SERVER_RUNNING: u64 = 1;
pub const SERVER_STOPPED: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShmError {
    #[error("segment {0} already exists")]
    Exists(String),
    #[error("segment {0} not found")]
    NotFound(String),
    #[error("VersionMismatch: {0}")]
    VersionMismatch(String),
    #[error("NoFreeDescriptors")]
    NoFreeDescriptors,
    #[error("InvalidIndex: {0}")]
    InvalidIndex(u32),
    #[error("invalid segment parameters: {0}")]
    Invalid(String),
    #[error("segment IO: {0}")]
    Io(String),
}

fn io_err(e: std::io::Error) -> ShmError {
    ShmError::Io(e.to_string())
}

/// Directory segment files live in.
pub fn shm_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(SHM_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let dev_shm = Path::new("/dev/shm");
    if dev_shm.is_dir() {
        return dev_shm.to_path_buf();
    }
    std::env::temp_dir()
}

pub fn segment_path(name: &str) -> PathBuf {
    shm_dir().join(format!("{name}.cmnc"))
}

fn align_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// Offsets of every part of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShmLayout {
    pub ring_order: u32,
    pub desc_count: u32,
    pub free_ring: usize,
    pub submission_ring: usize,
    pub completion_ring: usize,
    pub descriptors: usize,
    pub data_offset: usize,
    pub data_size: usize,
    pub total: usize,
}

impl ShmLayout {
    pub fn new(ring_order: u32, desc_count: u32, data_size: usize) -> Result<ShmLayout, ShmError> {
        if ring_order == 0 || ring_order > MAX_RING_ORDER {
            return Err(ShmError::Invalid(format!("ring order {ring_order}")));
        }
        if desc_count == 0 || desc_count as u64 > 1 << ring_order {
            return Err(ShmError::Invalid(format!(
                "{desc_count} descriptors do not fit rings of {} slots",
                1u64 << ring_order
            )));
        }
        if data_size == 0 {
            return Err(ShmError::Invalid("empty data region".into()));
        }
        let index_ring = align_up(ring_bytes::<u32>(ring_order), CACHE_LINE);
        let completion_ring = align_up(ring_bytes::<ShmCompletion>(ring_order), CACHE_LINE);
        let free_ring = RINGS;
        let submission_ring = free_ring + index_ring;
        let comp = submission_ring + index_ring;
        let descriptors = comp + completion_ring;
        let data_offset = align_up(descriptors + desc_count as usize * DESCRIPTOR_LEN, 4096);
        let data_size = align_up(data_size, 4096);
        Ok(ShmLayout {
            ring_order,
            desc_count,
            free_ring,
            submission_ring,
            completion_ring: comp,
            descriptors,
            data_offset,
            data_size,
            total: data_offset + data_size,
        })
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShmCompletion {
    pub tag: u64,
    pub status: i32,
    pub pad: u32,
}

/// One 64-byte descriptor record.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShmDescriptor {
    pub op: u8,
    pub pad: [u8; 3],
    pub block_count: u32,
    pub lba: u64,
    /// Byte offset into the data region.
    pub data_offset: u64,
    pub tag: u64,
    pub reserved: [u8; 32],
}

const _: () = assert!(std::mem::size_of::<ShmDescriptor>() == DESCRIPTOR_LEN);
const _: () = assert!(std::mem::size_of::<ShmCompletion>() == 16);

impl ShmDescriptor {
    pub fn new(op: IoOp, lba: u64, block_count: u32, data_offset: u64, tag: u64) -> ShmDescriptor {
        ShmDescriptor {
            op: op as u8,
            pad: [0; 3],
            block_count,
            lba,
            data_offset,
            tag,
            reserved: [0; 32],
        }
    }
}

/// A census of descriptor indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShmCounts {
    pub free: u64,
    pub submitted: u64,
    pub in_service: u64,
    /// Allocated by the client and not yet submitted.
    pub client_held: u64,
}

impl ShmCounts {
    pub fn total(&self) -> u64 {
        self.free + self.submitted + self.in_service + self.client_held
    }
}

/// One mapping of a segment. Every mapping counts as an attachment; the
/// file is removed when the last one detaches.
pub struct ShmSegment {
    map: Arc<MmapRaw>,
    path: PathBuf,
    name: String,
    layout: ShmLayout,
}

impl std::fmt::Debug for ShmSegment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmSegment")
            .field("path", &self.path)
            .field("layout", &self.layout)
            .finish()
    }
}

impl ShmSegment {
    pub fn create(name: &str, ring_order: u32, desc_count: u32, data_size: usize) -> Result<ShmSegment, ShmError> {
        let layout = ShmLayout::new(ring_order, desc_count, data_size)?;
        let path = segment_path(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => ShmError::Exists(path.display().to_string()),
                _ => io_err(e),
            })?;
        let built = (|| {
            file.set_len(layout.total as u64).map_err(io_err)?;
            let map = MmapRaw::map_raw(&file).map_err(io_err)?;
            Ok::<_, ShmError>(map)
        })();
        let map = match built {
            Ok(m) => m,
            Err(e) => {
                let _ = std::fs::remove_file(&path);
                return Err(e);
            }
        };
        let seg = ShmSegment {
            map: Arc::new(map),
            path,
            name: name.to_string(),
            layout,
        };
        seg.initialize();
        Ok(seg)
    }

    fn initialize(&self) {
        let l = self.layout;
        let base = self.base();
        unsafe {
            std::ptr::write_bytes(base, 0, l.descriptors);
            base.add(4).cast::<u32>().write_unaligned(SHM_VERSION.to_le());
            base.add(8).cast::<u32>().write_unaligned(l.ring_order.to_le());
            base.add(12).cast::<u32>().write_unaligned(l.desc_count.to_le());
            base.add(16).cast::<u64>().write_unaligned((l.data_offset as u64).to_le());
            base.add(24).cast::<u64>().write_unaligned((l.data_size as u64).to_le());
            RawRing::<u32>::init_at(base.add(l.free_ring));
            RawRing::<u32>::init_at(base.add(l.submission_ring));
            RawRing::<ShmCompletion>::init_at(base.add(l.completion_ring));
        }
        let mut free = Producer::new(Arc::new(self.ring::<u32>(l.free_ring)));
        for i in 0..l.desc_count {
            free.push(i).expect("free ring holds every descriptor");
        }
        self.counter(ATTACHED).store(1, Ordering::Release);
        self.magic().store(u32::from_le_bytes(SHM_MAGIC), Ordering::Release);
    }

    pub fn attach(name: &str) -> Result<ShmSegment, ShmError> {
        let path = segment_path(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => ShmError::NotFound(path.display().to_string()),
                _ => io_err(e),
            })?;
        let len = file.metadata().map_err(io_err)?.len() as usize;
        if len < RINGS {
            return Err(ShmError::VersionMismatch("segment too short".into()));
        }
        let map = MmapRaw::map_raw(&file).map_err(io_err)?;
        let layout = Self::read_header(&map, len)?;
        let seg = ShmSegment {
            map: Arc::new(map),
            path,
            name: name.to_string(),
            layout,
        };
        seg.counter(ATTACHED).fetch_add(1, Ordering::AcqRel);
        Ok(seg)
    }

    fn read_header(map: &MmapRaw, len: usize) -> Result<ShmLayout, ShmError> {
        let base = map.as_mut_ptr();
        let magic = unsafe { &*(base as *const AtomicU32) }.load(Ordering::Acquire);
        if magic.to_le_bytes() != SHM_MAGIC {
            return Err(ShmError::VersionMismatch(format!("bad magic {:08x}", magic)));
        }
        let (version, order, count, data_offset, data_size) = unsafe {
            (
                u32::from_le(base.add(4).cast::<u32>().read_unaligned()),
                u32::from_le(base.add(8).cast::<u32>().read_unaligned()),
                u32::from_le(base.add(12).cast::<u32>().read_unaligned()),
                u64::from_le(base.add(16).cast::<u64>().read_unaligned()),
                u64::from_le(base.add(24).cast::<u64>().read_unaligned()),
            )
        };
        if version != SHM_VERSION {
            return Err(ShmError::VersionMismatch(format!(
                "segment version {version}, expected {SHM_VERSION}"
            )));
        }
        let layout = ShmLayout::new(order, count, data_size as usize)
            .map_err(|e| ShmError::VersionMismatch(e.to_string()))?;
        if layout.data_offset as u64 != data_offset || layout.total > len {
            return Err(ShmError::VersionMismatch("header does not match segment size".into()));
        }
        Ok(layout)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn layout(&self) -> ShmLayout {
        self.layout
    }

    fn base(&self) -> *mut u8 {
        self.map.as_mut_ptr()
    }

    fn magic(&self) -> &AtomicU32 {
        unsafe { &*(self.base() as *const AtomicU32) }
    }

    fn counter(&self, at: usize) -> &AtomicU64 {
        unsafe { &*(self.base().add(at) as *const AtomicU64) }
    }

    /// Raw header bytes.
    pub fn header_bytes(&self) -> [u8; 32] {
        let mut h = [0u8; 32];
        unsafe { std::ptr::copy_nonoverlapping(self.base(), h.as_mut_ptr(), 32) };
        h
    }

    fn keep(&self) -> Option<Arc<dyn Any + Send + Sync>> {
        Some(self.map.clone())
    }

    fn ring<T: Copy>(&self, at: usize) -> RawRing<T> {
        // SAFETY: offsets come from the layout and the ring was initialized
        // by the creator; the mapping is kept alive by the ring.
        unsafe { RawRing::attach(self.base().add(at), self.layout.ring_order, self.keep()) }
    }

    fn descriptor_ptr(&self, index: u32) -> *mut ShmDescriptor {
        unsafe {
            self.base()
                .add(self.layout.descriptors + index as usize * DESCRIPTOR_LEN)
                .cast()
        }
    }

    pub fn data_ptr(&self) -> *mut u8 {
        unsafe { self.base().add(self.layout.data_offset) }
    }

    pub fn attach_count(&self) -> u64 {
        self.counter(ATTACHED).load(Ordering::Acquire)
    }

    pub fn request_stop(&self) {
        self.counter(STOP_REQUEST).store(1, Ordering::Release);
    }

    pub fn stop_requested(&self) -> bool {
        self.counter(STOP_REQUEST).load(Ordering::Acquire) != 0
    }

    pub fn server_state(&self) -> u64 {
        self.counter(SERVER_STATE).load(Ordering::Acquire)
    }

    fn set_server_state(&self, state: u64) {
        self.counter(SERVER_STATE).store(state, Ordering::Release);
    }

    fn client_closed(&self) -> bool {
        self.counter(CLIENT_CLOSED).load(Ordering::Acquire) != 0
    }

    fn seq_write(&self, at: usize, f: impl FnOnce()) {
        let seq = self.counter(at);
        seq.fetch_add(1, Ordering::AcqRel);
        fence(Ordering::Release);
        f();
        seq.fetch_add(1, Ordering::Release);
    }

    /// Consistent census of descriptor indices, or `None` if both sides kept
    /// the seqlocks busy for every attempt.
    pub fn census(&self) -> Option<ShmCounts> {
        let l = self.layout;
        let len_of = |at: usize| unsafe {
            let head = &*(self.base().add(at) as *const AtomicU64);
            let tail = &*(self.base().add(at + CACHE_LINE) as *const AtomicU64);
            head.load(Ordering::Acquire).wrapping_sub(tail.load(Ordering::Acquire))
        };
        for attempt in 0..100_000u32 {
            let s1 = self.counter(SERVER_SEQ).load(Ordering::Acquire);
            let c1 = self.counter(CLIENT_SEQ).load(Ordering::Acquire);
            if s1 % 2 == 0 && c1 % 2 == 0 {
                let counts = ShmCounts {
                    free: len_of(l.free_ring),
                    submitted: len_of(l.submission_ring),
                    in_service: self.counter(IN_SERVICE).load(Ordering::Acquire),
                    client_held: self.counter(CLIENT_HELD).load(Ordering::Acquire),
                };
                fence(Ordering::Acquire);
                let s2 = self.counter(SERVER_SEQ).load(Ordering::Acquire);
                let c2 = self.counter(CLIENT_SEQ).load(Ordering::Acquire);
                if s1 == s2 && c1 == c2 {
                    return Some(counts);
                }
            }
            if attempt % 64 == 63 {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
        None
    }
}

impl Drop for ShmSegment {
    fn drop(&mut self) {
        if self.counter(ATTACHED).fetch_sub(1, Ordering::AcqRel) == 1 {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

struct ClientRings {
    free: Consumer<u32>,
    sub: Producer<u32>,
    comp: Consumer<ShmCompletion>,
}

/// Application side of a segment.
pub struct ShmClient {
    seg: Arc<ShmSegment>,
    rings: Mutex<ClientRings>,
}

impl ShmClient {
    pub fn new(seg: Arc<ShmSegment>) -> ShmClient {
        let l = seg.layout;
        let rings = ClientRings {
            free: Consumer::new(Arc::new(seg.ring(l.free_ring))),
            sub: Producer::new(Arc::new(seg.ring(l.submission_ring))),
            comp: Consumer::new(Arc::new(seg.ring(l.completion_ring))),
        };
        ShmClient {
            seg,
            rings: Mutex::new(rings),
        }
    }

    pub fn attach(name: &str) -> Result<ShmClient, ShmError> {
        Ok(ShmClient::new(Arc::new(ShmSegment::attach(name)?)))
    }

    pub fn segment(&self) -> &Arc<ShmSegment> {
        &self.seg
    }

    pub fn desc_alloc(&self) -> Result<u32, ShmError> {
        let mut rings = self.rings.lock();
        let mut got = None;
        self.seg.seq_write(CLIENT_SEQ, || {
            got = rings.free.pop();
            if got.is_some() {
                self.seg.counter(CLIENT_HELD).fetch_add(1, Ordering::Relaxed);
            }
        });
        got.ok_or(ShmError::NoFreeDescriptors)
    }

    pub fn write_descriptor(&self, index: u32, desc: &ShmDescriptor) -> Result<(), ShmError> {
        self.check_index(index)?;
        unsafe { self.seg.descriptor_ptr(index).write_volatile(*desc) };
        Ok(())
    }

    pub fn read_descriptor(&self, index: u32) -> Result<ShmDescriptor, ShmError> {
        self.check_index(index)?;
        Ok(unsafe { self.seg.descriptor_ptr(index).read_volatile() })
    }

    fn check_index(&self, index: u32) -> Result<(), ShmError> {
        if index >= self.seg.layout.desc_count {
            return Err(ShmError::InvalidIndex(index));
        }
        Ok(())
    }

    pub fn submit(&self, index: u32) -> Result<(), ShmError> {
        self.check_index(index)?;
        let mut rings = self.rings.lock();
        let mut pushed = Ok(());
        self.seg.seq_write(CLIENT_SEQ, || {
            pushed = rings.sub.push(index);
            if pushed.is_ok() {
                self.seg.counter(CLIENT_HELD).fetch_sub(1, Ordering::Relaxed);
            }
        });
        // rings hold every descriptor, so only a bogus double submit fails
        pushed.map_err(ShmError::InvalidIndex)
    }

    /// Up to `max` completions as (tag, status).
    pub fn reap(&self, max: usize) -> Vec<(u64, IoStatus)> {
        let mut rings = self.rings.lock();
        let mut out = Vec::new();
        while out.len() < max {
            match rings.comp.pop() {
                Some(c) => out.push((c.tag, IoStatus::from_code(c.status).unwrap_or(IoStatus::Io))),
                None => break,
            }
        }
        out
    }

    pub fn data_size(&self) -> usize {
        self.seg.layout.data_size
    }

    pub fn write_data(&self, offset: usize, data: &[u8]) {
        assert!(offset + data.len() <= self.data_size());
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), self.seg.data_ptr().add(offset), data.len()) };
    }

    pub fn read_data(&self, offset: usize, out: &mut [u8]) {
        assert!(offset + out.len() <= self.data_size());
        unsafe { std::ptr::copy_nonoverlapping(self.seg.data_ptr().add(offset), out.as_mut_ptr(), out.len()) };
    }

    /// Tell the server this client is gone.
    pub fn close(&self) {
        self.seg.counter(CLIENT_CLOSED).store(1, Ordering::Release);
    }
}

/// Server side: executes descriptors from a segment against a stack queue.
pub struct ShmServer {
    seg: Arc<ShmSegment>,
    free: Producer<u32>,
    sub: Consumer<u32>,
    comp: Producer<ShmCompletion>,
    queue: Arc<dyn IoQueue>,
    memory: Arc<dyn ZerocopyMemory>,
    block_size: u32,
    region: IoBuffer,
    tags: Vec<u64>,
    backlog: Vec<IoDescriptor>,
    done: Vec<(u32, ShmCompletion)>,
    scratch: Vec<Completion>,
    in_flight: usize,
    invalid: u64,
}

impl ShmServer {
    /// Serve `seg` on `queue`. The data region is registered with the
    /// queue's memory for the server's lifetime.
    pub fn new(seg: Arc<ShmSegment>, queue: Arc<dyn IoQueue>) -> Result<ShmServer, ShmError> {
        let l = seg.layout;
        let memory = queue.memory();
        // SAFETY: the region lies inside the mapping, which `keep` pins.
        let region = unsafe { IoBuffer::from_external(seg.data_ptr(), l.data_size, seg.keep()) };
        memory
            .register_io_buffer(&region)
            .map_err(|e| ShmError::Invalid(e.to_string()))?;
        let server = ShmServer {
            free: Producer::new(Arc::new(seg.ring(l.free_ring))),
            sub: Consumer::new(Arc::new(seg.ring(l.submission_ring))),
            comp: Producer::new(Arc::new(seg.ring(l.completion_ring))),
            block_size: queue.info().block_size,
            queue,
            memory,
            region,
            tags: vec![0; l.desc_count as usize],
            backlog: Vec::new(),
            done: Vec::new(),
            scratch: Vec::with_capacity(DEFAULT_QUEUE_DEPTH),
            in_flight: 0,
            invalid: 0,
            seg,
        };
        server.seg.set_server_state(SERVER_RUNNING);
        Ok(server)
    }

    pub fn segment(&self) -> &Arc<ShmSegment> {
        &self.seg
    }

    /// Submissions naming an index outside the pool.
    pub fn invalid_submissions(&self) -> u64 {
        self.invalid
    }

    fn descriptor(&self, index: u32) -> Result<IoDescriptor, IoStatus> {
        let rec = unsafe { self.seg.descriptor_ptr(index).read_volatile() };
        let op = IoOp::from_u8(rec.op).ok_or(IoStatus::Io)?;
        if op == IoOp::Flush {
            return Ok(IoDescriptor::flush(index as u64));
        }
        let len = rec.block_count as u64 * self.block_size as u64;
        let end = rec.data_offset.checked_add(len).ok_or(IoStatus::Bounds)?;
        if end > self.region.len() as u64 {
            return Err(IoStatus::Bounds);
        }
        Ok(IoDescriptor {
            op,
            lba: rec.lba,
            block_count: rec.block_count,
            buffer: Some(self.region.clone()),
            offset: rec.data_offset as usize,
            tag: index as u64,
        })
    }

    fn finish(&mut self, index: u32, status: IoStatus) {
        self.done.push((
            index,
            ShmCompletion {
                tag: self.tags[index as usize],
                status: status.code(),
                pad: 0,
            },
        ));
    }

    /// Submit to the stack; false if it was full.
    fn forward(&mut self, desc: IoDescriptor) -> bool {
        match self.queue.submit(&desc) {
            Ok(()) => {
                self.in_flight += 1;
                true
            }
            Err(SubmitError::QueueFull) => {
                self.backlog.push(desc);
                false
            }
            Err(SubmitError::Rejected(status)) => {
                self.finish(desc.tag as u32, status);
                true
            }
            Err(SubmitError::NotOpen) => {
                self.finish(desc.tag as u32, IoStatus::Io);
                true
            }
        }
    }

    fn post_completions(&mut self) -> bool {
        if self.done.is_empty() {
            return false;
        }
        let mut posted = 0;
        let (seg, comp, free, done) = (&self.seg, &mut self.comp, &mut self.free, &self.done);
        seg.seq_write(SERVER_SEQ, || {
            for (index, c) in done.iter() {
                if comp.push(*c).is_err() {
                    break;
                }
                free.push(*index).expect("free ring holds every descriptor");
                seg.counter(IN_SERVICE).fetch_sub(1, Ordering::Relaxed);
                posted += 1;
            }
        });
        self.done.drain(..posted);
        posted > 0
    }

    /// Everything accepted has completed and been posted.
    pub fn idle(&self) -> bool {
        self.in_flight == 0 && self.backlog.is_empty() && self.done.is_empty() && self.sub.ring().is_empty()
    }
}

impl Task for ShmServer {
    fn step(&mut self) -> bool {
        let mut progressed = false;
        let backlog = std::mem::take(&mut self.backlog);
        let mut iter = backlog.into_iter();
        for desc in iter.by_ref() {
            if !self.forward(desc) {
                break;
            }
            progressed = true;
        }
        self.backlog.extend(iter);
        while self.backlog.is_empty() {
            let mut index = None;
            let (seg, sub) = (&self.seg, &mut self.sub);
            seg.seq_write(SERVER_SEQ, || {
                index = sub.pop();
                if index.is_some() {
                    seg.counter(IN_SERVICE).fetch_add(1, Ordering::Relaxed);
                }
            });
            let Some(index) = index else { break };
            progressed = true;
            if index >= self.seg.layout.desc_count {
                // the index is unknown, so it cannot be returned either
                log::warn!("shm {}: submission of invalid index {index}", self.seg.name);
                self.invalid += 1;
                self.seg.seq_write(SERVER_SEQ, || {
                    self.seg.counter(IN_SERVICE).fetch_sub(1, Ordering::Relaxed);
                });
                continue;
            }
            self.tags[index as usize] = unsafe { self.seg.descriptor_ptr(index).read_volatile() }.tag;
            match self.descriptor(index) {
                Ok(desc) => {
                    self.forward(desc);
                }
                Err(status) => self.finish(index, status),
            }
        }
        self.scratch.clear();
        let n = self.queue.poll(DEFAULT_QUEUE_DEPTH, &mut self.scratch);
        if n > 0 {
            progressed = true;
            self.in_flight -= n;
            let scratch = std::mem::take(&mut self.scratch);
            for c in &scratch {
                self.finish(c.tag as u32, c.status);
            }
            self.scratch = scratch;
        }
        progressed |= self.post_completions();
        progressed
    }

    fn finished(&self) -> bool {
        (self.seg.client_closed() || self.seg.stop_requested()) && self.idle()
    }
}

impl Drop for ShmServer {
    fn drop(&mut self) {
        self.seg.set_server_state(SERVER_STOPPED);
        let _ = self.memory.unregister_io_buffer(&self.region);
    }
}

struct Pending {
    tag: u64,
    user: IoDescriptor,
    staging: Option<IoBuffer>,
    _guard: Option<InflightGuard>,
}

/// In-process client of a segment with the [`IoQueue`] contract.
///
/// Buffers from [`IoQueue::memory`] live in the segment's data region and
/// move without a copy. Buffers the stack's own memory permits are staged
/// through the data region.
pub struct ShmQueue {
    client: ShmClient,
    arena: Arc<IoArena>,
    stack_memory: Arc<dyn ZerocopyMemory>,
    info: DeviceInfo,
    pending: Mutex<HashMap<u64, Pending>>,
    next_tag: AtomicU64,
}

impl ShmQueue {
    pub fn new(client: ShmClient, info: DeviceInfo, stack_memory: Arc<dyn ZerocopyMemory>) -> ShmQueue {
        let seg = client.segment();
        // SAFETY: the data region stays mapped while `keep` lives.
        let arena = unsafe { IoArena::carved(seg.data_ptr() as usize, seg.layout.data_size, seg.keep()) };
        ShmQueue {
            client,
            arena: Arc::new(arena),
            stack_memory,
            info,
            pending: Mutex::new(HashMap::new()),
            next_tag: AtomicU64::new(1),
        }
    }

    pub fn client(&self) -> &ShmClient {
        &self.client
    }
}

impl IoQueue for ShmQueue {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        let data = self.client.seg.data_ptr() as usize;
        let len = desc.byte_len(self.info.block_size);
        let (data_offset, staging) = match &desc.buffer {
            None => (0, None),
            Some(_) if desc.validate(&self.info, self.arena.as_ref()).is_ok() => {
                let b = desc.buffer.as_ref().unwrap();
                ((b.base() + desc.offset - data) as u64, None)
            }
            Some(b) => {
                desc.validate(&self.info, self.stack_memory.as_ref())
                    .map_err(SubmitError::Rejected)?;
                let staging = self
                    .arena
                    .allocate_io_buffer(len, DEFAULT_ALIGNMENT, -1)
                    .map_err(|_| SubmitError::QueueFull)?;
                if desc.op == IoOp::Write {
                    let src = unsafe { b.device_slice(desc.offset, len) };
                    staging.write_at(0, src);
                }
                ((staging.base() - data) as u64, Some(staging))
            }
        };
        if desc.buffer.is_none() {
            desc.validate(&self.info, self.arena.as_ref())
                .map_err(SubmitError::Rejected)?;
        }
        let index = match self.client.desc_alloc() {
            Ok(i) => i,
            Err(_) => {
                if let Some(s) = staging {
                    let _ = self.arena.free_io_buffer(&s);
                }
                return Err(SubmitError::QueueFull);
            }
        };
        let tag = self.next_tag.fetch_add(1, Ordering::Relaxed);
        let record = ShmDescriptor::new(desc.op, desc.lba, desc.block_count, data_offset, tag);
        self.client.write_descriptor(index, &record).expect("index from the free ring");
        self.pending.lock().insert(
            tag,
            Pending {
                tag: desc.tag,
                user: desc.clone(),
                staging,
                _guard: desc.buffer.as_ref().map(|b| b.inflight_guard()),
            },
        );
        self.client.submit(index).expect("index from the free ring");
        Ok(())
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        let reaped = self.client.reap(max);
        let mut pending = self.pending.lock();
        for &(tag, status) in &reaped {
            let p = pending.remove(&tag).expect("completion for a pending descriptor");
            if let Some(staging) = p.staging {
                if p.user.op == IoOp::Read && status.is_ok() {
                    let len = p.user.byte_len(self.info.block_size);
                    let b = p.user.buffer.as_ref().unwrap();
                    // SAFETY: the guard in `p` keeps the buffer marked in flight.
                    let dst = unsafe { b.device_slice_mut(p.user.offset, len) };
                    staging.read_at(0, dst);
                }
                let _ = self.arena.free_io_buffer(&staging);
            }
            out.push(Completion { tag: p.tag, status });
        }
        reaped.len()
    }

    fn info(&self) -> DeviceInfo {
        self.info.clone()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.arena.clone()
    }

    fn outstanding(&self) -> usize {
        self.pending.lock().len()
    }
}

impl Drop for ShmQueue {
    fn drop(&mut self) {
        self.client.close();
    }
}

/// Create a uniquely named segment in this process.
pub fn create_unique(prefix: &str, ring_order: u32, desc_count: u32, data_size: usize) -> Result<ShmSegment, ShmError> {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = NEXT.fetch_add(1, Ordering::Relaxed);
        let name = format!("{prefix}-{}-{n}", std::process::id());
        match ShmSegment::create(&name, ring_order, desc_count, data_size) {
            Err(ShmError::Exists(_)) => continue,
            other => return other,
        }
    }
}
