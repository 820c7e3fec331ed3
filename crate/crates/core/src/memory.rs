//! Zero-copy IO memory.
//!
//! Buffers handed to devices come from an [`IoArena`]. A buffer's memory is
//! never relocated while it is allocated (only an explicit realloc may move
//! it), so devices can transfer straight into or out of it. Each device
//! owns an [`IommuDomain`] listing the regions it may touch; submissions
//! naming memory outside the domain are rejected with `E_ACCESS`.

use std::alloc::{self, Layout};
use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasher, Hasher};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

pub const DEFAULT_ALIGNMENT: usize = 4096;
pub const MIN_ALIGNMENT: usize = 8;

/// Arena cap when none is configured.
pub const DEFAULT_ARENA_LIMIT: usize = 1 << 33;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("out of IO memory (requested {requested} bytes)")]
    OutOfMemory { requested: usize },
    #[error("bad alignment {0}: must be a power of two")]
    BadAlignment(usize),
    #[error("IO buffers must be at least one byte")]
    ZeroSize,
    #[error("buffer has IO in flight")]
    BufferInFlight,
    #[error("unknown buffer")]
    UnknownBuffer,
}

fn next_handle() -> u64 {
    // Random base so handles from separately linked copies of this crate
    // (plugins) do not collide.
    static NEXT: OnceLock<AtomicU64> = OnceLock::new();
    NEXT.get_or_init(|| {
        let mut h = std::collections::hash_map::RandomState::new().build_hasher();
        h.write_usize(&NEXT as *const _ as usize);
        AtomicU64::new(h.finish() & 0x7fff_ffff_0000_0000)
    })
    .fetch_add(1, Ordering::Relaxed)
}

fn normalize_alignment(alignment: usize) -> Result<usize, MemoryError> {
    if alignment == 0 || !alignment.is_power_of_two() {
        return Err(MemoryError::BadAlignment(alignment));
    }
    Ok(alignment.max(MIN_ALIGNMENT))
}

enum Backing {
    Heap { ptr: NonNull<u8>, layout: Layout },
    /// Memory owned elsewhere (a mapped segment); `keep` holds it alive.
    External { _keep: Option<Arc<dyn Any + Send + Sync>> },
}

// SAFETY: the heap pointer is uniquely owned by the region.
unsafe impl Send for Backing {}
unsafe impl Sync for Backing {}

impl Drop for Backing {
    fn drop(&mut self) {
        if let Backing::Heap { ptr, layout } = self {
            unsafe { alloc::dealloc(ptr.as_ptr(), *layout) };
        }
    }
}

/// A contiguous IO memory region with a stable handle.
pub struct Region {
    handle: u64,
    base: AtomicUsize,
    size: AtomicUsize,
    alignment: AtomicUsize,
    numa_node: i32,
    inflight: AtomicU32,
    freed: AtomicBool,
    backing: Mutex<Backing>,
}

impl Region {
    fn heap(size: usize, alignment: usize, numa_node: i32) -> Result<Region, MemoryError> {
        let layout = Layout::from_size_align(size, alignment)
            .map_err(|_| MemoryError::BadAlignment(alignment))?;
        let ptr = NonNull::new(unsafe { alloc::alloc_zeroed(layout) })
            .ok_or(MemoryError::OutOfMemory { requested: size })?;
        Ok(Region {
            handle: next_handle(),
            base: AtomicUsize::new(ptr.as_ptr() as usize),
            size: AtomicUsize::new(size),
            alignment: AtomicUsize::new(alignment),
            numa_node,
            inflight: AtomicU32::new(0),
            freed: AtomicBool::new(false),
            backing: Mutex::new(Backing::Heap { ptr, layout }),
        })
    }
}

/// Handle to an IO buffer. Clones refer to the same region.
///
/// The application may touch the contents only while no IO is in flight on
/// the buffer; the accessors check this in debug builds.
#[derive(Clone)]
pub struct IoBuffer {
    region: Arc<Region>,
}

impl std::fmt::Debug for IoBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IoBuffer")
            .field("handle", &self.handle())
            .field("base", &format_args!("{:#x}", self.base()))
            .field("len", &self.len())
            .finish()
    }
}

impl IoBuffer {
    /// Plain heap memory that is registered with no device.
    pub fn unregistered(size: usize) -> IoBuffer {
        IoBuffer {
            region: Arc::new(
                Region::heap(size.max(1), DEFAULT_ALIGNMENT, -1).expect("heap allocation"),
            ),
        }
    }

    /// Wrap memory owned elsewhere.
    ///
    /// # Safety
    /// `[ptr, ptr + size)` must stay valid for as long as the returned buffer
    /// or any clone of it exists (`keep` may be used to tie the lifetimes).
    pub unsafe fn from_external(
        ptr: *mut u8,
        size: usize,
        keep: Option<Arc<dyn Any + Send + Sync>>,
    ) -> IoBuffer {
        IoBuffer {
            region: Arc::new(Region {
                handle: next_handle(),
                base: AtomicUsize::new(ptr as usize),
                size: AtomicUsize::new(size),
                alignment: AtomicUsize::new(1 << (ptr as usize).trailing_zeros().min(12)),
                numa_node: -1,
                inflight: AtomicU32::new(0),
                freed: AtomicBool::new(false),
                backing: Mutex::new(Backing::External { _keep: keep }),
            }),
        }
    }

    pub fn handle(&self) -> u64 {
        self.region.handle
    }

    pub fn base(&self) -> usize {
        self.region.base.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.region.size.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alignment(&self) -> usize {
        self.region.alignment.load(Ordering::Relaxed)
    }

    pub fn numa_node(&self) -> i32 {
        self.region.numa_node
    }

    pub fn in_flight(&self) -> u32 {
        self.region.inflight.load(Ordering::Acquire)
    }

    pub fn is_freed(&self) -> bool {
        self.region.freed.load(Ordering::Acquire)
    }

    pub fn same_region(&self, other: &IoBuffer) -> bool {
        Arc::ptr_eq(&self.region, &other.region)
    }

    fn check_app_access(&self) {
        assert!(!self.is_freed(), "access to freed IO buffer {:#x}", self.handle());
        debug_assert_eq!(
            self.in_flight(),
            0,
            "application touched IO buffer {:#x} while IO is in flight",
            self.handle()
        );
    }

    pub fn with_slice<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        self.check_app_access();
        let slice = unsafe { std::slice::from_raw_parts(self.base() as *const u8, self.len()) };
        f(slice)
    }

    pub fn with_slice_mut<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        self.check_app_access();
        let slice = unsafe { std::slice::from_raw_parts_mut(self.base() as *mut u8, self.len()) };
        f(slice)
    }

    pub fn write_at(&self, offset: usize, data: &[u8]) {
        self.with_slice_mut(|s| s[offset..offset + data.len()].copy_from_slice(data));
    }

    pub fn read_at(&self, offset: usize, out: &mut [u8]) {
        self.with_slice(|s| out.copy_from_slice(&s[offset..offset + out.len()]));
    }

    pub fn fill(&self, byte: u8) {
        self.with_slice_mut(|s| s.fill(byte));
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.with_slice(|s| s.to_vec())
    }

    /// Device-side view of `[offset, offset + len)`.
    ///
    /// # Safety
    /// The caller must hold an [`InflightGuard`] on this buffer and have
    /// checked the range against the buffer length.
    pub(crate) unsafe fn device_slice(&self, offset: usize, len: usize) -> &[u8] {
        std::slice::from_raw_parts((self.base() + offset) as *const u8, len)
    }

    /// # Safety
    /// As for [`IoBuffer::device_slice`].
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn device_slice_mut(&self, offset: usize, len: usize) -> &mut [u8] {
        std::slice::from_raw_parts_mut((self.base() + offset) as *mut u8, len)
    }

    /// Mark the buffer as referenced by an IO until the guard drops.
    pub fn inflight_guard(&self) -> InflightGuard {
        self.region.inflight.fetch_add(1, Ordering::AcqRel);
        InflightGuard {
            region: self.region.clone(),
        }
    }
}

/// Keeps a buffer marked in flight; realloc and free fail while any exist.
pub struct InflightGuard {
    region: Arc<Region>,
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        self.region.inflight.fetch_sub(1, Ordering::AcqRel);
    }
}

/// The set of memory regions one device may transfer to or from.
#[derive(Default)]
pub struct IommuDomain {
    map: RwLock<DomainMap>,
}

#[derive(Default)]
struct DomainMap {
    by_base: BTreeMap<(usize, u64), usize>,
    by_handle: HashMap<u64, (usize, usize)>,
}

impl IommuDomain {
    pub fn new() -> IommuDomain {
        IommuDomain::default()
    }

    /// Map (or remap after a move) the buffer's current region.
    pub fn map(&self, buffer: &IoBuffer) {
        let mut map = self.map.write();
        let handle = buffer.handle();
        if let Some((base, _)) = map.by_handle.remove(&handle) {
            map.by_base.remove(&(base, handle));
        }
        let (base, len) = (buffer.base(), buffer.len());
        map.by_base.insert((base, handle), len);
        map.by_handle.insert(handle, (base, len));
    }

    pub fn unmap(&self, handle: u64) -> bool {
        let mut map = self.map.write();
        match map.by_handle.remove(&handle) {
            Some((base, _)) => {
                map.by_base.remove(&(base, handle));
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, handle: u64) -> bool {
        self.map.read().by_handle.contains_key(&handle)
    }

    /// True iff `[base, base + len)` lies inside one mapped region.
    pub fn permits(&self, base: usize, len: usize) -> bool {
        let Some(end) = base.checked_add(len) else {
            return false;
        };
        let map = self.map.read();
        map.by_base
            .range(..=(base, u64::MAX))
            .rev()
            .any(|(&(rbase, _), &rlen)| base >= rbase && end <= rbase + rlen)
    }

    pub fn region_count(&self) -> usize {
        self.map.read().by_handle.len()
    }
}

/// The IO memory interface every block device exposes.
pub trait ZerocopyMemory: Send + Sync {
    /// Zero-filled, aligned buffer, registered with the serving device.
    fn allocate_io_buffer(
        &self,
        size: usize,
        alignment: usize,
        numa_node: i32,
    ) -> Result<IoBuffer, MemoryError>;

    /// Resize keeping the handle; the prefix up to `min(old, new)` is kept.
    fn realloc_io_buffer(&self, buffer: &IoBuffer, size: usize, alignment: usize) -> Result<(), MemoryError>;

    fn free_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError>;

    /// Grant this device access to a buffer allocated elsewhere.
    fn register_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError>;

    fn unregister_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError>;

    fn check_access(&self, base: usize, len: usize) -> bool;

    /// Bytes held by live buffers allocated through this interface.
    fn bytes_outstanding(&self) -> usize;
}

/// `check_access` on a buffer's whole region.
pub fn buffer_permitted(memory: &dyn ZerocopyMemory, buffer: &IoBuffer) -> bool {
    !buffer.is_freed() && memory.check_access(buffer.base(), buffer.len())
}

/// First-fit allocator over a byte range; used to carve buffers out of a
/// fixed region such as a shared-memory segment.
#[derive(Debug)]
pub struct RangeAllocator {
    free: BTreeMap<usize, usize>,
}

impl RangeAllocator {
    pub fn new(size: usize) -> RangeAllocator {
        let mut free = BTreeMap::new();
        if size > 0 {
            free.insert(0, size);
        }
        RangeAllocator { free }
    }

    /// Offsets are aligned relative to `origin` (the absolute address of
    /// offset 0) so the resulting addresses honor `alignment`.
    pub fn allocate(&mut self, size: usize, alignment: usize, origin: usize) -> Option<usize> {
        let mut chosen = None;
        for (&start, &len) in &self.free {
            let addr = origin + start;
            let aligned = (addr + alignment - 1) & !(alignment - 1);
            let pad = aligned - addr;
            if len >= pad + size {
                chosen = Some((start, len, pad));
                break;
            }
        }
        let (start, len, pad) = chosen?;
        self.free.remove(&start);
        if pad > 0 {
            self.free.insert(start, pad);
        }
        let rest = len - pad - size;
        if rest > 0 {
            self.free.insert(start + pad + size, rest);
        }
        Some(start + pad)
    }

    pub fn release(&mut self, offset: usize, size: usize) {
        let mut start = offset;
        let mut len = size;
        if let Some((&prev, &plen)) = self.free.range(..offset).next_back() {
            if prev + plen == offset {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(offset + size)) {
            self.free.remove(&(offset + size));
            len += nlen;
        }
        self.free.insert(start, len);
    }

    pub fn free_bytes(&self) -> usize {
        self.free.values().sum()
    }
}

enum ArenaSource {
    Heap,
    Carve {
        origin: usize,
        ranges: Mutex<RangeAllocator>,
        keep: Option<Arc<dyn Any + Send + Sync>>,
    },
}

/// Buffer allocator plus the IOMMU domain of one device (or one segment).
pub struct IoArena {
    domain: IommuDomain,
    live: Mutex<HashMap<u64, IoBuffer>>,
    outstanding: AtomicUsize,
    limit: usize,
    source: ArenaSource,
}

impl Default for IoArena {
    fn default() -> Self {
        IoArena::new(DEFAULT_ARENA_LIMIT)
    }
}

impl IoArena {
    /// Heap-backed arena capped at `limit` outstanding bytes.
    pub fn new(limit: usize) -> IoArena {
        IoArena {
            domain: IommuDomain::new(),
            live: Mutex::new(HashMap::new()),
            outstanding: AtomicUsize::new(0),
            limit,
            source: ArenaSource::Heap,
        }
    }

    /// Arena that carves buffers out of `[origin, origin + size)`.
    ///
    /// # Safety
    /// The range must stay valid while the arena or any buffer from it lives;
    /// `keep` is cloned into every buffer to tie the lifetimes together.
    pub unsafe fn carved(origin: usize, size: usize, keep: Option<Arc<dyn Any + Send + Sync>>) -> IoArena {
        IoArena {
            domain: IommuDomain::new(),
            live: Mutex::new(HashMap::new()),
            outstanding: AtomicUsize::new(0),
            limit: size,
            source: ArenaSource::Carve {
                origin,
                ranges: Mutex::new(RangeAllocator::new(size)),
                keep,
            },
        }
    }

    pub fn domain(&self) -> &IommuDomain {
        &self.domain
    }

    pub fn live_buffers(&self) -> usize {
        self.live.lock().len()
    }

    fn raw_allocate(&self, size: usize, alignment: usize, numa_node: i32) -> Result<Region, MemoryError> {
        match &self.source {
            ArenaSource::Heap => Region::heap(size, alignment, numa_node),
            ArenaSource::Carve { origin, ranges, keep } => {
                let offset = ranges
                    .lock()
                    .allocate(size, alignment, *origin)
                    .ok_or(MemoryError::OutOfMemory { requested: size })?;
                let ptr = (origin + offset) as *mut u8;
                unsafe { std::ptr::write_bytes(ptr, 0, size) };
                Ok(Region {
                    handle: next_handle(),
                    base: AtomicUsize::new(ptr as usize),
                    size: AtomicUsize::new(size),
                    alignment: AtomicUsize::new(alignment),
                    numa_node,
                    inflight: AtomicU32::new(0),
                    freed: AtomicBool::new(false),
                    backing: Mutex::new(Backing::External { _keep: keep.clone() }),
                })
            }
        }
    }

    fn release_range(&self, base: usize, size: usize) {
        if let ArenaSource::Carve { origin, ranges, .. } = &self.source {
            ranges.lock().release(base - origin, size);
        }
    }

    fn reserve(&self, size: usize) -> Result<(), MemoryError> {
        let mut current = self.outstanding.load(Ordering::Acquire);
        loop {
            let next = current
                .checked_add(size)
                .filter(|n| *n <= self.limit)
                .ok_or(MemoryError::OutOfMemory { requested: size })?;
            match self.outstanding.compare_exchange_weak(
                current,
                next,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(()),
                Err(seen) => current = seen,
            }
        }
    }
}

impl ZerocopyMemory for IoArena {
    fn allocate_io_buffer(&self, size: usize, alignment: usize, numa_node: i32) -> Result<IoBuffer, MemoryError> {
        if size == 0 {
            return Err(MemoryError::ZeroSize);
        }
        let alignment = normalize_alignment(alignment)?;
        self.reserve(size)?;
        let region = match self.raw_allocate(size, alignment, numa_node) {
            Ok(r) => r,
            Err(e) => {
                self.outstanding.fetch_sub(size, Ordering::AcqRel);
                return Err(e);
            }
        };
        let buffer = IoBuffer {
            region: Arc::new(region),
        };
        self.domain.map(&buffer);
        self.live.lock().insert(buffer.handle(), buffer.clone());
        Ok(buffer)
    }

    fn realloc_io_buffer(&self, buffer: &IoBuffer, size: usize, alignment: usize) -> Result<(), MemoryError> {
        if size == 0 {
            return Err(MemoryError::ZeroSize);
        }
        let alignment = normalize_alignment(alignment)?;
        if !self.live.lock().contains_key(&buffer.handle()) {
            return Err(MemoryError::UnknownBuffer);
        }
        if buffer.in_flight() > 0 {
            return Err(MemoryError::BufferInFlight);
        }
        let old_size = buffer.len();
        if size == old_size && alignment == buffer.alignment() {
            return Ok(());
        }
        if size > old_size {
            self.reserve(size - old_size)?;
        }
        let fresh = match self.raw_allocate(size, alignment, buffer.numa_node()) {
            Ok(r) => r,
            Err(e) => {
                if size > old_size {
                    self.outstanding.fetch_sub(size - old_size, Ordering::AcqRel);
                }
                return Err(e);
            }
        };
        let region = &buffer.region;
        let keep = size.min(old_size);
        let old_base = region.base.load(Ordering::Acquire);
        let new_base = fresh.base.load(Ordering::Acquire);
        unsafe {
            std::ptr::copy_nonoverlapping(old_base as *const u8, new_base as *mut u8, keep);
        }
        // Move the fresh backing into the existing region so the handle and
        // every clone of the buffer follow the move.
        let fresh_backing = std::mem::replace(
            &mut *fresh.backing.lock(),
            Backing::External { _keep: None },
        );
        let old_backing = std::mem::replace(&mut *region.backing.lock(), fresh_backing);
        region.base.store(new_base, Ordering::Release);
        region.size.store(size, Ordering::Release);
        region.alignment.store(alignment, Ordering::Release);
        drop(old_backing);
        self.release_range(old_base, old_size);
        if size < old_size {
            self.outstanding.fetch_sub(old_size - size, Ordering::AcqRel);
        }
        self.domain.map(buffer);
        Ok(())
    }

    fn free_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        let mut live = self.live.lock();
        if !live.contains_key(&buffer.handle()) {
            return Err(MemoryError::UnknownBuffer);
        }
        if buffer.in_flight() > 0 {
            return Err(MemoryError::BufferInFlight);
        }
        live.remove(&buffer.handle());
        drop(live);
        buffer.region.freed.store(true, Ordering::Release);
        self.domain.unmap(buffer.handle());
        self.release_range(buffer.base(), buffer.len());
        self.outstanding.fetch_sub(buffer.len(), Ordering::AcqRel);
        Ok(())
    }

    fn register_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        if buffer.is_freed() {
            return Err(MemoryError::UnknownBuffer);
        }
        self.domain.map(buffer);
        Ok(())
    }

    fn unregister_io_buffer(&self, buffer: &IoBuffer) -> Result<(), MemoryError> {
        if self.domain.unmap(buffer.handle()) {
            Ok(())
        } else {
            Err(MemoryError::UnknownBuffer)
        }
    }

    fn check_access(&self, base: usize, len: usize) -> bool {
        self.domain.permits(base, len)
    }

    fn bytes_outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }
}
