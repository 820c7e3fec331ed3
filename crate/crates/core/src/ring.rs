//! Single-producer/single-consumer ring.
//!
//! Memory layout (shared with the SHM segment format):
//!
//! ```text
//! +0    head: u64   (producer index, own cache line)
//! +64   tail: u64   (consumer index, own cache line)
//! +128  slots[2^order]
//! ```
//!
//! `head - tail` is the number of queued items and never exceeds the
//! capacity. Indices grow without wrapping; the slot is `index & mask`.

use std::alloc::{self, Layout};
use std::any::Any;
use std::marker::PhantomData;
use std::mem::{align_of, size_of};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub const CACHE_LINE: usize = 64;
const HEAD_OFFSET: usize = 0;
const TAIL_OFFSET: usize = CACHE_LINE;
const SLOTS_OFFSET: usize = 2 * CACHE_LINE;
pub const MAX_ORDER: u32 = 24;

/// Bytes a ring of `2^order` slots of `T` occupies.
pub fn ring_bytes<T>(order: u32) -> usize {
    SLOTS_OFFSET + size_of::<T>() * (1usize << order)
}

enum RingBacking {
    Heap(Layout),
    External(#[allow(dead_code)] Option<Arc<dyn Any + Send + Sync>>),
}

pub struct RawRing<T> {
    base: *mut u8,
    mask: u64,
    order: u32,
    backing: RingBacking,
    _marker: PhantomData<T>,
}

// SAFETY: access to slots is coordinated through the head/tail protocol;
// each side is held by exactly one Producer or Consumer.
unsafe impl<T: Send> Send for RawRing<T> {}
unsafe impl<T: Send> Sync for RawRing<T> {}

impl<T> RawRing<T> {
    fn heap(order: u32) -> RawRing<T> {
        assert!(order <= MAX_ORDER, "ring order {order} too large");
        assert!(align_of::<T>() <= CACHE_LINE);
        let layout = Layout::from_size_align(ring_bytes::<T>(order), CACHE_LINE).unwrap();
        let base = unsafe { alloc::alloc_zeroed(layout) };
        if base.is_null() {
            alloc::handle_alloc_error(layout);
        }
        RawRing {
            base,
            mask: (1u64 << order) - 1,
            order,
            backing: RingBacking::Heap(layout),
            _marker: PhantomData,
        }
    }

    fn head(&self) -> &AtomicU64 {
        unsafe { &*(self.base.add(HEAD_OFFSET) as *const AtomicU64) }
    }

    fn tail(&self) -> &AtomicU64 {
        unsafe { &*(self.base.add(TAIL_OFFSET) as *const AtomicU64) }
    }

    fn slot(&self, index: u64) -> *mut T {
        unsafe { (self.base.add(SLOTS_OFFSET) as *mut T).add((index & self.mask) as usize) }
    }

    pub fn capacity(&self) -> usize {
        1 << self.order
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Items currently queued, as seen by a third party.
    pub fn len(&self) -> usize {
        let tail = self.tail().load(Ordering::Acquire);
        let head = self.head().load(Ordering::Acquire);
        head.saturating_sub(tail) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_index(&self) -> u64 {
        self.head().load(Ordering::Acquire)
    }

    pub fn tail_index(&self) -> u64 {
        self.tail().load(Ordering::Acquire)
    }
}

impl<T: Copy> RawRing<T> {
    /// View a ring laid out at `base`.
    ///
    /// # Safety
    /// `base` must be 64-byte aligned, point to `ring_bytes::<T>(order)`
    /// valid bytes that outlive the ring (`keep` may own them), and the ring
    /// must have been initialized with [`RawRing::init_at`].
    pub unsafe fn attach(base: *mut u8, order: u32, keep: Option<Arc<dyn Any + Send + Sync>>) -> RawRing<T> {
        debug_assert_eq!(base as usize % CACHE_LINE, 0);
        RawRing {
            base,
            mask: (1u64 << order) - 1,
            order,
            backing: RingBacking::External(keep),
            _marker: PhantomData,
        }
    }

    /// Zero the indices of a ring laid out at `base`.
    ///
    /// # Safety
    /// As for [`RawRing::attach`]; no other party may be using the ring.
    pub unsafe fn init_at(base: *mut u8) {
        std::ptr::write_bytes(base, 0, SLOTS_OFFSET);
    }
}

impl<T> Drop for RawRing<T> {
    fn drop(&mut self) {
        if let RingBacking::Heap(layout) = self.backing {
            if std::mem::needs_drop::<T>() {
                let tail = self.tail().load(Ordering::Acquire);
                let head = self.head().load(Ordering::Acquire);
                for i in tail..head {
                    unsafe { std::ptr::drop_in_place(self.slot(i)) };
                }
            }
            unsafe { alloc::dealloc(self.base, layout) };
        }
    }
}

/// Producer half. Not `Clone`: exactly one producer per ring.
pub struct Producer<T> {
    ring: Arc<RawRing<T>>,
    head: u64,
    cached_tail: u64,
}

/// Consumer half. Not `Clone`: exactly one consumer per ring.
pub struct Consumer<T> {
    ring: Arc<RawRing<T>>,
    tail: u64,
    cached_head: u64,
}

/// A heap ring of `2^order` slots.
pub fn channel<T: Send>(order: u32) -> (Producer<T>, Consumer<T>) {
    let ring = Arc::new(RawRing::heap(order));
    (Producer::new(ring.clone()), Consumer::new(ring))
}

impl<T> Producer<T> {
    /// Take the producer role on `ring`. The caller guarantees no other
    /// producer exists.
    pub fn new(ring: Arc<RawRing<T>>) -> Producer<T> {
        let head = ring.head().load(Ordering::Acquire);
        let cached_tail = ring.tail().load(Ordering::Acquire);
        Producer {
            ring,
            head,
            cached_tail,
        }
    }

    pub fn push(&mut self, item: T) -> Result<(), T> {
        let cap = self.ring.capacity() as u64;
        if self.head - self.cached_tail >= cap {
            self.cached_tail = self.ring.tail().load(Ordering::Acquire);
            if self.head - self.cached_tail >= cap {
                return Err(item);
            }
        }
        unsafe { self.ring.slot(self.head).write(item) };
        self.head += 1;
        self.ring.head().store(self.head, Ordering::Release);
        Ok(())
    }

    pub fn free_slots(&mut self) -> usize {
        self.cached_tail = self.ring.tail().load(Ordering::Acquire);
        self.ring.capacity() - (self.head - self.cached_tail) as usize
    }

    pub fn ring(&self) -> &Arc<RawRing<T>> {
        &self.ring
    }
}

impl<T> Consumer<T> {
    pub fn new(ring: Arc<RawRing<T>>) -> Consumer<T> {
        let tail = ring.tail().load(Ordering::Acquire);
        let cached_head = ring.head().load(Ordering::Acquire);
        Consumer {
            ring,
            tail,
            cached_head,
        }
    }

    pub fn pop(&mut self) -> Option<T> {
        if self.tail == self.cached_head {
            self.cached_head = self.ring.head().load(Ordering::Acquire);
            if self.tail == self.cached_head {
                return None;
            }
        }
        let item = unsafe { self.ring.slot(self.tail).read() };
        self.tail += 1;
        self.ring.tail().store(self.tail, Ordering::Release);
        Some(item)
    }

    pub fn len(&mut self) -> usize {
        self.cached_head = self.ring.head().load(Ordering::Acquire);
        (self.cached_head - self.tail) as usize
    }

    pub fn is_empty(&mut self) -> bool {
        self.len() == 0
    }

    pub fn ring(&self) -> &Arc<RawRing<T>> {
        &self.ring
    }
}
