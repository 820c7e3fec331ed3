/// One bit per data block, LSB-first within each byte (the on-disk order).
/// Allocations are contiguous runs found next-fit from a rotating cursor.
#[derive(Debug, Clone)]
pub struct BitmapAllocator {
    bytes: Vec<u8>,
    len: u64,
    free: u64,
    cursor: u64,
}

/// Equal when the same blocks are allocated; the search cursor is ignored.
impl PartialEq for BitmapAllocator {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len && self.bytes == other.bytes
    }
}

impl Eq for BitmapAllocator {}

impl BitmapAllocator {
    pub fn new(len: u64) -> BitmapAllocator {
        BitmapAllocator {
            bytes: vec![0; len.div_ceil(8) as usize],
            len,
            free: len,
            cursor: 0,
        }
    }

    /// Load from on-disk bytes; bits past `len` are ignored.
    pub fn from_bytes(raw: &[u8], len: u64) -> BitmapAllocator {
        let mut bitmap = BitmapAllocator::new(len);
        let n = bitmap.bytes.len();
        bitmap.bytes.copy_from_slice(&raw[..n]);
        if len % 8 != 0 {
            bitmap.bytes[n - 1] &= (1u8 << (len % 8)) - 1;
        }
        let used: u64 = bitmap.bytes.iter().map(|b| b.count_ones() as u64).sum();
        bitmap.free = len - used;
        bitmap
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn free_count(&self) -> u64 {
        self.free
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_set(&self, bit: u64) -> bool {
        self.bytes[(bit / 8) as usize] & (1 << (bit % 8)) != 0
    }

    fn set(&mut self, bit: u64, on: bool) {
        let byte = &mut self.bytes[(bit / 8) as usize];
        if on {
            *byte |= 1 << (bit % 8);
        } else {
            *byte &= !(1 << (bit % 8));
        }
    }

    /// Length of the free run starting at `start`, capped at `want`.
    fn free_run(&self, start: u64, want: u64) -> u64 {
        let mut n = 0;
        while n < want && start + n < self.len && !self.is_set(start + n) {
            n += 1;
        }
        n
    }

    /// Find and mark `count` contiguous free blocks.
    pub fn allocate(&mut self, count: u64) -> Option<u64> {
        if count == 0 || count > self.free {
            return None;
        }
        let mut pos = if self.cursor >= self.len { 0 } else { self.cursor };
        let mut scanned = 0u64;
        while scanned < self.len {
            if pos + count > self.len {
                scanned += self.len - pos;
                pos = 0;
                continue;
            }
            // skip whole used bytes quickly
            if pos % 8 == 0 && self.bytes[(pos / 8) as usize] == 0xff {
                pos += 8;
                scanned += 8;
                continue;
            }
            let run = self.free_run(pos, count);
            if run == count {
                self.mark(pos, count, true);
                self.cursor = pos + count;
                return Some(pos);
            }
            pos += run + 1;
            scanned += run + 1;
        }
        None
    }

    /// Mark a run allocated or free. Returns false (and changes nothing) if
    /// any bit already had the target value.
    pub fn mark(&mut self, start: u64, count: u64, allocated: bool) -> bool {
        if start + count > self.len || (start..start + count).any(|b| self.is_set(b) == allocated) {
            return false;
        }
        for b in start..start + count {
            self.set(b, allocated);
        }
        if allocated {
            self.free -= count;
        } else {
            self.free += count;
        }
        true
    }

    pub fn release(&mut self, start: u64, count: u64) -> bool {
        self.mark(start, count, false)
    }

    /// Byte range of the bitmap touched by bits `[start, start + count)`.
    pub fn byte_span(start: u64, count: u64) -> (usize, usize) {
        let first = (start / 8) as usize;
        let last = ((start + count.max(1) - 1) / 8) as usize;
        (first, last + 1)
    }
}
