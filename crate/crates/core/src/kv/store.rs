use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use super::bitmap::BitmapAllocator;
use super::format::{
    fnv1a64, Bucket, BucketState, Superblock, BUCKET_LEN, MAX_DATA_LBA, MAX_KEY_LEN,
};
use super::{KvAttr, KvError, KvStats};
use crate::blockdev::{run_sync, IoDescriptor, IoQueue, IoStatus};
use crate::memory::{buffer_permitted, IoBuffer, ZerocopyMemory, DEFAULT_ALIGNMENT};

/// Result of probing for a key.
struct Probe {
    found: Option<(u64, Bucket)>,
    /// First reusable slot on the probe path (tombstone or empty).
    slot: Option<u64>,
}

/// The store proper: superblock, bitmap and index on one queue.
///
/// Single-threaded; [`super::KvHandle`] serializes access.
pub struct KvEngine {
    queue: Arc<dyn IoQueue>,
    memory: Arc<dyn ZerocopyMemory>,
    sb: Superblock,
    bitmap: BitmapAllocator,
    meta: IoBuffer,
    stage: IoBuffer,
    /// Last index block read, as (block number, bytes).
    index_cache: Option<(u64, Vec<u8>)>,
    next_tag: u64,
}

impl KvEngine {
    fn with_queue(queue: Arc<dyn IoQueue>, sb: Superblock) -> Result<KvEngine, KvError> {
        let memory = queue.memory();
        let bs = sb.block_size as usize;
        let meta = memory.allocate_io_buffer(bs, DEFAULT_ALIGNMENT, -1)?;
        let stage = memory.allocate_io_buffer(bs, DEFAULT_ALIGNMENT, -1)?;
        Ok(KvEngine {
            queue,
            memory,
            bitmap: BitmapAllocator::new(sb.data_blocks()),
            sb,
            meta,
            stage,
            index_cache: None,
            next_tag: 1,
        })
    }

    /// Write a fresh, empty store over the whole device.
    pub fn format(queue: Arc<dyn IoQueue>) -> Result<KvEngine, KvError> {
        let info = queue.info();
        let sb = Superblock::layout(info.block_count, info.block_size)?;
        let mut engine = KvEngine::with_queue(queue, sb)?;
        let bs = sb.block_size as usize;
        // zero bitmap and index in chunks of up to 64 blocks
        let zero_blocks = sb.data_start - 1;
        let chunk = zero_blocks.min(64);
        engine.ensure_stage(chunk as usize * bs)?;
        engine.stage.fill(0);
        let mut lba = 1;
        while lba < sb.data_start {
            let n = chunk.min(sb.data_start - lba);
            let stage = engine.stage.clone();
            engine.io(IoDescriptor::write(lba, n as u32, &stage, 0, 0))?;
            lba += n;
        }
        engine.meta.fill(0);
        engine.meta.write_at(0, &sb.encode());
        let meta = engine.meta.clone();
        engine.io(IoDescriptor::write(0, 1, &meta, 0, 0))?;
        engine.flush()?;
        Ok(engine)
    }

    /// Open an existing store. The bitmap is rebuilt from the index, which
    /// also reclaims blocks leaked by a put torn before its bucket commit.
    pub fn open(queue: Arc<dyn IoQueue>) -> Result<KvEngine, KvError> {
        let info = queue.info();
        let memory = queue.memory();
        let probe = memory.allocate_io_buffer(info.block_size as usize, DEFAULT_ALIGNMENT, -1)?;
        let read = run_sync(queue.as_ref(), &IoDescriptor::read(0, 1, &probe, 0, 0));
        let sb = read
            .map_err(KvError::Io)
            .and_then(|_| probe.with_slice(Superblock::decode));
        let _ = memory.free_io_buffer(&probe);
        let sb = sb?;
        if sb.block_size != info.block_size || sb.total_blocks > info.block_count {
            return Err(KvError::BadFormat(format!(
                "store geometry {}x{} does not fit device {}x{}",
                sb.total_blocks, sb.block_size, info.block_count, info.block_size
            )));
        }
        let mut engine = KvEngine::with_queue(queue, sb)?;
        engine.rebuild_bitmap()?;
        Ok(engine)
    }

    fn rebuild_bitmap(&mut self) -> Result<(), KvError> {
        let sb = self.sb;
        let mut rebuilt = BitmapAllocator::new(sb.data_blocks());
        for block in 0..sb.index_blocks() {
            let raw = self.read_index_block(sb.index_start + block)?;
            for slot in raw.chunks_exact(BUCKET_LEN) {
                let b = Bucket::decode(slot)?;
                if b.state != BucketState::Used || b.data_blocks == 0 {
                    continue;
                }
                let start = b
                    .data_lba
                    .checked_sub(sb.data_start)
                    .ok_or_else(|| KvError::BadFormat("bucket points below data region".into()))?;
                if !rebuilt.mark(start, b.data_blocks as u64, true) {
                    return Err(KvError::BadFormat(format!(
                        "key {:?} overlaps another value or the device end",
                        String::from_utf8_lossy(b.key())
                    )));
                }
            }
        }
        let on_disk = self.read_bitmap()?;
        if on_disk != rebuilt {
            log::info!(
                "kv: repairing bitmap ({} free on disk, {} after rebuild)",
                on_disk.free_count(),
                rebuilt.free_count()
            );
            self.bitmap = rebuilt;
            self.write_bitmap_range(0, self.sb.data_blocks())?;
        } else {
            self.bitmap = rebuilt;
        }
        Ok(())
    }

    fn read_bitmap(&mut self) -> Result<BitmapAllocator, KvError> {
        let sb = self.sb;
        let bs = sb.block_size as usize;
        self.ensure_stage(sb.bitmap_blocks as usize * bs)?;
        let stage = self.stage.clone();
        self.io(IoDescriptor::read(sb.bitmap_start, sb.bitmap_blocks as u32, &stage, 0, 0))?;
        Ok(stage.with_slice(|raw| BitmapAllocator::from_bytes(raw, sb.data_blocks())))
    }

    /// Write the bitmap blocks covering data blocks `[start, start+count)`.
    fn write_bitmap_range(&mut self, start: u64, count: u64) -> Result<(), KvError> {
        let bs = self.sb.block_size as usize;
        let (first, end) = BitmapAllocator::byte_span(start, count);
        let first_block = first / bs;
        let last_block = (end - 1) / bs;
        let blocks = last_block - first_block + 1;
        self.ensure_stage(blocks * bs)?;
        let bytes = self.bitmap.as_bytes();
        let from = first_block * bs;
        let to = ((last_block + 1) * bs).min(bytes.len());
        self.stage.with_slice_mut(|s| {
            s[..blocks * bs].fill(0);
            s[..to - from].copy_from_slice(&bytes[from..to]);
        });
        let stage = self.stage.clone();
        self.io(IoDescriptor::write(
            self.sb.bitmap_start + first_block as u64,
            blocks as u32,
            &stage,
            0,
            0,
        ))
    }

    fn io(&mut self, mut desc: IoDescriptor) -> Result<(), KvError> {
        desc.tag = self.next_tag;
        self.next_tag += 1;
        run_sync(self.queue.as_ref(), &desc).map_err(KvError::Io)
    }

    fn ensure_stage(&mut self, len: usize) -> Result<(), KvError> {
        if self.stage.len() < len {
            let size = len.next_power_of_two();
            self.memory.realloc_io_buffer(&self.stage, size, DEFAULT_ALIGNMENT)?;
        }
        Ok(())
    }

    fn read_index_block(&mut self, lba: u64) -> Result<Vec<u8>, KvError> {
        if let Some((cached, raw)) = &self.index_cache {
            if *cached == lba {
                return Ok(raw.clone());
            }
        }
        let meta = self.meta.clone();
        self.io(IoDescriptor::read(lba, 1, &meta, 0, 0))?;
        let raw = meta.to_vec();
        self.index_cache = Some((lba, raw.clone()));
        Ok(raw)
    }

    fn bucket_location(&self, index: u64) -> (u64, usize) {
        let per = self.sb.buckets_per_block();
        (self.sb.index_start + index / per, (index % per) as usize * BUCKET_LEN)
    }

    fn read_bucket(&mut self, index: u64) -> Result<Bucket, KvError> {
        let (lba, at) = self.bucket_location(index);
        let raw = self.read_index_block(lba)?;
        Bucket::decode(&raw[at..at + BUCKET_LEN])
    }

    fn write_bucket(&mut self, index: u64, bucket: &Bucket) -> Result<(), KvError> {
        let (lba, at) = self.bucket_location(index);
        let mut raw = self.read_index_block(lba)?;
        raw[at..at + BUCKET_LEN].copy_from_slice(&bucket.encode());
        self.meta.write_at(0, &raw);
        let meta = self.meta.clone();
        let result = self.io(IoDescriptor::write(lba, 1, &meta, 0, 0));
        self.index_cache = if result.is_ok() { Some((lba, raw)) } else { None };
        result
    }

    fn probe(&mut self, key: &[u8]) -> Result<Probe, KvError> {
        let n = self.sb.index_buckets;
        let hash = fnv1a64(key);
        let mut index = hash % n;
        let mut slot = None;
        for _ in 0..n {
            let b = self.read_bucket(index)?;
            match b.state {
                BucketState::Empty => {
                    return Ok(Probe {
                        found: None,
                        slot: slot.or(Some(index)),
                    })
                }
                BucketState::Tombstone => {
                    slot.get_or_insert(index);
                }
                BucketState::Used => {
                    if b.key_hash == hash && b.key() == key {
                        return Ok(Probe {
                            found: Some((index, b)),
                            slot,
                        });
                    }
                }
            }
            index = (index + 1) % n;
        }
        Ok(Probe { found: None, slot })
    }

    fn check_key(key: &[u8]) -> Result<(), KvError> {
        if key.len() > MAX_KEY_LEN {
            return Err(KvError::KeyTooLong(key.len()));
        }
        Ok(())
    }

    /// Store `value_len` bytes that sit at the start of `source` (already
    /// padded to whole blocks). Order: data, bitmap, bucket, then release
    /// of any previous value's blocks.
    fn put_blocks(&mut self, key: &[u8], source: &IoBuffer, value_len: usize) -> Result<(), KvError> {
        Self::check_key(key)?;
        let value_len32 =
            u32::try_from(value_len).map_err(|_| KvError::NoSpace)?;
        let bs = self.sb.block_size as usize;
        let blocks = value_len.div_ceil(bs) as u64;
        let probe = self.probe(key)?;
        let index = match (&probe.found, probe.slot) {
            (Some((i, _)), _) => *i,
            (None, Some(slot)) => slot,
            (None, None) => return Err(KvError::NoSpace),
        };
        let start = if blocks == 0 {
            None
        } else {
            Some(self.bitmap.allocate(blocks).ok_or(KvError::NoSpace)?)
        };
        let data_lba = start.map_or(0, |s| self.sb.data_start + s);
        debug_assert!(data_lba <= MAX_DATA_LBA);
        let commit = (|| {
            if let Some(s) = start {
                self.io(IoDescriptor::write(data_lba, blocks as u32, source, 0, 0))?;
                self.write_bitmap_range(s, blocks)?;
            }
            self.write_bucket(index, &Bucket::used(key, value_len32, data_lba, blocks as u32))
        })();
        if let Err(e) = commit {
            if let Some(s) = start {
                self.bitmap.release(s, blocks);
            }
            return Err(e);
        }
        if let Some((_, old)) = probe.found {
            self.free_value(&old)?;
        }
        Ok(())
    }

    fn free_value(&mut self, bucket: &Bucket) -> Result<(), KvError> {
        if bucket.data_blocks == 0 {
            return Ok(());
        }
        let start = bucket.data_lba - self.sb.data_start;
        if !self.bitmap.release(start, bucket.data_blocks as u64) {
            return Err(KvError::BadFormat("freeing unallocated blocks".into()));
        }
        self.write_bitmap_range(start, bucket.data_blocks as u64)
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<(), KvError> {
        Self::check_key(key)?;
        let bs = self.sb.block_size as usize;
        let padded = value.len().div_ceil(bs) * bs;
        self.ensure_stage(padded.max(bs))?;
        self.stage.with_slice_mut(|s| {
            s[..value.len()].copy_from_slice(value);
            s[value.len()..padded].fill(0);
        });
        let stage = self.stage.clone();
        self.put_blocks(key, &stage, value.len())
    }

    /// Zero-copy put: the value is written to the device straight from
    /// `buffer`, which must be registered with the store's device and hold
    /// whole blocks. Other buffers are staged through a copy.
    pub fn put_from_buffer(&mut self, key: &[u8], buffer: &IoBuffer, len: usize) -> Result<(), KvError> {
        if len > buffer.len() {
            return Err(KvError::BufferTooSmall);
        }
        let bs = self.sb.block_size as usize;
        if len.div_ceil(bs) * bs <= buffer.len() && buffer_permitted(self.memory.as_ref(), buffer) {
            return self.put_blocks(key, buffer, len);
        }
        let value = buffer.with_slice(|s| s[..len].to_vec());
        self.put(key, &value)
    }

    fn lookup(&mut self, key: &[u8]) -> Result<(u64, Bucket), KvError> {
        Self::check_key(key)?;
        self.probe(key)?.found.ok_or(KvError::NotFound)
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Vec<u8>, KvError> {
        let (_, b) = self.lookup(key)?;
        if b.data_blocks == 0 {
            return Ok(Vec::new());
        }
        let bs = self.sb.block_size as usize;
        self.ensure_stage(b.data_blocks as usize * bs)?;
        let stage = self.stage.clone();
        self.io(IoDescriptor::read(b.data_lba, b.data_blocks, &stage, 0, 0))?;
        Ok(stage.with_slice(|s| s[..b.value_len as usize].to_vec()))
    }

    /// Zero-copy get into a registered buffer with room for whole blocks.
    pub fn get_into_buffer(&mut self, key: &[u8], buffer: &IoBuffer) -> Result<usize, KvError> {
        let (_, b) = self.lookup(key)?;
        let bs = self.sb.block_size as usize;
        if b.data_blocks as usize * bs > buffer.len() {
            return Err(KvError::BufferTooSmall);
        }
        if !buffer_permitted(self.memory.as_ref(), buffer) {
            return Err(KvError::Io(IoStatus::Access));
        }
        if b.data_blocks > 0 {
            self.io(IoDescriptor::read(b.data_lba, b.data_blocks, buffer, 0, 0))?;
        }
        Ok(b.value_len as usize)
    }

    pub fn erase(&mut self, key: &[u8]) -> Result<(), KvError> {
        let (index, mut b) = self.lookup(key)?;
        let old = b;
        b.state = BucketState::Tombstone;
        self.write_bucket(index, &b)?;
        self.free_value(&old)
    }

    /// Reads only the index.
    pub fn get_attr(&mut self, key: &[u8]) -> Result<KvAttr, KvError> {
        let (_, b) = self.lookup(key)?;
        Ok(KvAttr {
            value_len: b.value_len as u64,
        })
    }

    fn scan(&mut self, mut f: impl FnMut(u64, &Bucket)) -> Result<(), KvError> {
        let sb = self.sb;
        let per = sb.buckets_per_block();
        for block in 0..sb.index_blocks() {
            let raw = self.read_index_block(sb.index_start + block)?;
            for (i, slot) in raw.chunks_exact(BUCKET_LEN).enumerate() {
                f(block * per + i as u64, &Bucket::decode(slot)?);
            }
        }
        Ok(())
    }

    pub fn list(&mut self, prefix: &[u8]) -> Result<Vec<Vec<u8>>, KvError> {
        let mut keys = BTreeSet::new();
        self.scan(|_, b| {
            if b.state == BucketState::Used && b.key().starts_with(prefix) {
                keys.insert(b.key().to_vec());
            }
        })?;
        Ok(keys.into_iter().collect())
    }

    pub fn flush(&mut self) -> Result<(), KvError> {
        self.io(IoDescriptor::flush(0))
    }

    pub fn stats(&mut self) -> Result<KvStats, KvError> {
        let mut keys = 0u64;
        let mut used_blocks = 0u64;
        self.scan(|_, b| {
            if b.state == BucketState::Used {
                keys += 1;
                used_blocks += b.data_blocks as u64;
            }
        })?;
        Ok(KvStats {
            keys,
            data_blocks: self.sb.data_blocks(),
            free_blocks: self.bitmap.free_count(),
            referenced_blocks: used_blocks,
            index_buckets: self.sb.index_buckets,
        })
    }

    /// Cross-check the in-memory bitmap against the index and the on-disk
    /// bitmap: every referenced block allocated exactly once, nothing else
    /// allocated, and referenced + free equal to the data region.
    pub fn fsck(&mut self) -> Result<KvStats, KvError> {
        let sb = self.sb;
        let mut seen = BitmapAllocator::new(sb.data_blocks());
        let mut problems = Vec::new();
        self.scan(|i, b| {
            if b.state != BucketState::Used {
                return;
            }
            let expect = (b.value_len as u64).div_ceil(sb.block_size as u64);
            if b.data_blocks as u64 != expect {
                problems.push(format!("bucket {i}: {} blocks for {} bytes", b.data_blocks, b.value_len));
            }
            if b.data_blocks == 0 {
                return;
            }
            match b.data_lba.checked_sub(sb.data_start) {
                Some(start) if seen.mark(start, b.data_blocks as u64, true) => {}
                _ => problems.push(format!("bucket {i}: bad or shared extent at {}", b.data_lba)),
            }
        })?;
        if seen != self.bitmap {
            problems.push("in-memory bitmap differs from index".into());
        }
        if self.read_bitmap()? != self.bitmap {
            problems.push("on-disk bitmap differs from index".into());
        }
        let stats = self.stats()?;
        if stats.referenced_blocks + stats.free_blocks != stats.data_blocks {
            problems.push("referenced + free != data region".into());
        }
        if problems.is_empty() {
            Ok(stats)
        } else {
            Err(KvError::BadFormat(problems.join("; ")))
        }
    }

    pub fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.memory.clone()
    }

    pub fn superblock(&self) -> Superblock {
        self.sb
    }

    pub fn bitmap(&self) -> &BitmapAllocator {
        &self.bitmap
    }

    /// Line-oriented dump of the superblock and every non-empty bucket.
    pub fn dump(&mut self) -> Result<String, KvError> {
        let sb = self.sb;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "superblock magic=CMKV version=1 block_size={} total_blocks={} bitmap_start={} bitmap_blocks={} index_start={} index_buckets={} data_start={}",
            sb.block_size, sb.total_blocks, sb.bitmap_start, sb.bitmap_blocks, sb.index_start, sb.index_buckets, sb.data_start
        );
        let _ = writeln!(
            out,
            "bitmap data_blocks={} free={}",
            sb.data_blocks(),
            self.bitmap.free_count()
        );
        let mut lines = Vec::new();
        self.scan(|i, b| match b.state {
            BucketState::Empty => {}
            BucketState::Tombstone => lines.push(format!("bucket {i} tombstone")),
            BucketState::Used => lines.push(format!(
                "bucket {i} used key={} key_len={} hash={:016x} value_len={} data_lba={} data_blocks={}",
                escape(b.key()),
                b.key_len,
                b.key_hash,
                b.value_len,
                b.data_lba,
                b.data_blocks
            )),
        })?;
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn close(self) {
        let _ = self.memory.free_io_buffer(&self.meta);
        let _ = self.memory.free_io_buffer(&self.stage);
    }
}

fn escape(key: &[u8]) -> String {
    key.iter()
        .flat_map(|&b| std::ascii::escape_default(b))
        .map(char::from)
        .collect()
}
