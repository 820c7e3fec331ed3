//! Write-through LRU block cache.
//!
//! Reads that hit in full are answered from resident copies; this copy into
//! the caller's buffer is the one data copy a stack makes. Misses read from
//! the child straight into the caller's buffer and then insert. Writes go to
//! the child and update resident copies when the child completes.
//!
//! A block with IO in flight is tracked so a read that raced a write never
//! inserts stale data, and of several overlapping writes only the last
//! started one may insert.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{child_infos, virtual_info, Begin, ChildIo, Kind, Router, Step};
use crate::blockdev::{BlockDevice, DeviceError, DeviceInfo, IoDescriptor, IoOp, IoStatus};
use crate::component::{ComponentId, BLOCK_CACHE_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity_blocks: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { capacity_blocks: 1024 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub resident: usize,
}

#[derive(Default)]
struct Track {
    reads: u32,
    writes: u32,
    version: u64,
}

struct CacheState {
    resident: LruCache<u64, Box<[u8]>>,
    tracks: HashMap<u64, Track>,
}

impl CacheState {
    fn release(&mut self, lba: u64, read: bool) {
        if let Some(t) = self.tracks.get_mut(&lba) {
            if read {
                t.reads -= 1;
            } else {
                t.writes -= 1;
            }
            if t.reads == 0 && t.writes == 0 {
                self.tracks.remove(&lba);
            }
        }
    }
}

pub enum CacheOp {
    /// Versions of each block when the miss was issued.
    Fill(Vec<u64>),
    Write(Vec<u64>),
    Flush,
}

pub struct CacheRouter {
    info: DeviceInfo,
    state: Mutex<CacheState>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CacheRouter {
    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            resident: self.state.lock().resident.len(),
        }
    }

    pub fn is_resident(&self, lba: u64) -> bool {
        self.state.lock().resident.contains(&lba)
    }

    fn whole(desc: &IoDescriptor) -> ChildIo {
        ChildIo {
            child: 0,
            op: desc.op,
            lba: desc.lba,
            block_count: desc.block_count,
            offset: 0,
        }
    }

    /// Copy block `i` of the transfer out of the caller's buffer.
    fn block_of(&self, desc: &IoDescriptor, i: usize) -> Box<[u8]> {
        let bs = self.info.block_size as usize;
        let buffer = desc.buffer.as_ref().unwrap();
        // SAFETY: the composite queue holds an in-flight guard on the buffer
        // and validated the range.
        unsafe { buffer.device_slice(desc.offset + i * bs, bs) }.into()
    }
}

impl Router for CacheRouter {
    type Op = CacheOp;

    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn start(&self, desc: &IoDescriptor, io: &mut Vec<ChildIo>) -> Begin<CacheOp> {
        let blocks = desc.lba..desc.lba + desc.block_count as u64;
        match desc.op {
            IoOp::Flush => {
                io.push(ChildIo::flush(0));
                Begin::Wait(CacheOp::Flush)
            }
            IoOp::Read => {
                let mut state = self.state.lock();
                let all_resident = blocks.clone().all(|b| state.resident.contains(&b));
                if all_resident {
                    let bs = self.info.block_size as usize;
                    let buffer = desc.buffer.as_ref().unwrap();
                    for (i, b) in blocks.enumerate() {
                        let data = state.resident.get(&b).unwrap();
                        // SAFETY: as in `block_of`.
                        unsafe { buffer.device_slice_mut(desc.offset + i * bs, bs) }
                            .copy_from_slice(data);
                    }
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Begin::Done(IoStatus::Ok);
                }
                self.misses.fetch_add(1, Ordering::Relaxed);
                let versions = blocks
                    .map(|b| {
                        let t = state.tracks.entry(b).or_default();
                        t.reads += 1;
                        // a write already in flight may land after this read
                        if t.writes > 0 {
                            u64::MAX
                        } else {
                            t.version
                        }
                    })
                    .collect();
                io.push(Self::whole(desc));
                Begin::Wait(CacheOp::Fill(versions))
            }
            IoOp::Write => {
                let mut state = self.state.lock();
                let versions = blocks
                    .map(|b| {
                        state.resident.pop(&b);
                        let t = state.tracks.entry(b).or_default();
                        t.writes += 1;
                        t.version += 1;
                        t.version
                    })
                    .collect();
                io.push(Self::whole(desc));
                Begin::Wait(CacheOp::Write(versions))
            }
        }
    }

    fn child_done(&self, op: &mut CacheOp, desc: &IoDescriptor, _: usize, status: IoStatus, _: &mut Vec<ChildIo>) -> Step {
        let (versions, is_read) = match op {
            CacheOp::Flush => return Step::Done(status),
            CacheOp::Fill(v) => (v, true),
            CacheOp::Write(v) => (v, false),
        };
        let mut state = self.state.lock();
        for (i, &version) in versions.iter().enumerate() {
            let lba = desc.lba + i as u64;
            let current = state.tracks.get(&lba).map(|t| (t.version, t.writes));
            let insert = status.is_ok()
                && match current {
                    Some((v, writes)) if is_read => v == version && writes == 0,
                    Some((v, _)) => v == version,
                    None => false,
                };
            if insert {
                let data = self.block_of(desc, i);
                state.resident.put(lba, data);
            }
            state.release(lba, is_read);
        }
        Step::Done(status)
    }
}

pub struct BlockCache;

impl Kind for BlockCache {
    type Config = CacheConfig;
    type Router = CacheRouter;
    const COMPONENT_ID: ComponentId = BLOCK_CACHE_ID;
    const NAME: &'static str = "cache";
    const MIN_CHILDREN: usize = 1;
    const MAX_CHILDREN: usize = 1;

    fn build(config: &CacheConfig, children: &[Arc<dyn BlockDevice>], device_id: u64) -> Result<CacheRouter, DeviceError> {
        let capacity = NonZeroUsize::new(config.capacity_blocks)
            .ok_or_else(|| DeviceError::Invalid("cache capacity must be at least one block".into()))?;
        let info = child_infos(children)?.remove(0);
        Ok(CacheRouter {
            info: virtual_info(info.block_size, info.block_count, device_id),
            state: Mutex::new(CacheState {
                resident: LruCache::new(capacity),
                tracks: HashMap::new(),
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }
}
