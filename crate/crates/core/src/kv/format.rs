//! On-disk structures of the KV store (all integers little-endian).
//!
//! Superblock, block 0, first 64 bytes:
//!
//! ```text
//! 0  magic "CMKV"        4  version u32 = 1     8  block_size u32
//! 12 total_blocks u64    20 bitmap_start u64    28 bitmap_blocks u64
//! 36 index_start u64     44 index_buckets u64   52 data_start u64
//! 60 crc32 u32 over bytes 0..60
//! ```
//!
//! Index bucket, 64 bytes:
//!
//! ```text
//! 0  state u8 (0 empty, 1 used, 2 tombstone)   1  key_len u8
//! 2  value_len u32       6  key_hash u64        14 data_lba u48
//! 20 data_blocks u32     24 key [u8; 40]
//! ```
//!
//! The listed bucket fields add up to 66 bytes, so `data_lba` is stored in
//! 48 bits to keep buckets at 64 bytes.

use super::KvError;

pub const KV_MAGIC: [u8; 4] = *b"CMKV";
pub const KV_VERSION: u32 = 1;
pub const SUPERBLOCK_LEN: usize = 64;
pub const BUCKET_LEN: usize = 64;
pub const MAX_KEY_LEN: usize = 40;
pub const MIN_DEVICE_BLOCKS: u64 = 64;
pub const MAX_DATA_LBA: u64 = (1 << 48) - 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Superblock {
    pub block_size: u32,
    pub total_blocks: u64,
    pub bitmap_start: u64,
    pub bitmap_blocks: u64,
    pub index_start: u64,
    pub index_buckets: u64,
    pub data_start: u64,
}

impl Superblock {
    /// Region sizes for a fresh store.
    pub fn layout(total_blocks: u64, block_size: u32) -> Result<Superblock, KvError> {
        if total_blocks < MIN_DEVICE_BLOCKS {
            return Err(KvError::DeviceTooSmall(total_blocks));
        }
        let per_block = (block_size as usize / BUCKET_LEN) as u64;
        let index_blocks = (total_blocks / 4).div_ceil(per_block).max(1);
        let remaining = total_blocks - 1 - index_blocks;
        // b bitmap blocks must cover remaining - b data blocks
        let bits = block_size as u64 * 8;
        let bitmap_blocks = remaining.div_ceil(bits + 1);
        let sb = Superblock {
            block_size,
            total_blocks,
            bitmap_start: 1,
            bitmap_blocks,
            index_start: 1 + bitmap_blocks,
            index_buckets: index_blocks * per_block,
            data_start: 1 + bitmap_blocks + index_blocks,
        };
        sb.check()?;
        Ok(sb)
    }

    pub fn buckets_per_block(&self) -> u64 {
        self.block_size as u64 / BUCKET_LEN as u64
    }

    pub fn index_blocks(&self) -> u64 {
        self.index_buckets / self.buckets_per_block()
    }

    pub fn data_blocks(&self) -> u64 {
        self.total_blocks - self.data_start
    }

    /// Region ordering and containment.
    pub fn check(&self) -> Result<(), KvError> {
        let bad = |what: &str| Err(KvError::BadFormat(what.to_string()));
        if self.block_size < 512 || !self.block_size.is_power_of_two() {
            return bad("block size");
        }
        if self.bitmap_start != 1 || self.bitmap_blocks == 0 {
            return bad("bitmap region");
        }
        if self.index_start != self.bitmap_start + self.bitmap_blocks
            || self.index_buckets == 0
            || self.index_buckets % self.buckets_per_block() != 0
        {
            return bad("index region");
        }
        if self.data_start != self.index_start + self.index_blocks() || self.data_start >= self.total_blocks {
            return bad("data region");
        }
        if self.bitmap_blocks * self.block_size as u64 * 8 < self.data_blocks() {
            return bad("bitmap too small for data region");
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; SUPERBLOCK_LEN] {
        let mut b = [0u8; SUPERBLOCK_LEN];
        b[0..4].copy_from_slice(&KV_MAGIC);
        b[4..8].copy_from_slice(&KV_VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.block_size.to_le_bytes());
        b[12..20].copy_from_slice(&self.total_blocks.to_le_bytes());
        b[20..28].copy_from_slice(&self.bitmap_start.to_le_bytes());
        b[28..36].copy_from_slice(&self.bitmap_blocks.to_le_bytes());
        b[36..44].copy_from_slice(&self.index_start.to_le_bytes());
        b[44..52].copy_from_slice(&self.index_buckets.to_le_bytes());
        b[52..60].copy_from_slice(&self.data_start.to_le_bytes());
        let crc = crc32fast::hash(&b[..60]);
        b[60..64].copy_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Superblock, KvError> {
        if b.len() < SUPERBLOCK_LEN {
            return Err(KvError::BadFormat("short superblock".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap());
        if crc32fast::hash(&b[..60]) != u32_at(60) {
            return Err(KvError::Crc);
        }
        if b[0..4] != KV_MAGIC || u32_at(4) != KV_VERSION {
            return Err(KvError::BadFormat("not a KV store superblock".into()));
        }
        let sb = Superblock {
            block_size: u32_at(8),
            total_blocks: u64_at(12),
            bitmap_start: u64_at(20),
            bitmap_blocks: u64_at(28),
            index_start: u64_at(36),
            index_buckets: u64_at(44),
            data_start: u64_at(52),
        };
        sb.check()?;
        Ok(sb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BucketState {
    Empty = 0,
    Used = 1,
    Tombstone = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucket {
    pub state: BucketState,
    pub key_len: u8,
    pub value_len: u32,
    pub key_hash: u64,
    pub data_lba: u64,
    pub data_blocks: u32,
    pub key: [u8; MAX_KEY_LEN],
}

impl Bucket {
    pub const EMPTY: Bucket = Bucket {
        state: BucketState::Empty,
        key_len: 0,
        value_len: 0,
        key_hash: 0,
        data_lba: 0,
        data_blocks: 0,
        key: [0; MAX_KEY_LEN],
    };

    pub fn used(key: &[u8], value_len: u32, data_lba: u64, data_blocks: u32) -> Bucket {
        let mut k = [0u8; MAX_KEY_LEN];
        k[..key.len()].copy_from_slice(key);
        Bucket {
            state: BucketState::Used,
            key_len: key.len() as u8,
            value_len,
            key_hash: fnv1a64(key),
            data_lba,
            data_blocks,
            key: k,
        }
    }

    pub fn key(&self) -> &[u8] {
        &self.key[..self.key_len as usize]
    }

    pub fn encode(&self) -> [u8; BUCKET_LEN] {
        let mut b = [0u8; BUCKET_LEN];
        b[0] = self.state as u8;
        b[1] = self.key_len;
        b[2..6].copy_from_slice(&self.value_len.to_le_bytes());
        b[6..14].copy_from_slice(&self.key_hash.to_le_bytes());
        b[14..20].copy_from_slice(&self.data_lba.to_le_bytes()[..6]);
        b[20..24].copy_from_slice(&self.data_blocks.to_le_bytes());
        b[24..64].copy_from_slice(&self.key);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Bucket, KvError> {
        let state = match b[0] {
            0 => BucketState::Empty,
            1 => BucketState::Used,
            2 => BucketState::Tombstone,
            s => return Err(KvError::BadFormat(format!("bucket state {s}"))),
        };
        let key_len = b[1];
        if key_len as usize > MAX_KEY_LEN {
            return Err(KvError::BadFormat(format!("bucket key length {key_len}")));
        }
        let mut lba = [0u8; 8];
        lba[..6].copy_from_slice(&b[14..20]);
        Ok(Bucket {
            state,
            key_len,
            value_len: u32::from_le_bytes(b[2..6].try_into().unwrap()),
            key_hash: u64::from_le_bytes(b[6..14].try_into().unwrap()),
            data_lba: u64::from_le_bytes(lba),
            data_blocks: u32::from_le_bytes(b[20..24].try_into().unwrap()),
            key: b[24..64].try_into().unwrap(),
        })
    }
}
