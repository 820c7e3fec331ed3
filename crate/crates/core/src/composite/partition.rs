//! Fixed partitioning with a one-block table.
//!
//! Block 0 of the device holds (little-endian):
//!
//! ```text
//! 0   magic "CMPT"
//! 4   version u32 = 1
//! 8   entry_count u32
//! 12  entries: { start_lba u64, num_blocks u64, name [u8; 32] } x entry_count
//! ..  crc32 u32 over all preceding bytes
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{child_infos, virtual_info, Begin, ChildIo, Kind, Router, Step};
use crate::blockdev::{BlockDevice, DeviceError, DeviceInfo, IoDescriptor, IoOp, IoStatus};
use crate::component::{ComponentId, PARTITION_ID};

pub const PARTITION_MAGIC: [u8; 4] = *b"CMPT";
pub const PARTITION_VERSION: u32 = 1;
pub const PARTITION_NAME_LEN: usize = 32;
const HEADER_LEN: usize = 12;
const ENTRY_LEN: usize = 8 + 8 + PARTITION_NAME_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub start_lba: u64,
    pub num_blocks: u64,
    pub name: String,
}

impl PartitionEntry {
    pub fn new(start_lba: u64, num_blocks: u64, name: &str) -> PartitionEntry {
        PartitionEntry {
            start_lba,
            num_blocks,
            name: name.to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("E_OVERLAP: partition entries overlap or are out of order")]
    Overlap,
    #[error("E_CRC: partition table checksum mismatch")]
    Crc,
    #[error("E_BOUNDS: {0}")]
    Bounds(String),
    #[error("not a partition table (bad magic or version)")]
    BadMagic,
    #[error("invalid partition entry: {0}")]
    Invalid(String),
    #[error("device error: {0}")]
    Device(String),
}

impl From<PartitionError> for DeviceError {
    fn from(e: PartitionError) -> Self {
        DeviceError::Invalid(e.to_string())
    }
}

fn validate(entries: &[PartitionEntry], block_count: u64, block_size: u32) -> Result<(), PartitionError> {
    let max = (block_size as usize - HEADER_LEN - 4) / ENTRY_LEN;
    if entries.len() > max {
        return Err(PartitionError::Invalid(format!("at most {max} entries fit in block 0")));
    }
    let mut next_free = 1u64;
    for e in entries {
        if e.name.len() > PARTITION_NAME_LEN {
            return Err(PartitionError::Invalid(format!("name `{}` longer than 32 bytes", e.name)));
        }
        if e.num_blocks == 0 {
            return Err(PartitionError::Invalid(format!("partition `{}` is empty", e.name)));
        }
        if e.start_lba < next_free {
            return Err(PartitionError::Overlap);
        }
        let end = e
            .start_lba
            .checked_add(e.num_blocks)
            .ok_or(PartitionError::Overlap)?;
        if end > block_count {
            return Err(PartitionError::Bounds(format!(
                "partition `{}` ends at {end}, device has {block_count} blocks",
                e.name
            )));
        }
        next_free = end;
    }
    Ok(())
}

/// Bit-exact table image for block 0.
pub fn encode_table(entries: &[PartitionEntry], block_size: u32) -> Vec<u8> {
    let mut block = vec![0u8; block_size as usize];
    block[0..4].copy_from_slice(&PARTITION_MAGIC);
    block[4..8].copy_from_slice(&PARTITION_VERSION.to_le_bytes());
    block[8..12].copy_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut at = HEADER_LEN;
    for e in entries {
        block[at..at + 8].copy_from_slice(&e.start_lba.to_le_bytes());
        block[at + 8..at + 16].copy_from_slice(&e.num_blocks.to_le_bytes());
        block[at + 16..at + 16 + e.name.len()].copy_from_slice(e.name.as_bytes());
        at += ENTRY_LEN;
    }
    let crc = crc32fast::hash(&block[..at]);
    block[at..at + 4].copy_from_slice(&crc.to_le_bytes());
    block
}

pub fn decode_table(block: &[u8], block_count: u64) -> Result<Vec<PartitionEntry>, PartitionError> {
    if block.len() < HEADER_LEN + 4 || block[0..4] != PARTITION_MAGIC {
        return Err(PartitionError::BadMagic);
    }
    let u32_at = |at: usize| u32::from_le_bytes(block[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(block[at..at + 8].try_into().unwrap());
    let count = u32_at(8) as usize;
    let end = HEADER_LEN + count.saturating_mul(ENTRY_LEN);
    if end + 4 > block.len() {
        return Err(PartitionError::Crc);
    }
    if crc32fast::hash(&block[..end]) != u32_at(end) {
        return Err(PartitionError::Crc);
    }
    if u32_at(4) != PARTITION_VERSION {
        return Err(PartitionError::BadMagic);
    }
    let entries: Vec<_> = (0..count)
        .map(|i| {
            let at = HEADER_LEN + i * ENTRY_LEN;
            let raw = &block[at + 16..at + 16 + PARTITION_NAME_LEN];
            let name_len = raw.iter().position(|&b| b == 0).unwrap_or(PARTITION_NAME_LEN);
            PartitionEntry {
                start_lba: u64_at(at),
                num_blocks: u64_at(at + 8),
                name: String::from_utf8_lossy(&raw[..name_len]).into_owned(),
            }
        })
        .collect();
    validate(&entries, block_count, block.len() as u32)?;
    Ok(entries)
}

/// Write the table for `entries` to block 0 of `device`.
pub fn partition_format(device: &dyn BlockDevice, entries: &[PartitionEntry]) -> Result<(), PartitionError> {
    let info = device.info().map_err(|e| PartitionError::Device(e.to_string()))?;
    validate(entries, info.block_count, info.block_size)?;
    let image = encode_table(entries, info.block_size);
    let buf = crate::blockdev::buffer_with(device.memory().as_ref(), &image, info.block_size)
        .map_err(|e| PartitionError::Device(e.to_string()))?;
    let result = device
        .write_sync(0, 1, &buf, 0)
        .and_then(|_| device.flush_sync())
        .map_err(|s| PartitionError::Device(s.to_string()));
    let _ = device.memory().free_io_buffer(&buf);
    result
}

/// Read and verify the table in block 0 of `device`.
pub fn partition_read(device: &dyn BlockDevice) -> Result<Vec<PartitionEntry>, PartitionError> {
    let info = device.info().map_err(|e| PartitionError::Device(e.to_string()))?;
    let memory = device.memory();
    let buf = memory
        .allocate_io_buffer(info.block_size as usize, 4096, -1)
        .map_err(|e| PartitionError::Device(e.to_string()))?;
    let result = device
        .read_sync(0, 1, &buf, 0)
        .map_err(|s| PartitionError::Device(s.to_string()))
        .and_then(|_| buf.with_slice(|block| decode_table(block, info.block_count)));
    let _ = memory.free_io_buffer(&buf);
    result
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Which table entry this view exposes.
    #[serde(default)]
    pub index: usize,
    /// Write this table to block 0 before opening.
    #[serde(default)]
    pub format: Option<Vec<PartitionEntry>>,
}

pub struct PartitionRouter {
    info: DeviceInfo,
    start_lba: u64,
    entry: PartitionEntry,
}

impl PartitionRouter {
    pub fn entry(&self) -> &PartitionEntry {
        &self.entry
    }

    /// Physical block behind a view block.
    pub fn map(&self, lba: u64) -> u64 {
        self.start_lba + lba
    }
}

impl Router for PartitionRouter {
    type Op = ();

    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn start(&self, desc: &IoDescriptor, io: &mut Vec<ChildIo>) -> Begin<()> {
        io.push(if desc.op == IoOp::Flush {
            ChildIo::flush(0)
        } else {
            ChildIo {
                child: 0,
                op: desc.op,
                lba: self.map(desc.lba),
                block_count: desc.block_count,
                offset: 0,
            }
        });
        Begin::Wait(())
    }

    fn child_done(&self, _: &mut (), _: &IoDescriptor, _: usize, status: IoStatus, _: &mut Vec<ChildIo>) -> Step {
        Step::Done(status)
    }
}

pub struct Partition;

impl Kind for Partition {
    type Config = PartitionConfig;
    type Router = PartitionRouter;
    const COMPONENT_ID: ComponentId = PARTITION_ID;
    const NAME: &'static str = "partition";
    const MIN_CHILDREN: usize = 1;
    const MAX_CHILDREN: usize = 1;

    fn build(
        config: &PartitionConfig,
        children: &[Arc<dyn BlockDevice>],
        device_id: u64,
    ) -> Result<PartitionRouter, DeviceError> {
        let device = children[0].as_ref();
        let info = child_infos(children)?.remove(0);
        if let Some(entries) = &config.format {
            partition_format(device, entries)?;
        }
        let entries = partition_read(device)?;
        let entry = entries.get(config.index).cloned().ok_or_else(|| {
            PartitionError::Bounds(format!(
                "partition index {} but table has {} entries",
                config.index,
                entries.len()
            ))
        })?;
        Ok(PartitionRouter {
            info: virtual_info(info.block_size, entry.num_blocks, device_id),
            start_lba: entry.start_lba,
            entry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<PartitionEntry> {
        vec![PartitionEntry::new(1, 100, "a"), PartitionEntry::new(101, 200, "b")]
    }

    #[test]
    fn table_layout_is_bit_exact() {
        let image = encode_table(&sample(), 4096);
        assert_eq!(&image[0..4], b"CMPT");
        assert_eq!(&image[4..8], &1u32.to_le_bytes());
        assert_eq!(&image[8..12], &2u32.to_le_bytes());
        assert_eq!(&image[12..20], &1u64.to_le_bytes());
        assert_eq!(&image[20..28], &100u64.to_le_bytes());
        assert_eq!(&image[28..29], b"a");
        assert!(image[29..60].iter().all(|&b| b == 0));
        assert_eq!(&image[60..68], &101u64.to_le_bytes());
        assert_eq!(&image[76..77], b"b");
        let crc_at = 12 + 2 * 48;
        assert_eq!(
            &image[crc_at..crc_at + 4],
            &crc32fast::hash(&image[..crc_at]).to_le_bytes()
        );
        assert_eq!(decode_table(&image, 1024).unwrap(), sample());
    }

    #[test]
    fn overlapping_or_unsorted_entries() {
        let overlap = vec![PartitionEntry::new(1, 100, "a"), PartitionEntry::new(100, 10, "b")];
        assert_eq!(validate(&overlap, 1024, 4096), Err(PartitionError::Overlap));
        let unsorted = vec![PartitionEntry::new(200, 10, "a"), PartitionEntry::new(1, 10, "b")];
        assert_eq!(validate(&unsorted, 1024, 4096), Err(PartitionError::Overlap));
        let zero = vec![PartitionEntry::new(0, 10, "a")];
        assert_eq!(validate(&zero, 1024, 4096), Err(PartitionError::Overlap));
        let past_end = vec![PartitionEntry::new(1, 1024, "a")];
        assert!(matches!(validate(&past_end, 1024, 4096), Err(PartitionError::Bounds(_))));
        assert!(validate(&[PartitionEntry::new(1, 1023, "a")], 1024, 4096).is_ok());
    }

    #[test]
    fn any_flipped_byte_in_the_table_is_detected() {
        let image = encode_table(&sample(), 4096);
        let covered = 12 + 2 * 48 + 4;
        for i in 4..covered {
            let mut bad = image.clone();
            bad[i] ^= 0x01;
            assert!(decode_table(&bad, 1024).is_err(), "flip at byte {i}");
        }
        let mut bad = image.clone();
        bad[0] ^= 1;
        assert_eq!(decode_table(&bad, 1024), Err(PartitionError::BadMagic));
    }
}
