use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::leaf::{Backend, LeafDevice};
use super::{DeviceError, DEFAULT_BLOCK_SIZE};
use crate::component::{ComponentId, RAM_BLOCK_DEVICE_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamConfig {
    pub size_blocks: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
}

fn default_block_size() -> u32 {
    DEFAULT_BLOCK_SIZE
}

impl RamConfig {
    pub fn new(size_blocks: u64) -> RamConfig {
        RamConfig {
            size_blocks,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

pub struct RamBackend {
    block_size: u32,
    block_count: u64,
    data: RwLock<Vec<u8>>,
}

pub type RamBlockDevice = LeafDevice<RamBackend>;

impl Backend for RamBackend {
    type Config = RamConfig;
    const COMPONENT_ID: ComponentId = RAM_BLOCK_DEVICE_ID;

    fn open(config: &RamConfig) -> Result<RamBackend, DeviceError> {
        let bytes = config
            .size_blocks
            .checked_mul(config.block_size as u64)
            .filter(|b| *b <= isize::MAX as u64)
            .ok_or_else(|| DeviceError::Invalid("RAM device too large".into()))?;
        Ok(RamBackend {
            block_size: config.block_size,
            block_count: config.size_blocks,
            data: RwLock::new(vec![0u8; bytes as usize]),
        })
    }

    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.block_count
    }

    fn io_mode(&self) -> &'static str {
        "ram"
    }

    fn read(&self, lba: u64, dst: &mut [u8]) -> std::io::Result<()> {
        let start = (lba * self.block_size as u64) as usize;
        dst.copy_from_slice(&self.data.read()[start..start + dst.len()]);
        Ok(())
    }

    fn write(&self, lba: u64, src: &[u8]) -> std::io::Result<()> {
        let start = (lba * self.block_size as u64) as usize;
        self.data.write()[start..start + src.len()].copy_from_slice(src);
        Ok(())
    }

    fn flush(&self) -> std::io::Result<()> {
        Ok(())
    }
}
