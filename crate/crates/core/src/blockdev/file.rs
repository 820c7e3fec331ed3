use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::leaf::{Backend, LeafDevice};
use super::{DeviceError, DEFAULT_BLOCK_SIZE};
use crate::component::{ComponentId, FILE_BLOCK_DEVICE_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub path: PathBuf,
    /// Device size; defaults to the current file size. A shorter file is
    /// extended.
    #[serde(default)]
    pub size_blocks: Option<u64>,
    #[serde(default)]
    pub create_if_missing: bool,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    /// Try cache-bypassing IO first.
    #[serde(default = "default_true")]
    pub direct: bool,
}

fn default_block_size() -> u32 {
    DEFAULT_BLOCK_SIZE
}

fn default_true() -> bool {
    true
}

impl FileConfig {
    pub fn new(path: impl Into<PathBuf>, size_blocks: u64) -> FileConfig {
        FileConfig {
            path: path.into(),
            size_blocks: Some(size_blocks),
            create_if_missing: true,
            block_size: DEFAULT_BLOCK_SIZE,
            direct: true,
        }
    }

    pub fn buffered(mut self) -> FileConfig {
        self.direct = false;
        self
    }
}

/// POSIX file emulating a block device. With `direct` IO, transfers whose
/// memory and length are block aligned bypass the page cache; anything else
/// goes through a second, buffered descriptor on the same file.
pub struct FileBackend {
    buffered: File,
    direct: Option<File>,
    block_size: u32,
    block_count: u64,
}

pub type FileBlockDevice = LeafDevice<FileBackend>;

#[cfg(target_os = "linux")]
fn open_direct(path: &std::path::Path) -> Option<File> {
    use std::os::unix::fs::OpenOptionsExt;
    OpenOptions::new()
        .read(true)
        .write(true)
        .custom_flags(libc::O_DIRECT)
        .open(path)
        .ok()
}

#[cfg(not(target_os = "linux"))]
fn open_direct(_path: &std::path::Path) -> Option<File> {
    None
}

impl FileBackend {
    fn direct_for(&self, addr: usize, len: usize) -> Option<&File> {
        let bs = self.block_size as usize;
        self.direct
            .as_ref()
            .filter(|_| addr % bs == 0 && len % bs == 0)
    }
}

impl Backend for FileBackend {
    type Config = FileConfig;
    const COMPONENT_ID: ComponentId = FILE_BLOCK_DEVICE_ID;

    fn open(config: &FileConfig) -> Result<FileBackend, DeviceError> {
        let io = |e: std::io::Error| DeviceError::Io(format!("{}: {e}", config.path.display()));
        let buffered = OpenOptions::new()
            .read(true)
            .write(true)
            .create(config.create_if_missing)
            .truncate(false)
            .open(&config.path)
            .map_err(io)?;
        let bs = config.block_size as u64;
        let len = buffered.metadata().map_err(io)?.len();
        let block_count = config.size_blocks.unwrap_or(len / bs);
        if block_count * bs > len {
            buffered.set_len(block_count * bs).map_err(io)?;
        }
        let direct = if config.direct {
            open_direct(&config.path)
        } else {
            None
        };
        log::debug!(
            "file device {} opened ({} blocks, {} IO)",
            config.path.display(),
            block_count,
            if direct.is_some() { "direct" } else { "buffered" }
        );
        Ok(FileBackend {
            buffered,
            direct,
            block_size: config.block_size,
            block_count,
        })
    }

    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.block_count
    }

    fn io_mode(&self) -> &'static str {
        if self.direct.is_some() {
            "direct"
        } else {
            "buffered"
        }
    }

    fn read(&self, lba: u64, dst: &mut [u8]) -> std::io::Result<()> {
        let pos = lba * self.block_size as u64;
        if let Some(file) = self.direct_for(dst.as_ptr() as usize, dst.len()) {
            match file.read_exact_at(dst, pos) {
                Err(e) if e.raw_os_error() == Some(libc::EINVAL) => {}
                other => return other,
            }
        }
        self.buffered.read_exact_at(dst, pos)
    }

    fn write(&self, lba: u64, src: &[u8]) -> std::io::Result<()> {
        let pos = lba * self.block_size as u64;
        if let Some(file) = self.direct_for(src.as_ptr() as usize, src.len()) {
            match file.write_all_at(src, pos) {
                Err(e) if e.raw_os_error() == Some(libc::EINVAL) => {}
                other => return other,
            }
        }
        self.buffered.write_all_at(src, pos)
    }

    fn flush(&self) -> std::io::Result<()> {
        self.buffered.sync_data()
    }
}
