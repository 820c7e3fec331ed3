//! File-system style verbs over a KV store.
//!
//! A path `/a/b` names key `a/b`. Directories are never stored: `/a` is a
//! directory while some key starts with `a/`, so empty directories cannot
//! exist. Metadata verbs touch only the store's index; `read`/`write` go to
//! the store's data path and require registered IO buffers.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::blockdev::IoStatus;
use crate::kv::{KvError, KvStore};
use crate::memory::{buffer_permitted, IoBuffer, DEFAULT_ALIGNMENT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VfsError {
    #[error("NotFound: {0}")]
    NotFound(String),
    #[error("Exists: {0}")]
    Exists(String),
    #[error("E_ACCESS: buffer is not registered with the store's memory")]
    Access,
    #[error("InvalidPath: `{0}`")]
    InvalidPath(String),
    #[error("length {len} exceeds buffer of {capacity} bytes")]
    BufferTooSmall { len: usize, capacity: usize },
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VfsPath {
    segments: Vec<String>,
}

impl VfsPath {
    pub fn root() -> VfsPath {
        VfsPath { segments: Vec::new() }
    }

    /// Accepts `/a/b`, `a/b` and a trailing slash. Empty, `.` and `..`
    /// segments are refused rather than normalised.
    pub fn parse(s: &str) -> Result<VfsPath, VfsError> {
        let trimmed = s.strip_prefix('/').unwrap_or(s);
        let trimmed = trimmed.strip_suffix('/').unwrap_or(trimmed);
        if trimmed.is_empty() {
            return Ok(VfsPath::root());
        }
        let mut segments = Vec::new();
        for seg in trimmed.split('/') {
            if seg.is_empty() || seg == "." || seg == ".." {
                return Err(VfsError::InvalidPath(s.to_string()));
            }
            segments.push(seg.to_string());
        }
        Ok(VfsPath { segments })
    }

    pub fn from_key(key: &[u8]) -> VfsPath {
        let key = String::from_utf8_lossy(key);
        VfsPath {
            segments: key.split('/').map(str::to_string).collect(),
        }
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn key(&self) -> String {
        self.segments.join("/")
    }

    /// Key prefix shared by everything below this directory.
    fn dir_prefix(&self) -> String {
        if self.is_root() {
            String::new()
        } else {
            format!("{}/", self.key())
        }
    }
}

impl fmt::Display for VfsPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}", self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryKind {
    File,
    Dir,
}

impl EntryKind {
    pub fn name(&self) -> &'static str {
        match self {
            EntryKind::File => "file",
            EntryKind::Dir => "dir",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DirEntry {
    pub name: String,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stat {
    pub kind: EntryKind,
    /// Value length for files, 0 for directories.
    pub size: u64,
}

pub struct Vfs {
    kv: Arc<dyn KvStore>,
    lock: Mutex<()>,
}

fn not_found(path: &VfsPath) -> impl Fn(KvError) -> VfsError + '_ {
    move |e| match e {
        KvError::NotFound => VfsError::NotFound(path.to_string()),
        KvError::Io(IoStatus::Access) => VfsError::Access,
        e => VfsError::Kv(e),
    }
}

impl Vfs {
    pub fn new(kv: Arc<dyn KvStore>) -> Vfs {
        Vfs {
            kv,
            lock: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &Arc<dyn KvStore> {
        &self.kv
    }

    /// Distinct next segments under `path`, sorted by name. A name used both
    /// as a key and as a prefix appears once of each kind.
    pub fn list(&self, path: &VfsPath) -> Result<Vec<DirEntry>, VfsError> {
        let _g = self.lock.lock();
        self.list_locked(path)
    }

    fn list_locked(&self, path: &VfsPath) -> Result<Vec<DirEntry>, VfsError> {
        let prefix = path.dir_prefix();
        let mut entries = BTreeSet::new();
        for key in self.kv.list(prefix.as_bytes())? {
            let rest = String::from_utf8_lossy(&key[prefix.len()..]).into_owned();
            let entry = match rest.split_once('/') {
                Some((dir, _)) => DirEntry {
                    name: dir.to_string(),
                    kind: EntryKind::Dir,
                },
                None => DirEntry {
                    name: rest,
                    kind: EntryKind::File,
                },
            };
            entries.insert(entry);
        }
        if entries.is_empty() && !path.is_root() {
            return Err(VfsError::NotFound(path.to_string()));
        }
        Ok(entries.into_iter().collect())
    }

    pub fn stat(&self, path: &VfsPath) -> Result<Stat, VfsError> {
        let _g = self.lock.lock();
        if path.is_root() {
            return Ok(Stat {
                kind: EntryKind::Dir,
                size: 0,
            });
        }
        match self.kv.get_attr(path.key().as_bytes()) {
            Ok(attr) => Ok(Stat {
                kind: EntryKind::File,
                size: attr.value_len,
            }),
            Err(KvError::NotFound) => {
                self.list_locked(path)?;
                Ok(Stat {
                    kind: EntryKind::Dir,
                    size: 0,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn remove(&self, path: &VfsPath) -> Result<(), VfsError> {
        let _g = self.lock.lock();
        self.kv.erase(path.key().as_bytes()).map_err(not_found(path))
    }

    pub fn copy(&self, src: &VfsPath, dst: &VfsPath, overwrite: bool) -> Result<(), VfsError> {
        let _g = self.lock.lock();
        self.copy_locked(src, dst, overwrite)
    }

    fn copy_locked(&self, src: &VfsPath, dst: &VfsPath, overwrite: bool) -> Result<(), VfsError> {
        let size = self.kv.get_attr(src.key().as_bytes()).map_err(not_found(src))?.value_len as usize;
        if src == dst {
            return Ok(());
        }
        if !overwrite && self.kv.get_attr(dst.key().as_bytes()).is_ok() {
            return Err(VfsError::Exists(dst.to_string()));
        }
        let buffer = self.staging(size)?;
        let len = self.kv.get_into_buffer(src.key().as_bytes(), &buffer).map_err(not_found(src))?;
        self.kv.put_from_buffer(dst.key().as_bytes(), &buffer, len)?;
        Ok(())
    }

    /// Copy, then erase the source once the copy is committed.
    pub fn rename(&self, src: &VfsPath, dst: &VfsPath, overwrite: bool) -> Result<(), VfsError> {
        let _g = self.lock.lock();
        self.copy_locked(src, dst, overwrite)?;
        if src != dst {
            self.kv.erase(src.key().as_bytes()).map_err(not_found(src))?;
        }
        Ok(())
    }

    /// Read up to `len` bytes from `offset` into the front of `buffer`;
    /// returns the bytes moved (0 at or past the end).
    pub fn read(&self, path: &VfsPath, offset: u64, len: usize, buffer: &IoBuffer) -> Result<usize, VfsError> {
        let _g = self.lock.lock();
        self.check_buffer(buffer, len)?;
        let key = path.key();
        let size = self.kv.get_attr(key.as_bytes()).map_err(not_found(path))?.value_len;
        if offset >= size {
            return Ok(0);
        }
        let n = len.min((size - offset) as usize);
        let whole = self.round_up(size as usize)?;
        if offset == 0 && whole <= buffer.len() {
            self.kv.get_into_buffer(key.as_bytes(), buffer).map_err(not_found(path))?;
            return Ok(n);
        }
        let stage = self.staging(size as usize)?;
        self.kv.get_into_buffer(key.as_bytes(), &stage).map_err(not_found(path))?;
        let bytes = stage.with_slice(|s| s[offset as usize..offset as usize + n].to_vec());
        buffer.write_at(0, &bytes);
        Ok(n)
    }

    /// Write the first `len` bytes of `buffer` at `offset`, creating the file
    /// if needed. Bytes outside the range are kept; a gap past the old end
    /// reads as zeros.
    pub fn write(&self, path: &VfsPath, offset: u64, len: usize, buffer: &IoBuffer) -> Result<usize, VfsError> {
        let _g = self.lock.lock();
        self.check_buffer(buffer, len)?;
        if path.is_root() {
            return Err(VfsError::InvalidPath(path.to_string()));
        }
        let key = path.key();
        let old = match self.kv.get_attr(key.as_bytes()) {
            Ok(attr) => attr.value_len,
            Err(KvError::NotFound) => 0,
            Err(e) => return Err(e.into()),
        };
        if offset == 0 && old <= len as u64 {
            self.kv.put_from_buffer(key.as_bytes(), buffer, len)?;
            return Ok(len);
        }
        let end = old.max(offset + len as u64) as usize;
        let stage = self.staging(end)?;
        stage.fill(0);
        if old > 0 {
            self.kv.get_into_buffer(key.as_bytes(), &stage)?;
            // a shorter old value leaves block padding behind it
            let padding = end.min(self.round_up(old as usize)?) - old as usize;
            stage.write_at(old as usize, &vec![0; padding]);
        }
        let data = buffer.with_slice(|s| s[..len].to_vec());
        stage.write_at(offset as usize, &data);
        self.kv.put_from_buffer(key.as_bytes(), &stage, end)?;
        Ok(len)
    }

    fn check_buffer(&self, buffer: &IoBuffer, len: usize) -> Result<(), VfsError> {
        let memory = self.kv.memory()?;
        if !buffer_permitted(memory.as_ref(), buffer) {
            return Err(VfsError::Access);
        }
        if len > buffer.len() {
            return Err(VfsError::BufferTooSmall {
                len,
                capacity: buffer.len(),
            });
        }
        Ok(())
    }

    fn round_up(&self, len: usize) -> Result<usize, VfsError> {
        let bs = self.kv.block_size()? as usize;
        Ok(len.div_ceil(bs).max(1) * bs)
    }

    /// A registered buffer holding `len` bytes in whole blocks.
    fn staging(&self, len: usize) -> Result<IoBuffer, VfsError> {
        let size = self.round_up(len)?;
        let memory = self.kv.memory()?;
        Ok(memory
            .allocate_io_buffer(size, DEFAULT_ALIGNMENT, -1)
            .map_err(KvError::from)?)
    }
}
