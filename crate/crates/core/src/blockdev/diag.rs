use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;

use super::IoOp;

/// Operation counters of one device, across all of its queues.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub reads: u64,
    pub writes: u64,
    pub flushes: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
    /// Descriptors rejected at submission (bounds or access).
    pub rejected: u64,
    /// Descriptors completed with `E_IO`.
    pub errors: u64,
}

/// What the backend touched for one executed descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRecord {
    pub op: IoOp,
    pub lba: u64,
    pub block_count: u32,
    pub buffer_handle: u64,
    /// Address the backend transferred to or from.
    pub base: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Reads touching this block complete with `E_IO`.
    ReadError { lba: u64 },
    /// Writes touching this block complete with `E_IO`.
    WriteError { lba: u64 },
    /// After this many further writes, writes report success but are
    /// dropped (a power cut between submission and media).
    DropWritesAfter { writes: u64 },
}

/// Test and audit hooks exposed by leaf devices.
pub trait DeviceDiagnostics: Send + Sync {
    fn stats(&self) -> DeviceStats;
    fn reset_stats(&self);

    /// Start or stop recording [`AuditRecord`]s.
    fn set_audit(&self, enabled: bool);
    fn take_audit(&self) -> Vec<AuditRecord>;

    fn inject_fault(&self, fault: Fault);
    fn clear_faults(&self);
}

#[derive(Default)]
pub(crate) struct Diagnostics {
    reads: AtomicU64,
    writes: AtomicU64,
    flushes: AtomicU64,
    blocks_read: AtomicU64,
    blocks_written: AtomicU64,
    rejected: AtomicU64,
    errors: AtomicU64,
    audit_on: AtomicBool,
    audit: Mutex<Vec<AuditRecord>>,
    faults_on: AtomicBool,
    faults: Mutex<FaultState>,
}

#[derive(Default)]
struct FaultState {
    read_errors: HashSet<u64>,
    write_errors: HashSet<u64>,
    drop_after: Option<u64>,
}

pub(crate) enum WriteFate {
    Apply,
    Fail,
    Drop,
}

impl Diagnostics {
    pub fn count(&self, op: IoOp, blocks: u32) {
        match op {
            IoOp::Read => {
                self.reads.fetch_add(1, Ordering::Relaxed);
                self.blocks_read.fetch_add(blocks as u64, Ordering::Relaxed);
            }
            IoOp::Write => {
                self.writes.fetch_add(1, Ordering::Relaxed);
                self.blocks_written.fetch_add(blocks as u64, Ordering::Relaxed);
            }
            IoOp::Flush => {
                self.flushes.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn count_rejected(&self) {
        self.rejected.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count_error(&self) {
        self.errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn audit_enabled(&self) -> bool {
        self.audit_on.load(Ordering::Relaxed)
    }

    pub fn record(&self, record: AuditRecord) {
        self.audit.lock().push(record);
    }

    pub fn read_fails(&self, lba: u64, count: u32) -> bool {
        if !self.faults_on.load(Ordering::Acquire) {
            return false;
        }
        let faults = self.faults.lock();
        (lba..lba + count as u64).any(|b| faults.read_errors.contains(&b))
    }

    pub fn write_fate(&self, lba: u64, count: u32) -> WriteFate {
        if !self.faults_on.load(Ordering::Acquire) {
            return WriteFate::Apply;
        }
        let mut faults = self.faults.lock();
        if (lba..lba + count as u64).any(|b| faults.write_errors.contains(&b)) {
            return WriteFate::Fail;
        }
        match &mut faults.drop_after {
            Some(0) => WriteFate::Drop,
            Some(n) => {
                *n -= 1;
                WriteFate::Apply
            }
            None => WriteFate::Apply,
        }
    }
}

impl DeviceDiagnostics for Diagnostics {
    fn stats(&self) -> DeviceStats {
        DeviceStats {
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            flushes: self.flushes.load(Ordering::Relaxed),
            blocks_read: self.blocks_read.load(Ordering::Relaxed),
            blocks_written: self.blocks_written.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
        }
    }

    fn reset_stats(&self) {
        for c in [
            &self.reads,
            &self.writes,
            &self.flushes,
            &self.blocks_read,
            &self.blocks_written,
            &self.rejected,
            &self.errors,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn set_audit(&self, enabled: bool) {
        self.audit_on.store(enabled, Ordering::Relaxed);
    }

    fn take_audit(&self) -> Vec<AuditRecord> {
        std::mem::take(&mut *self.audit.lock())
    }

    fn inject_fault(&self, fault: Fault) {
        let mut faults = self.faults.lock();
        match fault {
            Fault::ReadError { lba } => {
                faults.read_errors.insert(lba);
            }
            Fault::WriteError { lba } => {
                faults.write_errors.insert(lba);
            }
            Fault::DropWritesAfter { writes } => faults.drop_after = Some(writes),
        }
        self.faults_on.store(true, Ordering::Release);
    }

    fn clear_faults(&self) {
        *self.faults.lock() = FaultState::default();
        self.faults_on.store(false, Ordering::Release);
    }
}
