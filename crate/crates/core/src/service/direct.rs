#[cfg(debug_assertions)]
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::blockdev::{Completion, DeviceInfo, IoDescriptor, IoQueue, SubmitError};
use crate::memory::ZerocopyMemory;

/// Arrangement (a): the client calls straight into the stack. Debug builds
/// check that only one thread ever uses the queue.
pub struct DirectQueue {
    inner: Arc<dyn IoQueue>,
    #[cfg(debug_assertions)]
    owner: AtomicU64,
}

impl DirectQueue {
    pub fn new(inner: Arc<dyn IoQueue>) -> DirectQueue {
        DirectQueue {
            inner,
            #[cfg(debug_assertions)]
            owner: AtomicU64::new(0),
        }
    }

    #[cfg(debug_assertions)]
    fn check_owner(&self) {
        let me = thread_serial();
        if let Err(o) = self.owner.compare_exchange(0, me, Ordering::Relaxed, Ordering::Relaxed) {
            assert_eq!(o, me, "DIRECT service queue used from a second thread");
        }
    }

    #[cfg(not(debug_assertions))]
    fn check_owner(&self) {}
}

// nonzero per-thread number; cheaper than thread::current() on the hot path
#[cfg(debug_assertions)]
fn thread_serial() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    thread_local!(static SERIAL: u64 = NEXT.fetch_add(1, Ordering::Relaxed));
    SERIAL.with(|s| *s)
}

impl IoQueue for DirectQueue {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        self.check_owner();
        self.inner.submit(desc)
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        self.check_owner();
        self.inner.poll(max, out)
    }

    fn info(&self) -> DeviceInfo {
        self.inner.info()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.inner.memory()
    }

    fn outstanding(&self) -> usize {
        self.inner.outstanding()
    }
}
