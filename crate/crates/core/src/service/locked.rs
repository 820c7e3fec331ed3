use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::blockdev::{backoff, Completion, DeviceInfo, IoDescriptor, IoQueue, SubmitError};
use crate::memory::ZerocopyMemory;

/// The one stack queue every client of a LOCKED service shares.
pub struct LockedStack {
    queue: Mutex<Arc<dyn IoQueue>>,
    info: DeviceInfo,
    memory: Arc<dyn ZerocopyMemory>,
}

impl LockedStack {
    pub fn new(queue: Arc<dyn IoQueue>) -> LockedStack {
        LockedStack {
            info: queue.info(),
            memory: queue.memory(),
            queue: Mutex::new(queue),
        }
    }
}

/// Arrangement (b): each submission runs to completion while holding the
/// stack lock; the client collects the completion from its own list.
pub struct LockedQueue {
    stack: Arc<LockedStack>,
    done: Mutex<VecDeque<Completion>>,
    depth: usize,
}

impl LockedQueue {
    pub fn new(stack: Arc<LockedStack>, depth: usize) -> LockedQueue {
        LockedQueue {
            stack,
            done: Mutex::new(VecDeque::new()),
            depth,
        }
    }
}

impl IoQueue for LockedQueue {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        if self.done.lock().len() >= self.depth {
            return Err(SubmitError::QueueFull);
        }
        let completion = {
            let queue = self.stack.queue.lock();
            queue.submit(desc)?;
            let mut out = Vec::with_capacity(1);
            let mut spins = 0;
            while queue.poll(1, &mut out) == 0 {
                backoff(&mut spins);
            }
            out[0]
        };
        self.done.lock().push_back(completion);
        Ok(())
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        let mut done = self.done.lock();
        let n = done.len().min(max);
        out.extend(done.drain(..n));
        n
    }

    fn info(&self) -> DeviceInfo {
        self.stack.info.clone()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.stack.memory.clone()
    }

    fn outstanding(&self) -> usize {
        self.done.lock().len()
    }
}
