use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::worker::Task;
use crate::blockdev::{Completion, DeviceInfo, IoDescriptor, IoQueue, IoStatus, SubmitError, DEFAULT_QUEUE_DEPTH};
use crate::memory::{InflightGuard, ZerocopyMemory};
use crate::ring::{self, Consumer, Producer};

type Submission = (IoDescriptor, Option<InflightGuard>);

/// Client end of arrangement (c): descriptors travel over an SPSC ring to a
/// service thread, completions come back over a second ring.
pub struct QueuedQueue {
    sub: Mutex<Producer<Submission>>,
    comp: Mutex<Consumer<Completion>>,
    outstanding: AtomicUsize,
    depth: usize,
    info: DeviceInfo,
    memory: Arc<dyn ZerocopyMemory>,
    closed: Arc<AtomicBool>,
}

/// Service-thread end: forwards to a stack queue owned by this task alone.
pub struct QueuedTask {
    sub: Consumer<Submission>,
    comp: Producer<Completion>,
    child: Arc<dyn IoQueue>,
    backlog: VecDeque<Submission>,
    done: VecDeque<Completion>,
    scratch: Vec<Completion>,
    closed: Arc<AtomicBool>,
}

/// A connected client/task pair over `child`.
pub fn queued_pair(child: Arc<dyn IoQueue>, order: u32) -> (QueuedQueue, QueuedTask) {
    let (sub_tx, sub_rx) = ring::channel::<Submission>(order);
    let (comp_tx, comp_rx) = ring::channel::<Completion>(order);
    let closed = Arc::new(AtomicBool::new(false));
    let client = QueuedQueue {
        sub: Mutex::new(sub_tx),
        comp: Mutex::new(comp_rx),
        outstanding: AtomicUsize::new(0),
        depth: 1 << order,
        info: child.info(),
        memory: child.memory(),
        closed: closed.clone(),
    };
    let task = QueuedTask {
        sub: sub_rx,
        comp: comp_tx,
        child,
        backlog: VecDeque::new(),
        done: VecDeque::new(),
        scratch: Vec::with_capacity(DEFAULT_QUEUE_DEPTH),
        closed,
    };
    (client, task)
}

impl IoQueue for QueuedQueue {
    fn submit(&self, desc: &IoDescriptor) -> Result<(), SubmitError> {
        desc.validate(&self.info, self.memory.as_ref())
            .map_err(SubmitError::Rejected)?;
        // bounding outstanding work keeps the completion ring from overflowing
        if self.outstanding.load(Ordering::Acquire) >= self.depth {
            return Err(SubmitError::QueueFull);
        }
        let guard = desc.buffer.as_ref().map(|b| b.inflight_guard());
        self.sub
            .lock()
            .push((desc.clone(), guard))
            .map_err(|_| SubmitError::QueueFull)?;
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        let mut comp = self.comp.lock();
        let mut n = 0;
        while n < max {
            match comp.pop() {
                Some(c) => {
                    out.push(c);
                    n += 1;
                }
                None => break,
            }
        }
        self.outstanding.fetch_sub(n, Ordering::AcqRel);
        n
    }

    fn info(&self) -> DeviceInfo {
        self.info.clone()
    }

    fn memory(&self) -> Arc<dyn ZerocopyMemory> {
        self.memory.clone()
    }

    fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }
}

impl Drop for QueuedQueue {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::Release);
    }
}

impl QueuedTask {
    fn forward(&mut self, item: Submission) -> Result<(), Submission> {
        match self.child.submit(&item.0) {
            Ok(()) => Ok(()),
            Err(SubmitError::QueueFull) => Err(item),
            Err(SubmitError::Rejected(status)) => {
                self.done.push_back(Completion { tag: item.0.tag, status });
                Ok(())
            }
            Err(SubmitError::NotOpen) => {
                self.done.push_back(Completion {
                    tag: item.0.tag,
                    status: IoStatus::Io,
                });
                Ok(())
            }
        }
    }
}

impl Task for QueuedTask {
    fn step(&mut self) -> bool {
        let mut progressed = false;
        while let Some(item) = self.backlog.pop_front() {
            if let Err(item) = self.forward(item) {
                self.backlog.push_front(item);
                break;
            }
            progressed = true;
        }
        if self.backlog.is_empty() {
            while let Some(item) = self.sub.pop() {
                progressed = true;
                if let Err(item) = self.forward(item) {
                    self.backlog.push_back(item);
                    break;
                }
            }
        }
        self.scratch.clear();
        if self.child.poll(DEFAULT_QUEUE_DEPTH, &mut self.scratch) > 0 {
            progressed = true;
            self.done.extend(self.scratch.drain(..));
        }
        while let Some(c) = self.done.pop_front() {
            if let Err(c) = self.comp.push(c) {
                self.done.push_front(c);
                break;
            }
            progressed = true;
        }
        progressed
    }

    fn finished(&self) -> bool {
        self.closed.load(Ordering::Acquire)
            && self.backlog.is_empty()
            && self.done.is_empty()
            && self.child.outstanding() == 0
            && self.sub.ring().is_empty()
    }
}
