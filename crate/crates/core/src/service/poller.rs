use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::worker::{Task, WorkerPool};
use super::ServiceError;
use crate::blockdev::{Completion, IoQueue, DEFAULT_QUEUE_DEPTH};
use crate::ring::{self, Consumer, Producer};

/// Where a poller delivers one queue's completions.
pub struct CompletionSink {
    ring: Mutex<Consumer<Completion>>,
}

impl CompletionSink {
    pub fn poll(&self, max: usize, out: &mut Vec<Completion>) -> usize {
        let mut ring = self.ring.lock();
        let mut n = 0;
        while n < max {
            match ring.pop() {
                Some(c) => {
                    out.push(c);
                    n += 1;
                }
                None => break,
            }
        }
        n
    }
}

struct Polled {
    queue: Arc<dyn IoQueue>,
    sink: Producer<Completion>,
    backlog: VecDeque<Completion>,
}

/// Polls a set of queues round robin from one thread.
struct PollTask {
    queues: Vec<Polled>,
    scratch: Vec<Completion>,
    stop: Arc<AtomicBool>,
}

impl Task for PollTask {
    fn step(&mut self) -> bool {
        let mut progressed = false;
        for q in self.queues.iter_mut() {
            self.scratch.clear();
            if q.backlog.is_empty() && q.queue.poll(DEFAULT_QUEUE_DEPTH, &mut self.scratch) > 0 {
                progressed = true;
                q.backlog.extend(self.scratch.drain(..));
            }
            while let Some(c) = q.backlog.pop_front() {
                if let Err(c) = q.sink.push(c) {
                    q.backlog.push_front(c);
                    break;
                }
            }
        }
        progressed
    }

    fn finished(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }
}

/// Completion polling for several queues, either by one thread for all of
/// them (coalesced) or by a thread per queue (dedicated). Clients keep
/// submitting on the queues directly and collect completions from the
/// sink of the same index.
pub struct Poller {
    pool: WorkerPool,
    stop: Arc<AtomicBool>,
    coalesced: bool,
}

const SINK_ORDER: u32 = 10;

impl Poller {
    pub fn coalesced(queues: Vec<Arc<dyn IoQueue>>) -> Result<(Poller, Vec<CompletionSink>), ServiceError> {
        Self::start(queues, true)
    }

    pub fn dedicated(queues: Vec<Arc<dyn IoQueue>>) -> Result<(Poller, Vec<CompletionSink>), ServiceError> {
        Self::start(queues, false)
    }

    fn start(queues: Vec<Arc<dyn IoQueue>>, coalesced: bool) -> Result<(Poller, Vec<CompletionSink>), ServiceError> {
        let stop = Arc::new(AtomicBool::new(false));
        let mut polled = Vec::new();
        let mut sinks = Vec::new();
        for queue in queues {
            let (tx, rx) = ring::channel(SINK_ORDER);
            polled.push(Polled {
                queue,
                sink: tx,
                backlog: VecDeque::new(),
            });
            sinks.push(CompletionSink { ring: Mutex::new(rx) });
        }
        let pool = WorkerPool::dedicated("comanche-poll");
        let task = |queues| {
            Box::new(PollTask {
                queues,
                scratch: Vec::with_capacity(DEFAULT_QUEUE_DEPTH),
                stop: stop.clone(),
            })
        };
        if coalesced {
            pool.add(task(polled))?;
        } else {
            for p in polled {
                pool.add(task(vec![p]))?;
            }
        }
        Ok((
            Poller {
                pool,
                stop,
                coalesced,
            },
            sinks,
        ))
    }

    pub fn is_coalesced(&self) -> bool {
        self.coalesced
    }

    pub fn thread_count(&self) -> usize {
        self.pool.thread_count()
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        self.pool.shutdown();
    }
}

impl Drop for Poller {
    fn drop(&mut self) {
        self.stop();
    }
}
