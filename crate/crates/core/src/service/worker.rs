use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::ServiceError;

/// Idle iterations a service thread spins before it starts yielding.
pub const IDLE_SPINS: u32 = 1024;
/// After this many idle iterations a thread also sleeps briefly, so an
/// idle service does not hold a CPU indefinitely.
const IDLE_SLEEP_AFTER: u32 = 1 << 16;

/// A unit of work a service thread drives by repeated polling.
pub trait Task: Send {
    /// Do whatever is ready; true if anything moved.
    fn step(&mut self) -> bool;

    /// The task can be dropped: its client is gone and nothing is in flight.
    fn finished(&self) -> bool;
}

/// Spin, then yield, then nap.
pub struct Idle {
    idle: u32,
}

impl Default for Idle {
    fn default() -> Self {
        Idle::new()
    }
}

impl Idle {
    pub fn new() -> Idle {
        Idle { idle: 0 }
    }

    pub fn reset(&mut self) {
        self.idle = 0;
    }

    pub fn wait(&mut self) {
        self.idle = self.idle.saturating_add(1);
        if self.idle <= IDLE_SPINS {
            std::hint::spin_loop();
        } else if self.idle <= IDLE_SLEEP_AFTER {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
        }
    }
}

struct Worker {
    inbox: Mutex<Vec<Box<dyn Task>>>,
    has_mail: AtomicBool,
}

fn run_worker(worker: Arc<Worker>, stop: Arc<AtomicBool>, live_tasks: Arc<AtomicUsize>) {
    let mut tasks: Vec<Box<dyn Task>> = Vec::new();
    let mut idle = Idle::new();
    loop {
        if worker.has_mail.swap(false, Ordering::AcqRel) {
            tasks.append(&mut worker.inbox.lock());
            idle.reset();
        }
        let mut progressed = false;
        for task in tasks.iter_mut() {
            progressed |= task.step();
        }
        let before = tasks.len();
        tasks.retain(|t| !t.finished());
        live_tasks.fetch_sub(before - tasks.len(), Ordering::AcqRel);
        if stop.load(Ordering::Acquire) {
            break;
        }
        if progressed {
            idle.reset();
        } else {
            idle.wait();
        }
    }
    live_tasks.fetch_sub(tasks.len(), Ordering::AcqRel);
}

/// Service threads. Shared: a fixed set of workers, tasks assigned round
/// robin. Dedicated: one thread per task, exiting when its task finishes.
pub struct WorkerPool {
    shared: Vec<Arc<Worker>>,
    next: AtomicUsize,
    threads: Mutex<Vec<JoinHandle<()>>>,
    stop: Arc<AtomicBool>,
    live_tasks: Arc<AtomicUsize>,
    name: String,
}

impl WorkerPool {
    pub fn shared(name: &str, threads: usize) -> Result<WorkerPool, ServiceError> {
        let mut pool = WorkerPool::empty(name);
        for i in 0..threads.max(1) {
            let worker = Arc::new(Worker {
                inbox: Mutex::new(Vec::new()),
                has_mail: AtomicBool::new(false),
            });
            let (w, stop, live) = (worker.clone(), pool.stop.clone(), pool.live_tasks.clone());
            let handle = std::thread::Builder::new()
                .name(format!("{name}-{i}"))
                .spawn(move || run_worker(w, stop, live))
                .map_err(|e| ServiceError::SpawnFailure(e.to_string()))?;
            pool.threads.get_mut().push(handle);
            pool.shared.push(worker);
        }
        Ok(pool)
    }

    pub fn dedicated(name: &str) -> WorkerPool {
        WorkerPool::empty(name)
    }

    fn empty(name: &str) -> WorkerPool {
        WorkerPool {
            shared: Vec::new(),
            next: AtomicUsize::new(0),
            threads: Mutex::new(Vec::new()),
            stop: Arc::new(AtomicBool::new(false)),
            live_tasks: Arc::new(AtomicUsize::new(0)),
            name: name.to_string(),
        }
    }

    pub fn thread_count(&self) -> usize {
        self.threads.lock().iter().filter(|h| !h.is_finished()).count()
    }

    /// Tasks not yet finished.
    pub fn live_tasks(&self) -> usize {
        self.live_tasks.load(Ordering::Acquire)
    }

    pub fn add(&self, task: Box<dyn Task>) -> Result<(), ServiceError> {
        self.live_tasks.fetch_add(1, Ordering::AcqRel);
        if self.shared.is_empty() {
            let worker = Arc::new(Worker {
                inbox: Mutex::new(vec![task]),
                has_mail: AtomicBool::new(true),
            });
            let (stop, live) = (self.stop.clone(), self.live_tasks.clone());
            let mut threads = self.threads.lock();
            threads.retain(|h| !h.is_finished());
            let handle = std::thread::Builder::new()
                .name(format!("{}-{}", self.name, threads.len()))
                .spawn(move || run_dedicated(worker, stop, live))
                .map_err(|e| {
                    self.live_tasks.fetch_sub(1, Ordering::AcqRel);
                    ServiceError::SpawnFailure(e.to_string())
                })?;
            threads.push(handle);
            return Ok(());
        }
        let i = self.next.fetch_add(1, Ordering::Relaxed) % self.shared.len();
        let worker = &self.shared[i];
        worker.inbox.lock().push(task);
        worker.has_mail.store(true, Ordering::Release);
        Ok(())
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Release);
        let threads = std::mem::take(&mut *self.threads.lock());
        for t in threads {
            let _ = t.join();
        }
    }
}

fn run_dedicated(worker: Arc<Worker>, stop: Arc<AtomicBool>, live_tasks: Arc<AtomicUsize>) {
    let mut task = worker.inbox.lock().pop().expect("dedicated worker has a task");
    let mut idle = Idle::new();
    loop {
        if task.step() {
            idle.reset();
        } else {
            idle.wait();
        }
        if task.finished() || stop.load(Ordering::Acquire) {
            break;
        }
    }
    live_tasks.fetch_sub(1, Ordering::AcqRel);
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}
