//! Closed-loop IO workload generator with latency histograms.
//!
//! Every client draws its operations from `ChaCha8Rng::seed_from_u64(seed +
//! client)`, so the operation sequence depends only on the seed and the
//! device size, never on completion timing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockdev::{backoff, BlockDevice, Completion, DeviceError, IoDescriptor, IoStatus, SubmitError};
use crate::memory::{IoBuffer, DEFAULT_ALIGNMENT};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    RandRead,
    RandWrite,
    SeqRead,
    SeqWrite,
    Mixed70R,
}

impl Workload {
    pub const ALL: [Workload; 5] = [
        Workload::RandRead,
        Workload::RandWrite,
        Workload::SeqRead,
        Workload::SeqWrite,
        Workload::Mixed70R,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Workload::RandRead => "randread",
            Workload::RandWrite => "randwrite",
            Workload::SeqRead => "seqread",
            Workload::SeqWrite => "seqwrite",
            Workload::Mixed70R => "mixed70r",
        }
    }

    fn sequential(&self) -> bool {
        matches!(self, Workload::SeqRead | Workload::SeqWrite)
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown workload `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub workload: Workload,
    pub qd: usize,
    pub io_size: usize,
    pub duration: Duration,
    /// Stop after this many operations per client, whichever comes first.
    pub ops: Option<u64>,
    pub seed: u64,
    pub clients: usize,
    /// Keep every operation in the outcome's op log.
    pub record_ops: bool,
    /// Keep every latency sample (nanoseconds).
    pub keep_samples: bool,
}

impl BenchConfig {
    pub fn new(workload: Workload) -> BenchConfig {
        BenchConfig {
            workload,
            qd: 1,
            io_size: 4096,
            duration: Duration::from_secs(10),
            ops: None,
            seed: 42,
            clients: 1,
            record_ops: false,
            keep_samples: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpRecord {
    pub client: usize,
    pub write: bool,
    pub lba: u64,
    pub blocks: u32,
}

/// Log-linear latency histogram in nanoseconds: values below 64 ns are
/// exact, above that each power of two is split into 32 linear buckets
/// (relative error under 3.2%).
#[derive(Debug, Clone)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
    sum: u128,
    min: u64,
    max: u64,
}

const SUB_BITS: u32 = 5;
const SUB: u64 = 1 << SUB_BITS;
const LINEAR: u64 = 2 * SUB;
const MAX_EXP: u32 = 40;

impl Default for Histogram {
    fn default() -> Self {
        Histogram::new()
    }
}

impl Histogram {
    pub fn new() -> Histogram {
        let buckets = LINEAR + (MAX_EXP as u64 - SUB_BITS as u64) * SUB;
        Histogram {
            counts: vec![0; buckets as usize],
            total: 0,
            sum: 0,
            min: u64::MAX,
            max: 0,
        }
    }

    fn index(v: u64) -> usize {
        if v < LINEAR {
            return v as usize;
        }
        let exp = 63 - v.leading_zeros();
        let exp = exp.min(MAX_EXP);
        let sub = (v >> (exp - SUB_BITS)) & (SUB - 1);
        let idx = LINEAR + (exp as u64 - SUB_BITS as u64 - 1) * SUB + sub;
        (idx as usize).min((LINEAR + (MAX_EXP as u64 - SUB_BITS as u64) * SUB - 1) as usize)
    }

    /// Lowest value mapping to bucket `i`.
    fn lower(i: usize) -> u64 {
        let i = i as u64;
        if i < LINEAR {
            return i;
        }
        let exp = (i - LINEAR) / SUB + SUB_BITS as u64 + 1;
        let sub = (i - LINEAR) % SUB;
        (1 << exp) + (sub << (exp - SUB_BITS as u64))
    }

    pub fn record(&mut self, ns: u64) {
        self.counts[Self::index(ns)] += 1;
        self.total += 1;
        self.sum += ns as u128;
        self.min = self.min.min(ns);
        self.max = self.max.max(ns);
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.sum += other.sum;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum as f64 / self.total as f64
        }
    }

    /// Value at quantile `q`: the lower edge of the bucket holding the
    /// `ceil(q * n)`-th sample, clamped to the observed range.
    pub fn quantile(&self, q: f64) -> u64 {
        if self.total == 0 {
            return 0;
        }
        let rank = ((q * self.total as f64).ceil() as u64).clamp(1, self.total);
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Self::lower(i).clamp(self.min, self.max);
            }
        }
        self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyUs {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub workload: Workload,
    pub qd: usize,
    pub io_size: usize,
    pub clients: usize,
    pub seed: u64,
    pub total_ops: u64,
    pub iops: f64,
    pub latency_us: LatencyUs,
    /// Operations that ended in an error status.
    pub errors: u64,
    /// Error counts by status name, e.g. `E_IO`.
    pub error_counts: BTreeMap<String, u64>,
    pub duration_s: f64,
}

pub struct Outcome {
    pub report: Report,
    pub histogram: Histogram,
    pub ops: Vec<OpRecord>,
    pub samples_ns: Vec<u64>,
}

struct ClientResult {
    histogram: Histogram,
    errors: BTreeMap<String, u64>,
    ops: Vec<OpRecord>,
    samples: Vec<u64>,
}

struct Generator {
    rng: ChaCha8Rng,
    workload: Workload,
    blocks: u32,
    limit: u64,
    cursor: u64,
}

impl Generator {
    fn next(&mut self, client: usize) -> OpRecord {
        let write = match self.workload {
            Workload::RandRead | Workload::SeqRead => false,
            Workload::RandWrite | Workload::SeqWrite => true,
            Workload::Mixed70R => !self.rng.gen_bool(0.7),
        };
        let lba = if self.workload.sequential() {
            if self.cursor > self.limit {
                self.cursor = 0;
            }
            let lba = self.cursor;
            self.cursor += self.blocks as u64;
            lba
        } else {
            self.rng.gen_range(0..=self.limit)
        };
        OpRecord {
            client,
            write,
            lba,
            blocks: self.blocks,
        }
    }
}

/// Run `config` against `device`. `mode` only labels the report.
pub fn run(device: Arc<dyn BlockDevice>, mode: &str, config: &BenchConfig) -> Result<Outcome, BenchError> {
    let info = device.info()?;
    let bs = info.block_size as usize;
    if config.io_size == 0 || config.io_size % bs != 0 {
        return Err(BenchError::Config(format!(
            "io size {} is not a multiple of the {bs}-byte block size",
            config.io_size
        )));
    }
    if config.qd == 0 || config.clients == 0 {
        return Err(BenchError::Config("qd and clients must be at least 1".into()));
    }
    let blocks = (config.io_size / bs) as u64;
    if blocks > info.block_count || blocks > u32::MAX as u64 {
        return Err(BenchError::Config(format!(
            "io size {} exceeds the device ({} blocks)",
            config.io_size, info.block_count
        )));
    }
    let limit = info.block_count - blocks;
    let start = Instant::now();
    let results: Vec<Result<ClientResult, BenchError>> = if config.clients == 1 {
        vec![client(device.as_ref(), 0, blocks as u32, limit, config)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..config.clients)
                .map(|c| {
                    let device = device.clone();
                    s.spawn(move || client(device.as_ref(), c, blocks as u32, limit, config))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench client panicked")).collect()
        })
    };
    let elapsed = start.elapsed().as_secs_f64();
    let mut histogram = Histogram::new();
    let mut error_counts = BTreeMap::new();
    let mut ops = Vec::new();
    let mut samples_ns = Vec::new();
    for r in results {
        let r = r?;
        histogram.merge(&r.histogram);
        for (k, v) in r.errors {
            *error_counts.entry(k).or_insert(0) += v;
        }
        ops.extend(r.ops);
        samples_ns.extend(r.samples);
    }
    let us = |ns: u64| ns as f64 / 1000.0;
    let total_ops = histogram.count();
    let report = Report {
        mode: mode.to_string(),
        workload: config.workload,
        qd: config.qd,
        io_size: config.io_size,
        clients: config.clients,
        seed: config.seed,
        total_ops,
        iops: if elapsed > 0.0 { total_ops as f64 / elapsed } else { 0.0 },
        latency_us: LatencyUs {
            p50: us(histogram.quantile(0.50)),
            p90: us(histogram.quantile(0.90)),
            p99: us(histogram.quantile(0.99)),
            mean: histogram.mean() / 1000.0,
            max: us(histogram.max()),
        },
        errors: error_counts.values().sum(),
        error_counts,
        duration_s: elapsed,
    };
    Ok(Outcome {
        report,
        histogram,
        ops,
        samples_ns,
    })
}

fn status_name(status: IoStatus) -> String {
    match status {
        IoStatus::Bounds => "E_BOUNDS".into(),
        IoStatus::Access => "E_ACCESS".into(),
        IoStatus::Io => "E_IO".into(),
        other => format!("{other:?}"),
    }
}

fn client(
    device: &dyn BlockDevice,
    id: usize,
    blocks: u32,
    limit: u64,
    config: &BenchConfig,
) -> Result<ClientResult, BenchError> {
    let queue = device.open_queue()?;
    let memory = device.memory();
    let buffers: Vec<IoBuffer> = (0..config.qd)
        .map(|_| memory.allocate_io_buffer(config.io_size, DEFAULT_ALIGNMENT, -1))
        .collect::<Result<_, _>>()
        .map_err(|e| BenchError::Device(DeviceError::Io(e.to_string())))?;
    for (i, b) in buffers.iter().enumerate() {
        b.fill(i as u8);
    }
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(id as u64)),
        workload: config.workload,
        blocks,
        limit,
        cursor: 0,
    };
    let mut result = ClientResult {
        histogram: Histogram::new(),
        errors: BTreeMap::new(),
        ops: Vec::new(),
        samples: Vec::new(),
    };
    // slot i holds the start time of the op using buffers[i]; tags are slots
    let mut started: Vec<Option<Instant>> = vec![None; config.qd];
    let mut free: Vec<usize> = (0..config.qd).rev().collect();
    let mut pending: Option<(usize, IoDescriptor)> = None;
    let mut out: Vec<Completion> = Vec::with_capacity(config.qd);
    let limit_ops = config.ops.unwrap_or(u64::MAX);
    let deadline = Instant::now() + config.duration;
    let mut issued = 0u64;
    let mut spins = 0u32;
    let mut check = 0u32;
    let mut stopping = false;
    loop {
        if !stopping {
            check = check.wrapping_add(1);
            if issued >= limit_ops || (check % 64 == 0 && Instant::now() >= deadline) {
                stopping = true;
            }
        }
        let mut progressed = false;
        while !stopping || pending.is_some() {
            let (slot, desc) = match pending.take() {
                Some(p) => p,
                None => {
                    let Some(slot) = free.pop() else { break };
                    let op = gen.next(id);
                    if config.record_ops {
                        result.ops.push(op);
                    }
                    issued += 1;
                    let buf = &buffers[slot];
                    let desc = if op.write {
                        IoDescriptor::write(op.lba, op.blocks, buf, 0, slot as u64)
                    } else {
                        IoDescriptor::read(op.lba, op.blocks, buf, 0, slot as u64)
                    };
                    (slot, desc)
                }
            };
            let t = Instant::now();
            match queue.submit(&desc) {
                Ok(()) => {
                    started[slot] = Some(t);
                    progressed = true;
                    if issued >= limit_ops {
                        stopping = true;
                    }
                }
                Err(SubmitError::QueueFull) => {
                    pending = Some((slot, desc));
                    break;
                }
                Err(SubmitError::Rejected(status)) => {
                    *result.errors.entry(status_name(status)).or_insert(0) += 1;
                    free.push(slot);
                }
                Err(SubmitError::NotOpen) => return Err(DeviceError::NotOpen.into()),
            }
        }
        out.clear();
        if queue.poll(config.qd, &mut out) > 0 {
            let now = Instant::now();
            progressed = true;
            for c in &out {
                let slot = c.tag as usize;
                let t = started[slot].take().expect("completion for an idle slot");
                let ns = now.duration_since(t).as_nanos() as u64;
                result.histogram.record(ns);
                if config.keep_samples {
                    result.samples.push(ns);
                }
                if c.status != IoStatus::Ok {
                    *result.errors.entry(status_name(c.status)).or_insert(0) += 1;
                }
                free.push(slot);
            }
        }
        if stopping && free.len() == config.qd && pending.is_none() {
            break;
        }
        if progressed {
            spins = 0;
        } else {
            backoff(&mut spins);
        }
    }
    Ok(result)
}
