use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blockdev::{backoff, Completion, DeviceDiagnostics, IoDescriptor, IoOp, IoStatus, RamBlockDevice, RamConfig, SubmitError};
use crate::composite::{Raid0Config, Raid0Device};
use crate::memory::IoBuffer;
use crate::Registry;

fn ram(blocks: u64) -> Arc<RamBlockDevice> {
    RamBlockDevice::open(RamConfig::new(blocks)).unwrap()
}

fn service(mode: ServiceMode, stack: Arc<dyn BlockDevice>) -> Arc<IoService> {
    IoService::over(stack, ServiceConfig::new(mode)).unwrap()
}

/// Random reads and writes at depth `qd`; returns submitted and completed
/// tags.
fn drive(queue: &dyn IoQueue, ops: u64, qd: usize, seed: u64, tag_base: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info = queue.info();
    let memory = queue.memory();
    let mut free: Vec<IoBuffer> = (0..qd)
        .map(|_| memory.allocate_io_buffer(info.block_size as usize, 4096, -1).unwrap())
        .collect();
    let mut busy: HashMap<u64, IoBuffer> = HashMap::new();
    let (mut submitted, mut completed) = (Vec::new(), Vec::new());
    let mut out = Vec::new();
    let mut next = 0u64;
    let mut spins = 0;
    while completed.len() < ops as usize {
        while next < ops && !free.is_empty() {
            let buf = free.pop().unwrap();
            let tag = tag_base + next;
            let lba = rng.gen_range(0..info.block_count);
            let desc = if rng.gen_bool(0.5) {
                buf.write_at(0, &tag.to_le_bytes());
                IoDescriptor::write(lba, 1, &buf, 0, tag)
            } else {
                IoDescriptor::read(lba, 1, &buf, 0, tag)
            };
            match queue.submit(&desc) {
                Ok(()) => {
                    submitted.push(tag);
                    busy.insert(tag, buf);
                    next += 1;
                }
                Err(SubmitError::QueueFull) => {
                    free.push(buf);
                    break;
                }
                Err(e) => panic!("submit failed: {e}"),
            }
        }
        out.clear();
        if queue.poll(64, &mut out) == 0 {
            backoff(&mut spins);
            continue;
        }
        spins = 0;
        for c in &out {
            assert_eq!(c.status, IoStatus::Ok);
            completed.push(c.tag);
            free.push(busy.remove(&c.tag).expect("completion for an unknown tag"));
        }
    }
    (submitted, completed)
}

fn assert_bijection(mut submitted: Vec<u64>, mut completed: Vec<u64>) {
    submitted.sort_unstable();
    completed.sort_unstable();
    assert_eq!(submitted.len(), completed.len());
    assert_eq!(submitted, completed);
    completed.dedup();
    assert_eq!(completed.len(), submitted.len(), "duplicated completion");
}

#[test]
fn mode_names_parse() {
    for m in ServiceMode::ALL {
        assert_eq!(m.name().parse::<ServiceMode>().unwrap(), m);
        assert_eq!(m.name().to_lowercase().parse::<ServiceMode>().unwrap(), m);
    }
    assert!(matches!("RING".parse::<ServiceMode>(), Err(ServiceError::BadMode(_))));
    let c: ServiceConfig = serde_json::from_str(r#"{"mode":"QUEUED","coalesce":true}"#).unwrap();
    assert_eq!(c.mode, ServiceMode::Queued);
    assert!(serde_json::from_str::<ServiceConfig>(r#"{"mode":"FAST"}"#).is_err());
}

#[test]
fn bad_configs_are_refused() {
    let dev = ram(16);
    let mut c = ServiceConfig::new(ServiceMode::Queued);
    c.service_threads = 0;
    assert!(matches!(IoService::over(dev.clone(), c), Err(ServiceError::BadMode(_))));
    let mut c = ServiceConfig::new(ServiceMode::Shm);
    c.desc_count = 0;
    assert!(IoService::over(dev, c).is_err());
}

#[test]
fn direct_matches_the_stack() {
    let dev = ram(64);
    let svc = service(ServiceMode::Direct, dev.clone());
    let buf = svc.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    buf.fill(0x5a);
    svc.write_sync(9, 1, &buf, 0).unwrap();
    let a = dev.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    let b = dev.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    dev.read_sync(9, 1, &a, 0).unwrap();
    svc.read_sync(9, 1, &b, 0).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
    assert_eq!(svc.read_sync(64, 1, &b, 0), dev.read_sync(64, 1, &a, 0));
    assert_eq!(svc.info().unwrap().block_count, 64);
}

#[cfg(debug_assertions)]
#[test]
fn direct_queue_has_one_owner() {
    let svc = service(ServiceMode::Direct, ram(8));
    let q = svc.open_queue().unwrap();
    let mut out = Vec::new();
    q.poll(1, &mut out);
    let q2 = q.clone();
    let other = thread::spawn(move || {
        let mut out = Vec::new();
        q2.poll(1, &mut out);
    });
    assert!(other.join().is_err(), "second thread must trip the owner check");
}

#[test]
fn every_mode_completes_each_tag_once() {
    for mode in ServiceMode::ALL {
        let svc = service(mode, ram(256));
        let q = svc.open_queue().unwrap();
        let (s, c) = drive(q.as_ref(), 20_000, 16, 7, 0);
        assert_bijection(s, c);
        assert_eq!(q.outstanding(), 0, "{mode}");
    }
}

#[test]
fn queued_many_clients_bijection() {
    let svc = service(ServiceMode::Queued, ram(512));
    let handles: Vec<_> = (0..4u64)
        .map(|client| {
            let q = svc.open_queue().unwrap();
            thread::spawn(move || drive(q.as_ref(), 10_000, 8, client, client << 32))
        })
        .collect();
    let mut all_s = Vec::new();
    let mut all_c = Vec::new();
    for h in handles {
        let (s, c) = h.join().unwrap();
        all_s.extend(s);
        all_c.extend(c);
    }
    assert_eq!(all_c.len(), 40_000);
    assert_bijection(all_s, all_c);
}

#[test]
fn coalesced_service_threads_are_shared() {
    let dev = ram(64);
    let svc = IoService::over(dev.clone(), ServiceConfig::new(ServiceMode::Queued).coalesced(2)).unwrap();
    let queues: Vec<_> = (0..4).map(|_| svc.open_queue().unwrap()).collect();
    assert_eq!(svc.thread_count(), 2);
    for (i, q) in queues.iter().enumerate() {
        let (s, c) = drive(q.as_ref(), 500, 4, i as u64, 0);
        assert_bijection(s, c);
    }
    let dedicated = service(ServiceMode::Queued, dev);
    let _qs: Vec<_> = (0..3).map(|_| dedicated.open_queue().unwrap()).collect();
    assert_eq!(dedicated.thread_count(), 3);
}

#[test]
fn queued_backpressure_is_queue_full() {
    let mut c = ServiceConfig::new(ServiceMode::Queued);
    c.ring_order = 2;
    let svc = IoService::over(ram(16), c).unwrap();
    let q = svc.open_queue().unwrap();
    let buf = q.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    let mut accepted = 0;
    let mut full = false;
    for tag in 0..16 {
        match q.submit(&IoDescriptor::read(0, 1, &buf, 0, tag)) {
            Ok(()) => accepted += 1,
            Err(SubmitError::QueueFull) => {
                full = true;
                break;
            }
            Err(e) => panic!("{e}"),
        }
    }
    assert!(full);
    assert_eq!(accepted, 4);
    let mut out = Vec::new();
    let mut spins = 0;
    while out.len() < 4 {
        if q.poll(8, &mut out) == 0 {
            backoff(&mut spins);
        }
    }
}

#[test]
fn rejected_descriptors_never_complete() {
    for mode in ServiceMode::ALL {
        let svc = service(mode, ram(8));
        let q = svc.open_queue().unwrap();
        let heap = IoBuffer::unregistered(4096);
        assert_eq!(
            q.submit(&IoDescriptor::write(0, 1, &heap, 0, 1)),
            Err(SubmitError::Rejected(IoStatus::Access)),
            "{mode}"
        );
        let buf = q.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
        assert_eq!(
            q.submit(&IoDescriptor::read(8, 1, &buf, 0, 2)),
            Err(SubmitError::Rejected(IoStatus::Bounds)),
            "{mode}"
        );
        assert_eq!(q.outstanding(), 0);
    }
}

#[test]
fn locked_writes_are_atomic() {
    let children: Vec<Arc<dyn BlockDevice>> = vec![ram(64), ram(64)];
    let raid = Raid0Device::over(Raid0Config { stripe_blocks: 1 }, children).unwrap();
    let svc = service(ServiceMode::Locked, raid);
    const BLOCKS: u32 = 8;
    let len = BLOCKS as usize * 4096;
    let stop = Arc::new(AtomicBool::new(false));
    let writers: Vec<_> = [0xaau8, 0x55]
        .into_iter()
        .map(|byte| {
            let q = svc.open_queue().unwrap();
            thread::spawn(move || {
                let buf = q.memory().allocate_io_buffer(len, 4096, -1).unwrap();
                buf.fill(byte);
                for i in 0..2000 {
                    crate::blockdev::run_sync(q.as_ref(), &IoDescriptor::write(3, BLOCKS, &buf, 0, i)).unwrap();
                }
            })
        })
        .collect();
    let reader = {
        let q = svc.open_queue().unwrap();
        let stop = stop.clone();
        thread::spawn(move || {
            let buf = q.memory().allocate_io_buffer(len, 4096, -1).unwrap();
            let mut reads = 0u64;
            while !stop.load(Ordering::Acquire) || reads == 0 {
                crate::blockdev::run_sync(q.as_ref(), &IoDescriptor::read(3, BLOCKS, &buf, 0, reads)).unwrap();
                let v = buf.to_vec();
                assert!(v.iter().all(|&b| b == v[0]), "torn read: payloads interleaved");
                reads += 1;
            }
        })
    };
    for w in writers {
        w.join().unwrap();
    }
    stop.store(true, Ordering::Release);
    reader.join().unwrap();
    let out = svc.memory().allocate_io_buffer(len, 4096, -1).unwrap();
    svc.read_sync(3, BLOCKS, &out, 0).unwrap();
    let v = out.to_vec();
    assert!(v == vec![0xaa; len] || v == vec![0x55; len]);
}

/// Seeded single-client write workload; returns the device image.
fn run_fixed_workload(mode: ServiceMode) -> Vec<u8> {
    let dev = ram(64);
    let svc = service(mode, dev.clone());
    let q = svc.open_queue().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let buf = q.memory().allocate_io_buffer(4 * 4096, 4096, -1).unwrap();
    for i in 0..500u64 {
        let blocks = rng.gen_range(1..=4u32);
        let lba = rng.gen_range(0..=64 - blocks as u64);
        let bytes: Vec<u8> = (0..blocks as usize * 4096).map(|_| rng.gen()).collect();
        buf.write_at(0, &bytes);
        crate::blockdev::run_sync(q.as_ref(), &IoDescriptor::write(lba, blocks, &buf, 0, i)).unwrap();
    }
    crate::blockdev::run_sync(q.as_ref(), &IoDescriptor::flush(0)).unwrap();
    let image = dev.memory().allocate_io_buffer(64 * 4096, 4096, -1).unwrap();
    dev.read_sync(0, 64, &image, 0).unwrap();
    image.to_vec()
}

#[test]
fn modes_produce_identical_contents() {
    let reference = run_fixed_workload(ServiceMode::Direct);
    for mode in [ServiceMode::Locked, ServiceMode::Queued, ServiceMode::Shm] {
        assert!(run_fixed_workload(mode) == reference, "{mode} diverged from DIRECT");
    }
}

#[test]
fn shm_queue_stages_foreign_buffers() {
    let dev = ram(32);
    let seg = shm::create_unique("svc-test-stage", 6, 64, 1 << 20).unwrap();
    let name = seg.name().to_string();
    let server = ShmServer::new(Arc::new(seg), dev.open_queue().unwrap()).unwrap();
    let pool = WorkerPool::dedicated("shm-stage");
    pool.add(Box::new(server)).unwrap();
    let q = ShmQueue::new(ShmClient::attach(&name).unwrap(), dev.info().unwrap(), dev.memory());
    let data = q.client().segment().data_ptr() as usize;

    // registered with the stack but outside the segment: staged
    let foreign = dev.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    foreign.fill(0x21);
    crate::blockdev::run_sync(&q, &IoDescriptor::write(5, 1, &foreign, 0, 1)).unwrap();
    let local = q.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    crate::blockdev::run_sync(&q, &IoDescriptor::read(5, 1, &local, 0, 2)).unwrap();
    assert_eq!(local.to_vec(), vec![0x21; 4096]);

    // from the segment: the server transfers at the same region offset
    dev.set_audit(true);
    crate::blockdev::run_sync(&q, &IoDescriptor::read(5, 1, &local, 0, 3)).unwrap();
    let audit = dev.take_audit();
    assert_eq!(audit.len(), 1);
    assert_eq!(audit[0].offset, local.base() - data);
    assert_eq!(audit[0].len, 4096);
    drop(q);
    pool.shutdown();
}

fn shm_name(tag: &str) -> String {
    format!("svc-test-{tag}-{}", std::process::id())
}

#[test]
fn shm_create_attach_and_errors() {
    let name = shm_name("attach");
    let seg = ShmSegment::create(&name, 8, 256, 1 << 20).unwrap();
    let counts = seg.census().unwrap();
    assert_eq!(counts.free, 256);
    assert_eq!(counts.total(), 256);
    assert!(matches!(ShmSegment::create(&name, 8, 256, 1 << 20), Err(ShmError::Exists(_))));
    let other = ShmSegment::attach(&name).unwrap();
    assert_eq!(seg.header_bytes(), other.header_bytes());
    assert_eq!(&seg.header_bytes()[..4], b"CMNC");
    assert_eq!(seg.layout(), other.layout());
    assert_eq!(seg.attach_count(), 2);
    let path = seg.path().to_path_buf();
    drop(seg);
    assert!(path.exists());
    drop(other);
    assert!(!path.exists(), "last detach removes the segment");
    assert!(matches!(ShmSegment::attach(&name), Err(ShmError::NotFound(_))));

    let bogus = shm_name("bogus");
    std::fs::write(shm::segment_path(&bogus), vec![0x11u8; 8192]).unwrap();
    let r = ShmSegment::attach(&bogus);
    std::fs::remove_file(shm::segment_path(&bogus)).unwrap();
    assert!(matches!(r, Err(ShmError::VersionMismatch(_))));
}

#[test]
fn shm_version_is_checked() {
    let name = shm_name("version");
    let seg = ShmSegment::create(&name, 4, 16, 1 << 16).unwrap();
    let mut bytes = std::fs::read(seg.path()).unwrap();
    bytes[4] = 9;
    let copy = shm_name("version-copy");
    std::fs::write(shm::segment_path(&copy), &bytes).unwrap();
    let r = ShmSegment::attach(&copy);
    std::fs::remove_file(shm::segment_path(&copy)).unwrap();
    assert!(matches!(r, Err(ShmError::VersionMismatch(m)) if m.contains("version")));
}

#[test]
fn shm_descriptor_exhaustion() {
    let seg = Arc::new(ShmSegment::create(&shm_name("exhaust"), 8, 256, 1 << 16).unwrap());
    let client = ShmClient::new(seg.clone());
    let mut held = Vec::new();
    for _ in 0..256 {
        held.push(client.desc_alloc().unwrap());
    }
    assert_eq!(client.desc_alloc(), Err(ShmError::NoFreeDescriptors));
    held.sort_unstable();
    assert_eq!(held, (0..256).collect::<Vec<_>>());
    let c = seg.census().unwrap();
    assert_eq!((c.free, c.client_held, c.total()), (0, 256, 256));
    assert_eq!(client.submit(256), Err(ShmError::InvalidIndex(256)));
}

#[test]
fn shm_round_trip_restores_free_ring() {
    let dev = ram(16);
    let seg = Arc::new(ShmSegment::create(&shm_name("roundtrip"), 8, 256, 1 << 16).unwrap());
    let server = ShmServer::new(seg.clone(), dev.open_queue().unwrap()).unwrap();
    let pool = WorkerPool::dedicated("shm-test");
    pool.add(Box::new(server)).unwrap();
    let client = ShmClient::new(seg.clone());

    client.write_data(0, &[0x77; 4096]);
    let i = client.desc_alloc().unwrap();
    client.write_descriptor(i, &ShmDescriptor::new(IoOp::Write, 3, 1, 0, 41)).unwrap();
    client.submit(i).unwrap();
    let mut reaped = Vec::new();
    while reaped.is_empty() {
        reaped = client.reap(4);
        thread::yield_now();
    }
    assert_eq!(reaped, vec![(41, IoStatus::Ok)]);

    let j = client.desc_alloc().unwrap();
    client.write_descriptor(j, &ShmDescriptor::new(IoOp::Read, 3, 1, 4096, 42)).unwrap();
    client.submit(j).unwrap();
    let mut reaped = Vec::new();
    while reaped.is_empty() {
        reaped = client.reap(4);
        thread::yield_now();
    }
    assert_eq!(reaped, vec![(42, IoStatus::Ok)]);
    let mut out = vec![0u8; 4096];
    client.read_data(4096, &mut out);
    assert_eq!(out, vec![0x77; 4096]);

    // out-of-range data offsets complete with E_BOUNDS
    let k = client.desc_alloc().unwrap();
    client.write_descriptor(k, &ShmDescriptor::new(IoOp::Read, 0, 1, 1 << 16, 43)).unwrap();
    client.submit(k).unwrap();
    let mut reaped = Vec::new();
    while reaped.is_empty() {
        reaped = client.reap(4);
        thread::yield_now();
    }
    assert_eq!(reaped, vec![(43, IoStatus::Bounds)]);

    let mut spins = 0;
    loop {
        let c = seg.census().unwrap();
        assert_eq!(c.total(), 256);
        if c.free == 256 {
            break;
        }
        backoff(&mut spins);
    }
    client.close();
    pool.shutdown();
}

#[test]
fn shm_conservation_under_load() {
    let dev = ram(128);
    let seg = shm::create_unique("svc-test-conserve", 8, 256, 1 << 20).unwrap();
    let name = seg.name().to_string();
    let server = ShmServer::new(Arc::new(seg), dev.open_queue().unwrap()).unwrap();
    let pool = WorkerPool::dedicated("shm-conserve");
    pool.add(Box::new(server)).unwrap();
    let q = ShmQueue::new(ShmClient::attach(&name).unwrap(), dev.info().unwrap(), dev.memory());
    let observer = ShmSegment::attach(&name).unwrap();
    let desc_count = observer.layout().desc_count as u64;
    let done = Arc::new(AtomicBool::new(false));
    let sampler = {
        let done = done.clone();
        thread::spawn(move || {
            let mut samples = 0u64;
            while !done.load(Ordering::Acquire) {
                if let Some(c) = observer.census() {
                    assert_eq!(c.total(), desc_count, "{c:?}");
                    samples += 1;
                }
                thread::yield_now();
            }
            samples
        })
    };
    let (s, c) = drive(&q, 20_000, 32, 3, 0);
    done.store(true, Ordering::Release);
    assert!(sampler.join().unwrap() > 0);
    assert_bijection(s, c);
}

#[test]
fn coalesced_poller_keeps_devices_apart() {
    let devs: Vec<_> = (0..3).map(|_| ram(64)).collect();
    let queues: Vec<Arc<dyn IoQueue>> = devs.iter().map(|d| d.open_queue().unwrap()).collect();
    let (poller, sinks) = Poller::coalesced(queues.clone()).unwrap();
    assert!(poller.is_coalesced());
    assert_eq!(poller.thread_count(), 1);
    let per_device = poll_through(&queues, &sinks, 10_000);
    for (d, (s, c)) in per_device.into_iter().enumerate() {
        assert_eq!(c.len(), 10_000, "device {d}");
        assert_bijection(s, c);
    }
}

#[test]
fn single_device_coalesced_equals_dedicated() {
    let mut results = Vec::new();
    for coalesced in [true, false] {
        let dev = ram(64);
        let queues: Vec<Arc<dyn IoQueue>> = vec![dev.open_queue().unwrap()];
        let (poller, sinks) = if coalesced {
            Poller::coalesced(queues.clone()).unwrap()
        } else {
            Poller::dedicated(queues.clone()).unwrap()
        };
        let mut per = poll_through(&queues, &sinks, 2000);
        let (_, mut c) = per.remove(0);
        c.sort_unstable();
        results.push(c);
        poller.stop();
    }
    assert_eq!(results[0], results[1]);
}

/// Submit `ops` writes per queue; completions arrive through the sinks.
fn poll_through(queues: &[Arc<dyn IoQueue>], sinks: &[CompletionSink], ops: u64) -> Vec<(Vec<u64>, Vec<u64>)> {
    const QD: usize = 8;
    let bufs: Vec<IoBuffer> = queues
        .iter()
        .map(|q| q.memory().allocate_io_buffer(4096, 4096, -1).unwrap())
        .collect();
    let mut state: Vec<(Vec<u64>, Vec<u64>, usize)> = queues.iter().map(|_| (Vec::new(), Vec::new(), 0)).collect();
    let mut out: Vec<Completion> = Vec::new();
    let mut spins = 0;
    while state.iter().any(|s| (s.1.len() as u64) < ops) {
        let mut progressed = false;
        for (d, q) in queues.iter().enumerate() {
            let (submitted, completed, inflight) = &mut state[d];
            while *inflight < QD && (submitted.len() as u64) < ops {
                let tag = ((d as u64) << 40) | submitted.len() as u64;
                let lba = tag % 64;
                match q.submit(&IoDescriptor::write(lba, 1, &bufs[d], 0, tag)) {
                    Ok(()) => {
                        submitted.push(tag);
                        *inflight += 1;
                    }
                    Err(SubmitError::QueueFull) => break,
                    Err(e) => panic!("{e}"),
                }
            }
            out.clear();
            let n = sinks[d].poll(64, &mut out);
            if n > 0 {
                progressed = true;
            }
            for c in &out {
                assert_eq!((c.tag >> 40) as usize, d, "completion delivered to the wrong device");
                completed.push(c.tag);
                *inflight -= 1;
            }
        }
        if progressed {
            spins = 0;
        } else {
            backoff(&mut spins);
        }
    }
    state.into_iter().map(|(s, c, _)| (s, c)).collect()
}

#[test]
fn service_component_lifecycle() {
    let registry = Registry::with_builtins();
    let dev = registry
        .create_by_type("block:ram", &serde_json::json!({"size_blocks": 32}))
        .unwrap();
    dev.start().unwrap();
    let err = registry
        .create_by_type("service", &serde_json::json!({"mode": "BOGUS"}))
        .unwrap_err();
    assert!(err.to_string().contains("BadMode"), "{err}");
    let svc = registry
        .create_by_type("service", &serde_json::json!({"mode": "QUEUED"}))
        .unwrap();
    crate::bind(&svc, &dev).unwrap();
    assert_eq!(dev.refcount(), 2);
    svc.start().unwrap();
    let bd = svc.block_device().unwrap();
    let buf = bd.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    buf.fill(3);
    bd.write_sync(1, 1, &buf, 0).unwrap();
    let mut seen = BTreeMap::new();
    for tag in 0..4u64 {
        bd.async_submit(&IoDescriptor::read(tag, 1, &buf, 0, tag)).unwrap();
    }
    let mut spins = 0;
    while seen.len() < 4 {
        let got = bd.poll_completions(8);
        if got.is_empty() {
            backoff(&mut spins);
        }
        for c in got {
            assert!(seen.insert(c.tag, c.status).is_none());
        }
    }
    drop(bd);
    assert_eq!(svc.release().unwrap(), 0);
    assert_eq!(dev.refcount(), 1);
    assert_eq!(dev.release().unwrap(), 0);
    assert_eq!(registry.live_instances(), 0);
}
