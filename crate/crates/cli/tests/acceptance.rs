//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use comanche_core::bench::{self, BenchConfig, Workload};
use comanche_core::blockdev::{
    backoff, BlockDevice, Completion, DeviceDiagnostics, Fault, FileBlockDevice, FileConfig, IoDescriptor, IoOp,
    IoQueue, IoStatus, RamBlockDevice, RamConfig, SubmitError,
};
use comanche_core::component::{
    ComponentId, InterfaceId, BLOCK_CACHE_ID, IBASE, IBLOCK_DEVICE, IKVSTORE, IZEROCOPY_MEMORY, PARTITION_ID,
    RAID0_ID, RAID1_ID, RAM_BLOCK_DEVICE_ID,
};
use comanche_core::composite::{
    partition_format, raid0_map, PartitionConfig, PartitionDevice, PartitionEntry, Raid0Config, Raid0Device,
    Raid1Config, Raid1Device,
};
use comanche_core::kv::{BitmapAllocator, KvError, KvHandle, KvStore};
use comanche_core::memory::IoBuffer;
use comanche_core::mgmt::{DirEntry, EntryKind, Vfs, VfsPath};
use comanche_core::service::{IoService, ServiceConfig, ServiceMode, ShmClient, ShmDescriptor, ShmLayout, ShmSegment};
use comanche_core::{bind, ComponentRef, Registry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> String;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("threading-model latency ordering", latency_ordering),
        ("throughput sanity", throughput),
        ("completion bijection", completion_bijection),
        ("descriptor conservation (SHM, two processes)", descriptor_conservation),
        ("allocator oracle equivalence", allocator_oracle),
        ("RAID-0 map bijection and RAID-1 mirroring", raid),
        ("KV durability and facade consistency", kv_durability),
        ("IOMMU-emulation soundness", iommu),
        ("zero-copy audit", zero_copy_audit),
        ("component lifecycle", component_lifecycle),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({detail}; {secs:.1}s)"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ram(blocks: u64) -> Arc<RamBlockDevice> {
    RamBlockDevice::open(RamConfig::new(blocks)).unwrap()
}

fn median(samples: &mut [u64]) -> f64 {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2] as f64
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) as f64 / 2.0
    }
}

/// QD1 4 KiB reads on RAM, modes interleaved in rounds so drift hits all
/// of them alike; exact medians from every sample. The device is written
/// end to end first so no mode pays for first-touch page faults.
fn latency_ordering() -> String {
    const ROUNDS: u64 = 5;
    const PER_ROUND: u64 = 20_000;
    let start = Instant::now();
    let dev = ram(1024);
    let fill = dev.memory().allocate_io_buffer(1024 * 4096, 4096, -1).unwrap();
    fill.fill(0x5a);
    dev.write_sync(0, 1024, &fill, 0).unwrap();
    let modes = [ServiceMode::Direct, ServiceMode::Locked, ServiceMode::Queued];
    let mut samples: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for round in 0..ROUNDS {
        for mode in modes {
            let service = IoService::over(dev.clone(), ServiceConfig::new(mode)).unwrap();
            let config = BenchConfig {
                ops: Some(PER_ROUND),
                duration: Duration::from_secs(60),
                keep_samples: true,
                seed: 42 + round,
                ..BenchConfig::new(Workload::RandRead)
            };
            let out = bench::run(service.clone(), mode.name(), &config).unwrap();
            assert_eq!(out.report.errors, 0);
            samples.entry(mode.name()).or_default().extend(out.samples_ns);
            service.shutdown();
        }
    }
    let mut med = BTreeMap::new();
    for (mode, s) in samples.iter_mut() {
        assert!(s.len() as u64 >= 100_000, "{mode}: {} samples", s.len());
        med.insert(*mode, median(s) / 1000.0);
    }
    let (d, l, q) = (med["DIRECT"], med["LOCKED"], med["QUEUED"]);
    let detail = format!("median us DIRECT {d:.3} LOCKED {l:.3} QUEUED {q:.3}");
    assert!(d < l, "DIRECT not below LOCKED: {detail}");
    assert!(l <= q, "LOCKED above QUEUED: {detail}");
    assert!(q - d >= 0.3, "QUEUED - DIRECT under 0.3us: {detail}");
    assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
    detail
}

fn throughput() -> String {
    let config = BenchConfig {
        duration: Duration::from_secs(10),
        ..BenchConfig::new(Workload::RandRead)
    };
    let out = bench::run(ram(262_144), "DIRECT", &config).unwrap();
    let r = out.report;
    assert!(r.duration_s >= 10.0, "ran {}s", r.duration_s);
    assert_eq!(r.errors, 0);
    let l = r.latency_us;
    assert!(l.p50 <= l.p90 && l.p90 <= l.p99 && l.p99 <= l.max, "{l:?}");
    assert!(r.iops >= 100_000.0, "{} IOPS", r.iops);
    format!("{:.0} IOPS over {:.1}s, p50 {}us p99 {}us", r.iops, r.duration_s, l.p50, l.p99)
}

/// Random reads and writes at depth `qd`; returns (submitted, completed)
/// tags.
fn drive(queue: &dyn IoQueue, blocks: u64, ops: u64, qd: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = queue.memory();
    let bufs: Vec<IoBuffer> = (0..qd)
        .map(|_| memory.allocate_io_buffer(4 * 4096, 4096, -1).unwrap())
        .collect();
    let mut free: Vec<usize> = (0..qd).collect();
    let mut slot_of = BTreeMap::new();
    let mut submitted = Vec::with_capacity(ops as usize);
    let mut completed = Vec::with_capacity(ops as usize);
    let mut out: Vec<Completion> = Vec::new();
    let mut spins = 0;
    let mut tag = 0u64;
    while (completed.len() as u64) < ops {
        let mut progressed = false;
        while tag < ops {
            let Some(&slot) = free.last() else { break };
            let n = rng.gen_range(1..=4u32);
            let lba = rng.gen_range(0..=blocks - n as u64);
            let desc = if rng.gen_bool(0.5) {
                IoDescriptor::read(lba, n, &bufs[slot], 0, tag)
            } else {
                IoDescriptor::write(lba, n, &bufs[slot], 0, tag)
            };
            match queue.submit(&desc) {
                Ok(()) => {
                    free.pop();
                    slot_of.insert(tag, slot);
                    submitted.push(tag);
                    tag += 1;
                    progressed = true;
                }
                Err(SubmitError::QueueFull) => break,
                Err(e) => panic!("submit: {e}"),
            }
        }
        out.clear();
        if queue.poll(qd, &mut out) > 0 {
            progressed = true;
            for c in &out {
                assert_eq!(c.status, IoStatus::Ok, "tag {}", c.tag);
                free.push(slot_of.remove(&c.tag).expect("completion for an unknown tag"));
                completed.push(c.tag);
            }
        }
        if progressed {
            spins = 0;
        } else {
            backoff(&mut spins);
        }
    }
    (submitted, completed)
}

fn completion_bijection() -> String {
    const OPS: u64 = 1_000_000;
    let start = Instant::now();
    let mut detail = Vec::new();
    for mode in ServiceMode::ALL {
        let t = Instant::now();
        let service = IoService::over(ram(16_384), ServiceConfig::new(mode)).unwrap();
        let queue = service.open_queue().unwrap();
        let (mut submitted, mut completed) = drive(queue.as_ref(), 16_384, OPS, 32, 9);
        assert_eq!(submitted.len() as u64, OPS);
        submitted.sort_unstable();
        completed.sort_unstable();
        assert!(submitted == completed, "{mode}: completed multiset differs");
        let mut extra = Vec::new();
        assert_eq!(queue.poll(64, &mut extra), 0, "{mode}: duplicate completion");
        drop(queue);
        service.shutdown();
        detail.push(format!("{mode} {:.1}s", t.elapsed().as_secs_f64()));
    }
    assert!(start.elapsed() < Duration::from_secs(300));
    format!("10^6 ops per mode: {}", detail.join(", "))
}

fn decode_header(h: &[u8; 32]) -> ([u8; 4], u32, u32, u32, u64, u64) {
    let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().unwrap());
    (h[..4].try_into().unwrap(), u32_at(4), u32_at(8), u32_at(12), u64_at(16), u64_at(24))
}

/// A `serve` child process owns the segment and the device; this process
/// is the client and, on a second mapping, the observer.
fn descriptor_conservation() -> String {
    const OPS: u64 = 100_000;
    const DESC: u32 = 256;
    const DATA: usize = 1 << 20;
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("COMANCHE_SHM_DIR", dir.path());
    let config = dir.path().join("stack.json");
    std::fs::write(
        &config,
        r#"{"components": [{"id": "d", "type": "block:ram", "config": {"size_blocks": 4096}}]}"#,
    )
    .unwrap();
    let name = format!("soak-{}", std::process::id());
    let mut child = Command::new(env!("CARGO_BIN_EXE_comanche"))
        .args(["serve", "--config"])
        .arg(&config)
        .args(["--name", &name, "--ring-order", "8", "--desc-count", "256", "--data-size"])
        .arg(DATA.to_string())
        .args(["--timeout", "120"])
        .env("COMANCHE_SHM_DIR", dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let ready = lines.next().unwrap().unwrap();
    assert!(ready.starts_with("ready "), "{ready}");

    let client = ShmClient::attach(&name).unwrap();
    let seg = client.segment().clone();
    // header written by the other process, checked field by field
    let expected = ShmLayout::new(8, DESC, DATA).unwrap();
    assert_eq!(seg.layout(), expected);
    let header = seg.header_bytes();
    assert_eq!(
        decode_header(&header),
        (*b"CMNC", 1, 8, DESC, expected.data_offset as u64, expected.data_size as u64)
    );
    let second = ShmSegment::attach(&name).unwrap();
    assert_eq!(second.header_bytes(), header);

    let stop = Arc::new(AtomicBool::new(false));
    let samples = Arc::new(AtomicU64::new(0));
    let observer = {
        let (stop, samples) = (stop.clone(), samples.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::Acquire) {
                if let Some(c) = second.census() {
                    assert_eq!(c.total(), DESC as u64, "observer census {c:?}");
                    samples.fetch_add(1, Ordering::Relaxed);
                }
                std::thread::sleep(Duration::from_micros(200));
            }
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut submitted = Vec::with_capacity(OPS as usize);
    let mut completed = Vec::with_capacity(OPS as usize);
    let mut own_samples = 0u64;
    let mut tag = 0u64;
    let mut spins = 0;
    let mut iteration = 0u64;
    let block = [0u8; 4096];
    while (completed.len() as u64) < OPS {
        iteration += 1;
        let mut progressed = false;
        while tag < OPS {
            let Ok(index) = client.desc_alloc() else { break };
            let write = rng.gen_bool(0.5);
            let offset = index as u64 * 4096;
            if write {
                let mut b = block;
                b[..8].copy_from_slice(&tag.to_le_bytes());
                client.write_data(offset as usize, &b);
            }
            let op = if write { IoOp::Write } else { IoOp::Read };
            let desc = ShmDescriptor::new(op, rng.gen_range(0..4096), 1, offset, tag);
            client.write_descriptor(index, &desc).unwrap();
            client.submit(index).unwrap();
            submitted.push(tag);
            tag += 1;
            progressed = true;
        }
        for (t, status) in client.reap(64) {
            assert_eq!(status, IoStatus::Ok, "tag {t}");
            completed.push(t);
            progressed = true;
        }
        if iteration % 16 == 0 {
            // every allocated index has been submitted, so the client holds none
            let c = seg.census().expect("census");
            assert_eq!(c.client_held, 0);
            assert_eq!(c.free + c.submitted + c.in_service, DESC as u64, "{c:?}");
            own_samples += 1;
        }
        if progressed {
            spins = 0;
        } else {
            backoff(&mut spins);
        }
    }
    // data makes the round trip through the other process
    let pattern: Vec<u8> = (0..4096).map(|i| (i * 7) as u8).collect();
    for (op, offset) in [(IoOp::Write, 0u64), (IoOp::Read, 4096)] {
        if op == IoOp::Write {
            client.write_data(0, &pattern);
        }
        let index = client.desc_alloc().unwrap();
        client.write_descriptor(index, &ShmDescriptor::new(op, 77, 1, offset, u64::MAX)).unwrap();
        client.submit(index).unwrap();
        let mut spins = 0;
        loop {
            let got = client.reap(1);
            if let Some((t, s)) = got.first() {
                assert_eq!((*t, *s), (u64::MAX, IoStatus::Ok));
                break;
            }
            backoff(&mut spins);
        }
    }
    let mut back = vec![0u8; 4096];
    client.read_data(4096, &mut back);
    assert!(back == pattern, "data did not survive the round trip");

    stop.store(true, Ordering::Release);
    observer.join().expect("observer saw a broken census");
    let final_census = seg.census().unwrap();
    assert_eq!(final_census.free, DESC as u64, "{final_census:?}");
    client.close();
    let status = child.wait().unwrap();
    assert!(status.success(), "server exited with {status}");
    submitted.sort_unstable();
    completed.sort_unstable();
    assert!(submitted == completed);
    format!(
        "{OPS} ops, {own_samples} client samples, {} observer samples",
        samples.load(Ordering::Relaxed)
    )
}

fn allocator_oracle() -> String {
    const BITS: u64 = 4099;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut bm = BitmapAllocator::new(BITS);
    let mut reference = vec![0u8; BITS.div_ceil(8) as usize];
    let set = |r: &[u8], b: u64| r[(b / 8) as usize] & (1 << (b % 8)) != 0;
    let mut live: Vec<(u64, u64)> = Vec::new();
    let mut allocs = 0;
    for step in 0..100_000 {
        if live.is_empty() || rng.gen_bool(0.52) {
            let n = rng.gen_range(1..=16);
            let free_run = (0..=BITS - n).any(|s| (s..s + n).all(|b| !set(&reference, b)));
            match bm.allocate(n) {
                Some(start) => {
                    assert!(start + n <= BITS);
                    for b in start..start + n {
                        assert!(!set(&reference, b), "step {step}: block {b} allocated twice");
                        reference[(b / 8) as usize] |= 1 << (b % 8);
                    }
                    live.push((start, n));
                    allocs += 1;
                }
                None => assert!(!free_run, "step {step}: refused {n} blocks although a run is free"),
            }
        } else {
            let (start, n) = live.swap_remove(rng.gen_range(0..live.len()));
            assert!(bm.release(start, n));
            for b in start..start + n {
                reference[(b / 8) as usize] &= !(1 << (b % 8));
            }
        }
        assert!(bm.as_bytes() == &reference[..], "step {step}: allocated sets differ");
    }
    format!("100000 steps, {allocs} allocations")
}

fn raid() -> String {
    // exhaustive map bijection against the inverse map
    for n in [2u64, 3, 4] {
        for stripe in [1u64, 2, 4, 8] {
            let per_child = 4096 / n / stripe * stripe;
            let mut hit = vec![false; (per_child * n) as usize];
            for lba in 0..per_child * n {
                let (c, cl) = raid0_map(lba, stripe, n);
                assert!(cl < per_child);
                let back = (cl / stripe * n + c as u64) * stripe + cl % stripe;
                assert_eq!(back, lba);
                let slot = (c as u64 * per_child + cl) as usize;
                assert!(!hit[slot], "n {n} stripe {stripe}: collision at lba {lba}");
                hit[slot] = true;
            }
            assert!(hit.iter().all(|h| *h));
        }
    }
    // degraded reads
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut good = 0;
    for trial in 0..100u64 {
        let mirrors = [ram(64), ram(64)];
        let raid = Raid1Device::over(
            Raid1Config {},
            mirrors.iter().map(|m| m.clone() as Arc<dyn BlockDevice>).collect(),
        )
        .unwrap();
        let lba = rng.gen_range(0..64);
        let payload: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
        let buf = raid.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
        buf.write_at(0, &payload);
        raid.write_sync(lba, 1, &buf, 0).unwrap();
        let bad = &mirrors[trial as usize % 2];
        let junk = bad.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
        junk.fill(0xee);
        bad.write_sync(lba, 1, &junk, 0).unwrap();
        bad.inject_fault(Fault::ReadError { lba });
        let out = raid.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
        if raid.read_sync(lba, 1, &out, 0).is_ok() && out.to_vec() == payload {
            good += 1;
        }
    }
    assert_eq!(good, 100, "degraded reads correct in {good}/100 trials");
    // file mirrors after random writes
    let dir = tempfile::tempdir().unwrap();
    let paths = [dir.path().join("m0"), dir.path().join("m1")];
    let raid = Raid1Device::over(
        Raid1Config {},
        paths
            .iter()
            .map(|p| FileBlockDevice::open(FileConfig::new(p, 512)).unwrap() as Arc<dyn BlockDevice>)
            .collect(),
    )
    .unwrap();
    let buf = raid.memory().allocate_io_buffer(8 * 4096, 4096, -1).unwrap();
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=8u32);
        let lba = rng.gen_range(0..=512 - n as u64);
        let bytes: Vec<u8> = (0..n as usize * 4096).map(|_| rng.gen()).collect();
        buf.write_at(0, &bytes);
        raid.write_sync(lba, n, &buf, 0).unwrap();
    }
    raid.flush_sync().unwrap();
    drop(raid);
    let a = std::fs::read(&paths[0]).unwrap();
    assert!(a == std::fs::read(&paths[1]).unwrap(), "mirror images differ");
    "12 geometries exhaustive, 100/100 degraded reads, mirrors identical after 10^4 writes".into()
}

fn dir_view(keys: &[Vec<u8>], prefix: &str) -> Vec<DirEntry> {
    let mut set = BTreeSet::new();
    for k in keys {
        let k = String::from_utf8(k.clone()).unwrap();
        if let Some(rest) = k.strip_prefix(prefix) {
            let entry = match rest.split_once('/') {
                Some((d, _)) => DirEntry { name: d.into(), kind: EntryKind::Dir },
                None => DirEntry { name: rest.into(), kind: EntryKind::File },
            };
            set.insert(entry);
        }
    }
    set.into_iter().collect()
}

fn kv_durability() -> String {
    let dir = tempfile::tempdir().unwrap();
    let dev = FileBlockDevice::open(FileConfig::new(dir.path().join("kv.img"), 8192)).unwrap();
    let kv = KvHandle::format(dev.open_queue().unwrap()).unwrap();
    let mut reference: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let keys: Vec<Vec<u8>> = (0..400).map(|i| format!("d{}/s{}/k{i}", i % 7, i % 3).into_bytes()).collect();
    for _ in 0..10_000 {
        let key = keys[rng.gen_range(0..keys.len())].clone();
        if rng.gen_bool(0.25) {
            assert_eq!(kv.erase(&key).is_ok(), reference.remove(&key).is_some());
        } else {
            let len = rng.gen_range(0..10_000);
            let value: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            kv.put(&key, &value).unwrap();
            reference.insert(key, value);
        }
    }
    kv.close().unwrap();
    let kv: Arc<dyn KvStore> = Arc::new(KvHandle::open(dev.open_queue().unwrap()).unwrap());
    for k in &keys {
        match reference.get(k) {
            Some(v) => {
                assert!(&kv.get(k).unwrap() == v);
                assert_eq!(kv.get_attr(k).unwrap().value_len, v.len() as u64);
            }
            None => {
                assert_eq!(kv.get(k), Err(KvError::NotFound));
                assert_eq!(kv.get_attr(k), Err(KvError::NotFound));
            }
        }
    }
    let listed = kv.list(b"").unwrap();
    assert_eq!(listed, reference.keys().cloned().collect::<Vec<_>>());
    let vfs = Vfs::new(kv.clone());
    let mut dirs = 0;
    for d in ["", "d0/", "d3/", "d3/s1/", "d6/s2/"] {
        let path = VfsPath::parse(&format!("/{d}")).unwrap();
        assert_eq!(vfs.list(&path).unwrap(), dir_view(&listed, d), "list /{d}");
        dirs += 1;
    }
    for (k, v) in &reference {
        let path = VfsPath::from_key(k);
        assert_eq!(vfs.stat(&path).unwrap().size, v.len() as u64);
    }

    // torn puts: every prefix of a put's writes reaches the device
    let mut torn_cases = 0;
    let ram_dev = ram(1024);
    let probe = KvHandle::format(ram_dev.open_queue().unwrap()).unwrap();
    probe.put(b"base", b"x").unwrap();
    let before = ram_dev.stats().writes;
    probe.put(b"probe", &[1; 9000]).unwrap();
    let writes_per_put = ram_dev.stats().writes - before;
    drop(probe);
    for persisted in 0..=writes_per_put {
        let dev = ram(1024);
        let kv = KvHandle::format(dev.open_queue().unwrap()).unwrap();
        let committed: Vec<(Vec<u8>, Vec<u8>)> =
            (0..20).map(|i| (format!("c{i}").into_bytes(), vec![i as u8; 100 * i + 1])).collect();
        for (k, v) in &committed {
            kv.put(k, v).unwrap();
        }
        dev.inject_fault(Fault::DropWritesAfter { writes: persisted });
        let _ = kv.put(b"new", &[9; 9000]);
        let _ = kv.put(b"c3", &[8; 5000]);
        drop(kv);
        dev.clear_faults();
        let kv = KvHandle::open(dev.open_queue().unwrap()).unwrap();
        for (k, v) in &committed {
            let got = kv.get(k).unwrap();
            // an overwrite may land whole or not at all
            assert!(&got == v || (k == b"c3" && got == vec![8; 5000]), "persisted {persisted}: {:?}", k);
        }
        match kv.get(b"new") {
            Ok(v) => assert_eq!(v, vec![9; 9000]),
            Err(e) => assert_eq!(e, KvError::NotFound),
        }
        kv.fsck().unwrap();
        torn_cases += 1;
    }
    format!(
        "10^4 ops, {} keys after reopen, {dirs} listings, {torn_cases} torn-put cut points",
        reference.len()
    )
}

fn iommu() -> String {
    let leaf = ram(256);
    let (m0, m1) = (ram(256), ram(256));
    let mirror = Raid1Device::over(Raid1Config {}, vec![m0.clone(), m1.clone()]).unwrap();
    let queued_leaf = ram(256);
    let queued = IoService::over(queued_leaf.clone(), ServiceConfig::new(ServiceMode::Queued)).unwrap();
    let stranger = ram(16);
    let foreign = stranger.memory().allocate_io_buffer(4096, 4096, -1).unwrap();
    let unregistered = IoBuffer::unregistered(4096);
    let targets: Vec<(Arc<dyn BlockDevice>, Vec<Arc<RamBlockDevice>>)> = vec![
        (leaf.clone(), vec![leaf.clone()]),
        (mirror.clone(), vec![m0.clone(), m1.clone()]),
        (queued.clone(), vec![queued_leaf.clone()]),
    ];
    let snapshot = |d: &RamBlockDevice| {
        let b = d.memory().allocate_io_buffer(256 * 4096, 4096, -1).unwrap();
        d.read_sync(0, 256, &b, 0).unwrap();
        b.to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rejected = 0;
    for (target, leaves) in &targets {
        let images: Vec<Vec<u8>> = leaves.iter().map(|l| snapshot(l)).collect();
        let stats: Vec<_> = leaves.iter().map(|l| l.stats()).collect();
        let queue = target.open_queue().unwrap();
        let mut out = Vec::new();
        for i in 0..334 {
            let buf = if rng.gen_bool(0.5) { &foreign } else { &unregistered };
            buf.fill(0xcc);
            let lba = rng.gen_range(0..256);
            let desc = if rng.gen_bool(0.5) {
                IoDescriptor::read(lba, 1, buf, 0, i)
            } else {
                IoDescriptor::write(lba, 1, buf, 0, i)
            };
            let status = match queue.submit(&desc) {
                Err(SubmitError::Rejected(s)) => s,
                Err(e) => panic!("submit: {e}"),
                Ok(()) => {
                    let mut spins = 0;
                    loop {
                        out.clear();
                        if queue.poll(1, &mut out) == 1 {
                            break out[0].status;
                        }
                        backoff(&mut spins);
                    }
                }
            };
            assert_eq!(status, IoStatus::Access);
            assert!(buf.to_vec().iter().all(|&b| b == 0xcc), "a rejected read filled the buffer");
            rejected += 1;
        }
        for ((l, img), st) in leaves.iter().zip(&images).zip(&stats) {
            let now = l.stats();
            assert_eq!((now.blocks_read, now.blocks_written), (st.blocks_read, st.blocks_written));
            assert!(&snapshot(l)[..] == &img[..], "device contents changed");
        }
    }
    queued.shutdown();
    assert_eq!(rejected, 1002);
    format!("{rejected}/1002 submissions refused with E_ACCESS, no blocks moved")
}

fn zero_copy_audit() -> String {
    let leaves = [ram(512), ram(512)];
    let disk = ram(1024);
    partition_format(
        disk.as_ref(),
        &[PartitionEntry::new(1, 300, "a"), PartitionEntry::new(301, 600, "b")],
    )
    .unwrap();
    let all = [leaves[0].clone(), leaves[1].clone(), disk.clone()];
    for l in &all {
        l.set_audit(true);
    }
    let children = || leaves.iter().map(|l| l.clone() as Arc<dyn BlockDevice>).collect::<Vec<_>>();
    let stacks: Vec<(&str, Arc<dyn BlockDevice>)> = vec![
        ("device", leaves[0].clone()),
        (
            "partition",
            PartitionDevice::over(PartitionConfig { index: 1, format: None }, vec![disk.clone()]).unwrap(),
        ),
        ("raid0", Raid0Device::over(Raid0Config { stripe_blocks: 4 }, children()).unwrap()),
        ("raid1", Raid1Device::over(Raid1Config {}, children()).unwrap()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for (name, stack) in &stacks {
        for l in &all {
            l.take_audit();
        }
        let bufs: Vec<IoBuffer> = (0..4)
            .map(|_| stack.memory().allocate_io_buffer(9 * 4096, 4096, -1).unwrap())
            .collect();
        let mut ops = 0;
        let mut records = Vec::new();
        for _ in 0..1000 {
            let b = &bufs[rng.gen_range(0..bufs.len())];
            let n = rng.gen_range(1..=8u32);
            let lba = rng.gen_range(0..=300 - n as u64);
            let offset = rng.gen_range(0..=1usize) * 4096;
            if rng.gen_bool(0.5) {
                stack.write_sync(lba, n, b, offset).unwrap();
            } else {
                stack.read_sync(lba, n, b, offset).unwrap();
            }
            ops += 1;
            let touched: Vec<_> = all.iter().flat_map(|l| l.take_audit()).collect();
            assert!(!touched.is_empty(), "{name}: op reached no backend");
            for r in &touched {
                assert_eq!(r.buffer_handle, b.handle(), "{name}: backend used another buffer");
                assert_eq!(r.base, b.base() + r.offset, "{name}");
                assert!(r.offset >= offset && r.offset + r.len <= offset + n as usize * 4096, "{name}");
            }
            let bytes: usize = touched.iter().map(|r| r.len).sum();
            let copies = if *name == "raid1" && touched[0].op == IoOp::Write { 2 } else { 1 };
            assert_eq!(bytes, copies * n as usize * 4096, "{name}: bytes touched");
            records.extend(touched);
        }
        checked += ops;
    }
    format!("{checked} ops over device/partition/raid0/raid1, every transfer on the submitted buffer")
}

#[derive(Default)]
struct Model {
    counts: BTreeMap<u64, u32>,
    deps: BTreeMap<u64, Vec<u64>>,
}

impl Model {
    fn drop_one(&mut self, id: u64) {
        let n = self.counts.get_mut(&id).unwrap();
        *n -= 1;
        if *n == 0 {
            self.counts.remove(&id);
            for d in self.deps.remove(&id).unwrap_or_default() {
                self.drop_one(d);
            }
        }
    }
}

fn component_lifecycle() -> String {
    const TYPES: [ComponentId; 5] = [RAM_BLOCK_DEVICE_ID, BLOCK_CACHE_ID, RAID0_ID, RAID1_ID, PARTITION_ID];
    const IFACES: [InterfaceId; 4] = [IBASE, IBLOCK_DEVICE, IZEROCOPY_MEMORY, IKVSTORE];
    let registry = Registry::with_builtins();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut held: Vec<ComponentRef> = Vec::new();
    let mut model = Model::default();
    let mut identity_checks = 0;
    for step in 0..10_000 {
        match rng.gen_range(0..10) {
            0 | 1 => {
                let c = registry.create_component(TYPES[rng.gen_range(0..TYPES.len())]).unwrap();
                model.counts.insert(c.identity(), 1);
                held.push(c);
            }
            2 | 3 if !held.is_empty() => {
                let h = &held[rng.gen_range(0..held.len())];
                let iid = IFACES[rng.gen_range(0..IFACES.len())];
                if let Some(v) = h.query_interface(iid).unwrap() {
                    let base = v.query_interface(IBASE).unwrap().unwrap();
                    let again = h.query_interface(IBASE).unwrap().unwrap();
                    assert!(base.same_instance(&again) && base.identity() == again.identity(), "step {step}");
                    identity_checks += 1;
                    *model.counts.get_mut(&h.identity()).unwrap() += 2;
                    again.release().unwrap();
                    held.push(v);
                    held.push(base);
                }
            }
            4 if !held.is_empty() => {
                let h = &held[rng.gen_range(0..held.len())];
                h.add_ref().unwrap();
                *model.counts.get_mut(&h.identity()).unwrap() += 1;
                let d = h.duplicate().unwrap();
                d.release().unwrap();
                h.release().unwrap();
                model.counts.entry(h.identity()).and_modify(|c| *c -= 1);
            }
            5..=7 if !held.is_empty() => {
                let h = held.swap_remove(rng.gen_range(0..held.len()));
                h.release().unwrap();
                model.drop_one(h.identity());
            }
            8 | 9 if held.len() >= 2 => {
                let a = &held[rng.gen_range(0..held.len())];
                let b = &held[rng.gen_range(0..held.len())];
                if a.identity() > b.identity() && bind(a, b).is_ok() {
                    *model.counts.get_mut(&b.identity()).unwrap() += 1;
                    model.deps.entry(a.identity()).or_default().push(b.identity());
                }
            }
            _ => {}
        }
        for h in &held {
            assert_eq!(h.refcount(), model.counts[&h.identity()], "step {step}");
        }
        assert_eq!(registry.live_instances(), model.counts.len(), "step {step}");
    }
    for h in held.drain(..) {
        h.release().unwrap();
    }
    assert_eq!(registry.live_instances(), 0, "instances leaked");
    format!("10^4 steps, {identity_checks} IBase identity checks, 0 live at end")
}

