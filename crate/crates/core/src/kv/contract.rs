//! Behavioural contract for any [`KvStore`] implementation.
//!
//! An implementation provides a [`KvHarness`] and calls [`run_all`] (or the
//! individual checks) from its tests. Checks panic on violation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KvError, KvStore, MAX_KEY_LEN};
use crate::memory::DEFAULT_ALIGNMENT;

pub trait KvHarness {
    /// An empty, freshly formatted store.
    fn fresh(&mut self) -> Arc<dyn KvStore>;

    /// Close the store last returned and open it again from its device.
    fn reopen(&mut self) -> Arc<dyn KvStore>;
}

fn value(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max);
    (0..len).map(|_| rng.gen()).collect()
}

fn check_conservation(store: &dyn KvStore) {
    let s = store.stats().unwrap();
    assert_eq!(
        s.referenced_blocks + s.free_blocks,
        s.data_blocks,
        "referenced + free must equal the data region: {s:?}"
    );
}

pub fn empty_store(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    assert_eq!(kv.get(b"missing"), Err(KvError::NotFound));
    assert_eq!(kv.get_attr(b"missing"), Err(KvError::NotFound));
    assert_eq!(kv.erase(b"missing"), Err(KvError::NotFound));
    assert!(kv.list(b"").unwrap().is_empty());
    let s = kv.stats().unwrap();
    assert_eq!(s.keys, 0);
    assert_eq!(s.free_blocks, s.data_blocks);
}

pub fn round_trip_sizes(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let bs = kv.block_size().unwrap() as usize;
    for (i, len) in [0, 1, 100, bs - 1, bs, bs + 1, 5000, 3 * bs].into_iter().enumerate() {
        let key = format!("size/{i}");
        let v: Vec<u8> = (0..len).map(|b| (b * 7 + i) as u8).collect();
        kv.put(key.as_bytes(), &v).unwrap();
        assert_eq!(kv.get(key.as_bytes()).unwrap(), v, "length {len}");
        assert_eq!(kv.get_attr(key.as_bytes()).unwrap().value_len, len as u64);
    }
    check_conservation(kv.as_ref());
}

pub fn key_limits(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let max = vec![b'k'; MAX_KEY_LEN];
    kv.put(&max, b"ok").unwrap();
    assert_eq!(kv.get(&max).unwrap(), b"ok");
    let long = vec![b'k'; MAX_KEY_LEN + 1];
    assert_eq!(kv.put(&long, b"x"), Err(KvError::KeyTooLong(MAX_KEY_LEN + 1)));
    kv.put(b"", b"empty key").unwrap();
    assert_eq!(kv.get(b"").unwrap(), b"empty key");
}

pub fn overwrite_and_erase(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let bs = kv.block_size().unwrap() as usize;
    let free0 = kv.stats().unwrap().free_blocks;
    kv.put(b"k", &vec![1; 3 * bs]).unwrap();
    assert_eq!(kv.stats().unwrap().free_blocks, free0 - 3);
    kv.put(b"k", &vec![2; bs / 2]).unwrap();
    assert_eq!(kv.stats().unwrap().free_blocks, free0 - 1);
    assert_eq!(kv.get(b"k").unwrap(), vec![2; bs / 2]);
    kv.erase(b"k").unwrap();
    assert_eq!(kv.get(b"k"), Err(KvError::NotFound));
    assert_eq!(kv.stats().unwrap().free_blocks, free0);
    assert_eq!(kv.stats().unwrap().keys, 0);
}

pub fn list_prefix(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    for k in ["b/1", "a/2", "a/1", "ab"] {
        kv.put(k.as_bytes(), k.as_bytes()).unwrap();
    }
    let keys = |p: &str| -> Vec<String> {
        kv.list(p.as_bytes())
            .unwrap()
            .into_iter()
            .map(|k| String::from_utf8(k).unwrap())
            .collect()
    };
    assert_eq!(keys("a/"), ["a/1", "a/2"]);
    assert_eq!(keys(""), ["a/1", "a/2", "ab", "b/1"]);
    assert!(keys("zz").is_empty());
}

pub fn durability(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reference = BTreeMap::new();
    for i in 0..50 {
        let key = format!("d/{}", i % 30).into_bytes();
        if i % 7 == 3 {
            let _ = kv.erase(&key);
            reference.remove(&key);
        } else {
            let v = value(&mut rng, 9000);
            kv.put(&key, &v).unwrap();
            reference.insert(key, v);
        }
    }
    kv.flush().unwrap();
    drop(kv);
    let kv = h.reopen();
    assert_eq!(kv.list(b"").unwrap(), reference.keys().cloned().collect::<Vec<_>>());
    for (k, v) in &reference {
        assert_eq!(&kv.get(k).unwrap(), v);
        assert_eq!(kv.get_attr(k).unwrap().value_len, v.len() as u64);
    }
    check_conservation(kv.as_ref());
}

pub fn space_reuse(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let bs = kv.block_size().unwrap() as usize;
    let chunk = vec![0x5a; 4 * bs];
    let mut n = 0;
    loop {
        match kv.put(format!("fill/{n}").as_bytes(), &chunk) {
            Ok(()) => n += 1,
            Err(KvError::NoSpace) => break,
            Err(e) => panic!("unexpected error while filling: {e}"),
        }
        assert!(n < 1 << 20, "store never filled");
    }
    assert!(n > 0);
    kv.erase(b"fill/0").unwrap();
    kv.put(b"again", &chunk).unwrap();
    assert_eq!(kv.get(b"again").unwrap(), chunk);
    check_conservation(kv.as_ref());
}

pub fn zero_copy_buffers(h: &mut dyn KvHarness) {
    let kv = h.fresh();
    let bs = kv.block_size().unwrap() as usize;
    let memory = kv.memory().unwrap();
    let buf = memory.allocate_io_buffer(2 * bs, DEFAULT_ALIGNMENT, -1).unwrap();
    buf.with_slice_mut(|s| s.iter_mut().enumerate().for_each(|(i, b)| *b = (i % 251) as u8));
    kv.put_from_buffer(b"zc", &buf, bs + 10).unwrap();
    let out = memory.allocate_io_buffer(2 * bs, DEFAULT_ALIGNMENT, -1).unwrap();
    assert_eq!(kv.get_into_buffer(b"zc", &out).unwrap(), bs + 10);
    assert_eq!(out.with_slice(|s| s[..bs + 10].to_vec()), buf.with_slice(|s| s[..bs + 10].to_vec()));
    assert_eq!(kv.get(b"zc").unwrap().len(), bs + 10);
    let small = memory.allocate_io_buffer(bs, DEFAULT_ALIGNMENT, -1).unwrap();
    assert_eq!(kv.get_into_buffer(b"zc", &small), Err(KvError::BufferTooSmall));
    for b in [buf, out, small] {
        memory.free_io_buffer(&b).unwrap();
    }
}

/// Random puts, overwrites and erases checked against a map after every step.
pub fn reference_map(h: &mut dyn KvHarness, ops: usize, seed: u64) {
    let kv = h.fresh();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reference: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    for step in 0..ops {
        let key = format!("r/{}", rng.gen_range(0..ops / 4 + 1)).into_bytes();
        match rng.gen_range(0..10) {
            0..=5 => {
                let v = value(&mut rng, 6000);
                match kv.put(&key, &v) {
                    Ok(()) => {
                        reference.insert(key.clone(), v);
                    }
                    Err(KvError::NoSpace) => {}
                    Err(e) => panic!("step {step}: put failed: {e}"),
                }
            }
            6..=7 => {
                let expect = if reference.remove(&key).is_some() { Ok(()) } else { Err(KvError::NotFound) };
                assert_eq!(kv.erase(&key), expect, "step {step}: erase");
            }
            _ => {
                let expect = reference.get(&key).cloned().ok_or(KvError::NotFound);
                assert_eq!(kv.get(&key), expect, "step {step}: get");
            }
        }
    }
    for (k, v) in &reference {
        assert_eq!(&kv.get(k).unwrap(), v);
    }
    assert_eq!(kv.list(b"").unwrap(), reference.keys().cloned().collect::<Vec<_>>());
    assert_eq!(kv.stats().unwrap().keys, reference.len() as u64);
    check_conservation(kv.as_ref());
}

pub fn run_all(h: &mut dyn KvHarness) {
    empty_store(h);
    round_trip_sizes(h);
    key_limits(h);
    overwrite_and_erase(h);
    list_prefix(h);
    durability(h);
    space_reuse(h);
    zero_copy_buffers(h);
    reference_map(h, 2000, 1);
}
