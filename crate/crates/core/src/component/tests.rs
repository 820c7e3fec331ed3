use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::*;
use crate::Registry;

fn started(registry: &Registry, ty: &str, config: Value) -> ComponentRef {
    let c = registry.create_by_type(ty, &config).unwrap();
    c.start().unwrap();
    c
}

#[test]
fn add_ref_and_release_count() {
    let registry = Registry::with_builtins();
    registry.tracker().enable_trace();
    let c = registry.create_component(RAM_BLOCK_DEVICE_ID).unwrap();
    assert_eq!(c.refcount(), 1);
    assert_eq!(c.add_ref().unwrap(), 2);
    assert_eq!(c.release().unwrap(), 1);
    assert_eq!(registry.live_instances(), 1);
    assert_eq!(c.release().unwrap(), 0);
    assert_eq!(registry.live_instances(), 0);
    let trace = registry.tracker().take_trace();
    let destroyed = trace
        .iter()
        .filter(|e| matches!(e, TraceEvent::Destroyed { .. }))
        .count();
    assert_eq!((trace.len(), destroyed), (2, 1));
}

#[test]
fn released_handles_are_poisoned() {
    let registry = Registry::with_builtins();
    let c = registry.create_component(RAM_BLOCK_DEVICE_ID).unwrap();
    let view = c.query_interface(IBLOCK_DEVICE).unwrap().unwrap();
    view.release().unwrap();
    c.release().unwrap();
    assert!(matches!(c.release(), Err(ComponentError::UseAfterFree)));
    assert!(matches!(c.add_ref(), Err(ComponentError::UseAfterFree)));
    assert!(matches!(view.block_device(), Err(ComponentError::UseAfterFree)));
    assert!(matches!(c.query_interface(IBASE), Err(ComponentError::UseAfterFree)));
    assert_eq!(registry.live_instances(), 0);
}

#[test]
fn query_interface_counts_only_on_success() {
    let registry = Registry::with_builtins();
    let c = registry.create_component(RAM_BLOCK_DEVICE_ID).unwrap();
    assert!(c.query_interface(IKVSTORE).unwrap().is_none());
    assert_eq!(c.refcount(), 1);
    let base = c.query_interface(IBASE).unwrap().unwrap();
    let mem = c.query_interface(IZEROCOPY_MEMORY).unwrap().unwrap();
    assert_eq!(c.refcount(), 3);
    assert_eq!(base.identity(), c.identity());
    assert_eq!(mem.identity(), c.identity());
    assert!(mem.same_instance(&base));
    assert_eq!(mem.interface_id(), IZEROCOPY_MEMORY);
    for r in [mem, base, c] {
        r.release().unwrap();
    }
    assert_eq!(registry.live_instances(), 0);
}

#[test]
fn unknown_ids_and_types() {
    let registry = Registry::with_builtins();
    let bogus = ComponentId::from_uuid(uuid::Uuid::nil());
    assert!(matches!(registry.create_component(bogus), Err(ComponentError::UnknownComponent(_))));
    assert!(matches!(
        registry.create_by_type("raid5", &Value::Null),
        Err(ComponentError::UnknownType(t)) if t == "raid5"
    ));
    // a refused configuration leaves nothing behind
    assert!(matches!(
        registry.create_by_type("block:ram", &json!({"size_blocks": "many"})),
        Err(ComponentError::Config(_))
    ));
    assert_eq!(registry.live_instances(), 0);
    for ty in ["block:ram", "block:file", "raid0", "raid1", "cache", "partition", "kv", "service"] {
        assert!(registry.has_type(ty), "{ty}");
    }
}

#[test]
fn bind_checks_required_interfaces() {
    let registry = Registry::with_builtins();
    let cache = registry.create_by_type("cache", &json!({"capacity_blocks": 4})).unwrap();
    let kv = registry.create_component(KV_STORE_ID).unwrap();
    let err = bind(&cache, &kv).unwrap_err();
    assert!(err.to_string().contains("IncompatibleDependency"), "{err}");
    assert_eq!((cache.refcount(), kv.refcount()), (1, 1));
    // leaves accept no dependencies at all
    let a = started(&registry, "block:ram", json!({"size_blocks": 8}));
    let b = started(&registry, "block:ram", json!({"size_blocks": 8}));
    assert!(matches!(bind(&a, &b), Err(ComponentError::IncompatibleDependency(_))));
    assert_eq!(b.refcount(), 1);
    for r in [cache, kv, a, b] {
        r.release().unwrap();
    }
    assert_eq!(registry.live_instances(), 0);
}

/// Post-order of the tree `cache -> raid1 -> [ram, ram]`: an aggregate's
/// children go before it, in bind order.
#[test]
fn three_level_destruction_order() {
    let registry = Registry::with_builtins();
    let tracker = registry.tracker().clone();
    let r0 = started(&registry, "block:ram", json!({"size_blocks": 16}));
    let r1 = started(&registry, "block:ram", json!({"size_blocks": 16}));
    let mirror = registry.create_by_type("raid1", &Value::Null).unwrap();
    bind(&mirror, &r0).unwrap();
    bind(&mirror, &r1).unwrap();
    mirror.start().unwrap();
    let cache = registry.create_by_type("cache", &json!({"capacity_blocks": 4})).unwrap();
    bind(&cache, &mirror).unwrap();
    cache.start().unwrap();
    let expected = [r0.identity(), r1.identity(), mirror.identity(), cache.identity()];
    for r in [&r0, &r1, &mirror] {
        r.release().unwrap();
    }
    assert_eq!(registry.live_instances(), 4);
    assert_eq!((r0.refcount(), mirror.refcount()), (1, 1));

    tracker.enable_trace();
    cache.release().unwrap();
    let destroyed: Vec<u64> = tracker
        .take_trace()
        .into_iter()
        .map(|e| match e {
            TraceEvent::Destroyed { serial, .. } => serial,
            TraceEvent::Created { .. } => panic!("nothing is created here"),
        })
        .collect();
    assert_eq!(destroyed, expected);
    assert_eq!(registry.live_instances(), 0);
}

#[test]
fn concurrent_add_release_balances() {
    let registry = Registry::with_builtins();
    let c = Arc::new(registry.create_component(RAM_BLOCK_DEVICE_ID).unwrap());
    let threads: Vec<_> = (0..4)
        .map(|_| {
            let c = c.clone();
            std::thread::spawn(move || {
                for _ in 0..10_000 {
                    c.add_ref().unwrap();
                    c.release().unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(c.refcount(), 1);
    c.release().unwrap();
    assert_eq!(registry.live_instances(), 0);
}

/// Reference model for the random lifecycle walk: per instance, the number
/// of handles the test holds plus the number of aggregates bound to it.
#[derive(Default)]
struct Model {
    counts: HashMap<u64, u32>,
    deps: HashMap<u64, Vec<u64>>,
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

#[test]
fn random_lifecycle_walk() {
    const TYPES: [(&str, ComponentId); 5] = [
        ("ram", RAM_BLOCK_DEVICE_ID),
        ("cache", BLOCK_CACHE_ID),
        ("raid0", RAID0_ID),
        ("raid1", RAID1_ID),
        ("partition", PARTITION_ID),
    ];
    const IFACES: [InterfaceId; 4] = [IBASE, IBLOCK_DEVICE, IZEROCOPY_MEMORY, IKVSTORE];
    let registry = Registry::with_builtins();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut held: Vec<ComponentRef> = Vec::new();
    let mut model = Model::default();
    let mut binds = 0;
    for step in 0..10_000 {
        match rng.gen_range(0..10) {
            0 | 1 => {
                let (_, id) = TYPES[rng.gen_range(0..TYPES.len())];
                let c = registry.create_component(id).unwrap();
                model.counts.insert(c.identity(), 1);
                held.push(c);
            }
            2 | 3 if !held.is_empty() => {
                let h = &held[rng.gen_range(0..held.len())];
                let iid = IFACES[rng.gen_range(0..IFACES.len())];
                let base = h.query_interface(IBASE).unwrap().unwrap();
                assert_eq!(base.identity(), h.identity(), "step {step}");
                assert!(base.same_instance(h));
                *model.counts.get_mut(&h.identity()).unwrap() += 1;
                held.push(base);
                if let Some(v) = held[held.len() - 1].query_interface(iid).unwrap() {
                    assert_eq!(v.identity(), held[held.len() - 1].identity());
                    *model.counts.get_mut(&v.identity()).unwrap() += 1;
                    held.push(v);
                }
            }
            4 if !held.is_empty() => {
                let d = held[rng.gen_range(0..held.len())].duplicate().unwrap();
                *model.counts.get_mut(&d.identity()).unwrap() += 1;
                held.push(d);
            }
            5..=7 if !held.is_empty() => {
                let h = held.swap_remove(rng.gen_range(0..held.len()));
                h.release().unwrap();
                model.drop_one(h.identity());
            }
            8 | 9 if held.len() >= 2 => {
                // bind only newer onto older instances so no cycle can form
                let i = rng.gen_range(0..held.len());
                let j = rng.gen_range(0..held.len());
                let (a, b) = (&held[i], &held[j]);
                if a.identity() > b.identity() && bind(a, b).is_ok() {
                    *model.counts.get_mut(&b.identity()).unwrap() += 1;
                    model.deps.entry(a.identity()).or_default().push(b.identity());
                    binds += 1;
                }
            }
            _ => {}
        }
        for h in &held {
            assert_eq!(h.refcount(), model.counts[&h.identity()], "step {step}");
        }
        assert_eq!(registry.live_instances(), model.counts.len(), "step {step}");
    }
    assert!(binds > 100, "walk exercised binding ({binds})");
    for h in held.drain(..) {
        h.release().unwrap();
        model.drop_one(h.identity());
    }
    assert!(model.counts.is_empty());
    assert_eq!(registry.live_instances(), 0);
}

fn table_with(abi_version: u32, core_version: &'static str) -> PluginTable {
    static FACTORIES: [Factory; 1] = [Factory {
        component_id: RAM_BLOCK_DEVICE_ID,
        type_name: "block:ram",
        required: &[],
        create: || Arc::new(crate::blockdev::RamBlockDevice::new()),
    }];
    PluginTable {
        abi_version,
        core_version,
        factories: &FACTORIES,
    }
}

#[test]
fn plugin_tables_are_versioned() {
    let registry = Registry::new();
    let ok = table_with(PLUGIN_ABI_VERSION, env!("CARGO_PKG_VERSION"));
    let first = registry.register_table(&ok).unwrap();
    assert_eq!(registry.register_table(&ok).unwrap(), first);
    assert_eq!(registry.type_names(), vec!["block:ram".to_string()]);
    let wrong_abi = table_with(PLUGIN_ABI_VERSION + 1, env!("CARGO_PKG_VERSION"));
    assert!(matches!(registry.register_table(&wrong_abi), Err(ComponentError::BadPlugin(_))));
    let wrong_core = table_with(PLUGIN_ABI_VERSION, "0.0.0-other");
    assert!(matches!(registry.register_table(&wrong_core), Err(ComponentError::BadPlugin(_))));
}

#[test]
fn plugin_files_are_checked() {
    let registry = Registry::new();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        registry.load_plugin(dir.path().join("missing.so")),
        Err(ComponentError::FileNotFound(_))
    ));
    let text = dir.path().join("not_a_plugin.txt");
    std::fs::write(&text, "plain text, not a module\n").unwrap();
    assert!(matches!(registry.load_plugin(&text), Err(ComponentError::BadPlugin(_))));
    let fake = dir.path().join("fake.so");
    std::fs::write(&fake, b"\x7fELF garbage").unwrap();
    assert!(matches!(registry.load_plugin(&fake), Err(ComponentError::BadPlugin(_))));
    assert!(registry.type_names().is_empty());
}
