//! COM-style component runtime.
//!
//! Every component implements [`Component`] (the `IBase` contract): typed
//! interface querying by UUID, reference counting and dependency binding.
//! A [`ComponentRef`] is the equivalent of a raw interface pointer: it names
//! one interface view of one live instance and does not release on drop.
//! Counting is explicit through [`ComponentRef::add_ref`] and
//! [`ComponentRef::release`]; the instance is torn down exactly when its
//! count reaches zero, after which every handle to it is poisoned.

mod ids;
mod plugin;
mod registry;

use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use serde_json::Value;
use thiserror::Error;

use crate::blockdev::{BlockDevice, DeviceDiagnostics};
use crate::kv::KvStore;
use crate::memory::ZerocopyMemory;

pub use ids::*;
pub use plugin::{Factory, PluginEntry, PluginTable, PLUGIN_ABI_VERSION, PLUGIN_ENTRY_SYMBOL};
pub use registry::Registry;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComponentError {
    #[error("plugin file not found: {0}")]
    FileNotFound(String),
    #[error("bad plugin: {0}")]
    BadPlugin(String),
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("unknown component type `{0}`")]
    UnknownType(String),
    #[error("use after free: handle refers to a destroyed instance")]
    UseAfterFree,
    #[error("component does not implement {0}")]
    NoInterface(InterfaceId),
    #[error("IncompatibleDependency: {0}")]
    IncompatibleDependency(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("component not started")]
    NotStarted,
    #[error("component failed to start: {0}")]
    StartFailed(String),
}

/// The `IBase` contract plus typed accessors for the interfaces this crate
/// defines. Accessors default to `None`; a component overrides the ones it
/// lists in [`Component::interfaces`].
pub trait Component: Send + Sync {
    fn component_id(&self) -> ComponentId;

    /// Interfaces answered by `query_interface`, not counting `IBase`.
    /// Aggregating components list forwarded interfaces here explicitly.
    fn interfaces(&self) -> &[InterfaceId];

    fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        match config {
            Value::Null => Ok(()),
            Value::Object(map) if map.is_empty() => Ok(()),
            _ => Err(ComponentError::Config(
                "component takes no configuration".into(),
            )),
        }
    }

    /// Accept a dependency. The framework has already checked the factory's
    /// required interfaces; a component that keeps the dependency must take
    /// its own counted reference with [`ComponentRef::duplicate`].
    fn bind(&self, _dependency: &ComponentRef) -> Result<(), ComponentError> {
        Err(ComponentError::IncompatibleDependency(
            "component accepts no dependencies".into(),
        ))
    }

    /// Called once after configuration and binding.
    fn start(&self) -> Result<(), ComponentError> {
        Ok(())
    }

    /// Called exactly once when the reference count reaches zero. Bound and
    /// aggregated references must be released here.
    fn teardown(&self) {}

    fn as_block_device(self: Arc<Self>) -> Option<Arc<dyn BlockDevice>> {
        None
    }

    fn as_zerocopy_memory(self: Arc<Self>) -> Option<Arc<dyn ZerocopyMemory>> {
        None
    }

    fn as_kv_store(self: Arc<Self>) -> Option<Arc<dyn KvStore>> {
        None
    }

    fn as_diagnostics(self: Arc<Self>) -> Option<Arc<dyn DeviceDiagnostics>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Created { serial: u64, component: ComponentId },
    Destroyed { serial: u64, component: ComponentId },
}

/// Counts live instances for one registry (or the process default).
#[derive(Default)]
pub struct Tracker {
    live: AtomicUsize,
    created: AtomicU64,
    trace: Mutex<Option<Vec<TraceEvent>>>,
}

impl Tracker {
    pub fn new() -> Arc<Tracker> {
        Arc::new(Tracker::default())
    }

    /// The tracker used by handles created outside any registry.
    pub fn global() -> Arc<Tracker> {
        static GLOBAL: OnceLock<Arc<Tracker>> = OnceLock::new();
        GLOBAL.get_or_init(Tracker::new).clone()
    }

    pub fn live_instances(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    pub fn total_created(&self) -> u64 {
        self.created.load(Ordering::Relaxed)
    }

    pub fn enable_trace(&self) {
        let mut trace = self.trace.lock();
        if trace.is_none() {
            *trace = Some(Vec::new());
        }
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn record(&self, event: TraceEvent) {
        if let Some(trace) = self.trace.lock().as_mut() {
            trace.push(event);
        }
    }
}

static NEXT_SERIAL: AtomicU64 = AtomicU64::new(1);

struct Instance {
    serial: u64,
    component_id: ComponentId,
    refs: AtomicU32,
    object: RwLock<Option<Arc<dyn Component>>>,
    required: &'static [InterfaceId],
    tracker: Arc<Tracker>,
}

impl Instance {
    fn destroy(&self) {
        let object = self.object.write().take();
        if let Some(object) = object {
            object.teardown();
            drop(object);
            self.tracker.live.fetch_sub(1, Ordering::AcqRel);
            self.tracker.record(TraceEvent::Destroyed {
                serial: self.serial,
                component: self.component_id,
            });
        }
    }
}

/// One interface view of a live component instance.
pub struct ComponentRef {
    instance: Arc<Instance>,
    iid: InterfaceId,
}

impl fmt::Debug for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComponentRef")
            .field("component", &self.instance.component_id)
            .field("serial", &self.instance.serial)
            .field("interface", &self.iid)
            .field("refs", &self.refcount())
            .finish()
    }
}

impl ComponentRef {
    /// Wrap a freshly constructed component; the new instance has refcount 1
    /// and is counted by the process-wide tracker.
    pub fn new(object: Arc<dyn Component>) -> ComponentRef {
        Self::with_tracker(object, &[], Tracker::global())
    }

    /// Wrap a component created on behalf of `owner`, sharing its tracker.
    /// Used by components that aggregate inner instances.
    pub fn new_like(owner: &ComponentRef, object: Arc<dyn Component>) -> ComponentRef {
        Self::with_tracker(object, &[], owner.instance.tracker.clone())
    }

    pub(crate) fn with_tracker(
        object: Arc<dyn Component>,
        required: &'static [InterfaceId],
        tracker: Arc<Tracker>,
    ) -> ComponentRef {
        let serial = NEXT_SERIAL.fetch_add(1, Ordering::Relaxed);
        let component_id = object.component_id();
        tracker.live.fetch_add(1, Ordering::AcqRel);
        tracker.created.fetch_add(1, Ordering::Relaxed);
        tracker.record(TraceEvent::Created {
            serial,
            component: component_id,
        });
        ComponentRef {
            instance: Arc::new(Instance {
                serial,
                component_id,
                refs: AtomicU32::new(1),
                object: RwLock::new(Some(object)),
                required,
                tracker,
            }),
            iid: IBASE,
        }
    }

    pub fn interface_id(&self) -> InterfaceId {
        self.iid
    }

    pub fn component_id(&self) -> ComponentId {
        self.instance.component_id
    }

    /// Identity of the underlying instance, equal across all views of it.
    pub fn identity(&self) -> u64 {
        self.instance.serial
    }

    pub fn same_instance(&self, other: &ComponentRef) -> bool {
        Arc::ptr_eq(&self.instance, &other.instance)
    }

    pub fn refcount(&self) -> u32 {
        self.instance.refs.load(Ordering::Acquire)
    }

    pub fn is_live(&self) -> bool {
        self.refcount() > 0
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.instance.tracker
    }

    pub(crate) fn required_interfaces(&self) -> &'static [InterfaceId] {
        self.instance.required
    }

    pub fn add_ref(&self) -> Result<u32, ComponentError> {
        let refs = &self.instance.refs;
        let mut current = refs.load(Ordering::Acquire);
        loop {
            if current == 0 {
                return Err(ComponentError::UseAfterFree);
            }
            match refs.compare_exchange_weak(
                current,
                current + 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(current + 1),
                Err(seen) => current = seen,
            }
        }
    }

    /// Drop one count. At zero the instance is torn down and the handle
    /// (and every other handle to the instance) is poisoned.
    pub fn release(&self) -> Result<u32, ComponentError> {
        let refs = &self.instance.refs;
        let mut current = refs.load(Ordering::Acquire);
        loop {
            if current == 0 {
                return Err(ComponentError::UseAfterFree);
            }
            match refs.compare_exchange_weak(
                current,
                current - 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(seen) => current = seen,
            }
        }
        if current == 1 {
            self.instance.destroy();
        }
        Ok(current - 1)
    }

    /// A second counted handle on the same view (add_ref + copy).
    pub fn duplicate(&self) -> Result<ComponentRef, ComponentError> {
        self.add_ref()?;
        Ok(ComponentRef {
            instance: self.instance.clone(),
            iid: self.iid,
        })
    }

    pub fn supports(&self, iid: InterfaceId) -> Result<bool, ComponentError> {
        let object = self.object()?;
        Ok(iid == IBASE || object.interfaces().contains(&iid))
    }

    /// Returns a counted view of `iid`, or `None` (count unchanged) when the
    /// component does not implement it.
    pub fn query_interface(&self, iid: InterfaceId) -> Result<Option<ComponentRef>, ComponentError> {
        if !self.supports(iid)? {
            return Ok(None);
        }
        self.add_ref()?;
        Ok(Some(ComponentRef {
            instance: self.instance.clone(),
            iid,
        }))
    }

    pub fn object(&self) -> Result<Arc<dyn Component>, ComponentError> {
        if !self.is_live() {
            return Err(ComponentError::UseAfterFree);
        }
        self.instance
            .object
            .read()
            .clone()
            .ok_or(ComponentError::UseAfterFree)
    }

    pub fn block_device(&self) -> Result<Arc<dyn BlockDevice>, ComponentError> {
        self.object()?
            .as_block_device()
            .ok_or(ComponentError::NoInterface(IBLOCK_DEVICE))
    }

    pub fn zerocopy_memory(&self) -> Result<Arc<dyn ZerocopyMemory>, ComponentError> {
        self.object()?
            .as_zerocopy_memory()
            .ok_or(ComponentError::NoInterface(IZEROCOPY_MEMORY))
    }

    pub fn kv_store(&self) -> Result<Arc<dyn KvStore>, ComponentError> {
        self.object()?
            .as_kv_store()
            .ok_or(ComponentError::NoInterface(IKVSTORE))
    }

    pub fn diagnostics(&self) -> Result<Arc<dyn DeviceDiagnostics>, ComponentError> {
        self.object()?
            .as_diagnostics()
            .ok_or(ComponentError::NoInterface(IDEVICE_DIAGNOSTICS))
    }

    pub fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        self.object()?.configure(config)
    }

    pub fn start(&self) -> Result<(), ComponentError> {
        self.object()?.start()
    }
}

/// Compose `component` with `dependency`.
///
/// The dependency is queried for every interface the component's factory
/// declared as required. On success the component holds exactly one new
/// counted reference to the dependency; on failure counts are unchanged.
pub fn bind(component: &ComponentRef, dependency: &ComponentRef) -> Result<(), ComponentError> {
    let object = component.object()?;
    let required = component.required_interfaces();
    let first = required.first().copied().unwrap_or(IBASE);
    for iid in required {
        if !dependency.supports(*iid)? {
            return Err(ComponentError::IncompatibleDependency(format!(
                "dependency {} does not implement {iid}",
                dependency.component_id()
            )));
        }
    }
    let view = dependency
        .query_interface(first)?
        .ok_or(ComponentError::NoInterface(first))?;
    let result = object.bind(&view);
    view.release()?;
    result
}

/// Bound dependencies of a component, released on teardown.
#[derive(Default)]
pub struct Dependencies {
    refs: Mutex<Vec<ComponentRef>>,
}

impl Dependencies {
    pub fn push(&self, dependency: &ComponentRef) -> Result<usize, ComponentError> {
        let dup = dependency.duplicate()?;
        let mut refs = self.refs.lock();
        refs.push(dup);
        Ok(refs.len())
    }

    pub fn len(&self) -> usize {
        self.refs.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with<R>(&self, f: impl FnOnce(&[ComponentRef]) -> R) -> R {
        f(&self.refs.lock())
    }

    pub fn release_all(&self) {
        let refs = std::mem::take(&mut *self.refs.lock());
        for r in refs {
            let _ = r.release();
        }
    }
}

#[cfg(test)]
mod tests;
