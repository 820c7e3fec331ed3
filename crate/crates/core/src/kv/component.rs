use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{KvEngine, KvHandle, KvStore};
use crate::component::{
    Component, ComponentError, ComponentId, ComponentRef, Dependencies, InterfaceId, IKVSTORE,
    KV_STORE_ID,
};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    /// Write a fresh, empty store at start instead of opening one.
    #[serde(default)]
    pub format: bool,
}

/// KV store component: binds one block device, exposes `IKVStore`.
#[derive(Default)]
pub struct KvComponent {
    config: Mutex<KvConfig>,
    deps: Dependencies,
    handle: Arc<KvHandle>,
}

impl KvComponent {
    pub fn new() -> KvComponent {
        KvComponent::default()
    }

    pub fn handle(&self) -> &Arc<KvHandle> {
        &self.handle
    }
}

impl Component for KvComponent {
    fn component_id(&self) -> ComponentId {
        KV_STORE_ID
    }

    fn interfaces(&self) -> &[InterfaceId] {
        &[IKVSTORE]
    }

    fn configure(&self, config: &Value) -> Result<(), ComponentError> {
        let parsed = match config {
            Value::Null => KvConfig::default(),
            v => serde_json::from_value(v.clone()).map_err(|e| ComponentError::Config(e.to_string()))?,
        };
        *self.config.lock() = parsed;
        Ok(())
    }

    fn bind(&self, dependency: &ComponentRef) -> Result<(), ComponentError> {
        dependency.block_device()?;
        if !self.deps.is_empty() {
            return Err(ComponentError::IncompatibleDependency(
                "kv store binds exactly one block device".into(),
            ));
        }
        self.deps.push(dependency)?;
        Ok(())
    }

    fn start(&self) -> Result<(), ComponentError> {
        if self.handle.is_open() {
            return Ok(());
        }
        let device = self.deps.with(|d| d.first().map(|r| r.block_device()));
        let device = device.ok_or_else(|| {
            ComponentError::IncompatibleDependency("kv store needs a block device".into())
        })??;
        let queue = device
            .open_queue()
            .map_err(|e| ComponentError::StartFailed(e.to_string()))?;
        let engine = if self.config.lock().format {
            KvEngine::format(queue)
        } else {
            KvEngine::open(queue)
        };
        let engine = engine.map_err(|e| ComponentError::StartFailed(e.to_string()))?;
        self.handle.install(engine);
        Ok(())
    }

    fn teardown(&self) {
        if let Err(e) = self.handle.close() {
            log::warn!("kv store close: {e}");
        }
        self.deps.release_all();
    }

    fn as_kv_store(self: Arc<Self>) -> Option<Arc<dyn KvStore>> {
        Some(self.handle.clone())
    }
}
