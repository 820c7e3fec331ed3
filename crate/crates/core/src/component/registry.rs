use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use serde_json::Value;

use super::plugin::{Factory, PluginEntry, PluginTable, PLUGIN_ENTRY_SYMBOL};
use super::{ComponentError, ComponentId, ComponentRef, Tracker};

/// Search roots for relative plugin paths, colon separated.
pub const PLUGIN_PATH_ENV: &str = "COMANCHE_PLUGIN_PATH";

/// Loaded modules are never unloaded: instances created from them may
/// outlive any registry.
fn loaded_libraries() -> &'static Mutex<Vec<libloading::Library>> {
    static LIBS: OnceLock<Mutex<Vec<libloading::Library>>> = OnceLock::new();
    LIBS.get_or_init(|| Mutex::new(Vec::new()))
}

#[derive(Default)]
struct RegistryInner {
    plugins: HashMap<PathBuf, BTreeSet<ComponentId>>,
    factories: HashMap<ComponentId, Factory>,
    by_type: HashMap<String, ComponentId>,
}

/// Maps component ids and type names to factories.
pub struct Registry {
    inner: Mutex<RegistryInner>,
    tracker: Arc<Tracker>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new()
    }
}

impl Registry {
    /// An empty registry with its own live-instance tracker.
    pub fn new() -> Registry {
        Registry {
            inner: Mutex::new(RegistryInner::default()),
            tracker: Tracker::new(),
        }
    }

    /// A registry preloaded with every component shipped in this crate.
    pub fn with_builtins() -> Registry {
        let registry = Registry::new();
        for table in crate::builtin::tables() {
            registry
                .register_table(table)
                .expect("builtin tables are valid");
        }
        registry
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.tracker
    }

    pub fn live_instances(&self) -> usize {
        self.tracker.live_instances()
    }

    pub fn register_table(&self, table: &PluginTable) -> Result<BTreeSet<ComponentId>, ComponentError> {
        table.validate().map_err(ComponentError::BadPlugin)?;
        let mut inner = self.inner.lock();
        let mut ids = BTreeSet::new();
        for factory in table.factories {
            inner.factories.insert(factory.component_id, *factory);
            inner
                .by_type
                .insert(factory.type_name.to_string(), factory.component_id);
            ids.insert(factory.component_id);
        }
        Ok(ids)
    }

    /// Load a plugin module and register its factories. Loading the same
    /// file again returns the same set without re-registering.
    pub fn load_plugin(&self, path: impl AsRef<Path>) -> Result<BTreeSet<ComponentId>, ComponentError> {
        let path = resolve_plugin_path(path.as_ref())?;
        let canonical = path.canonicalize().unwrap_or_else(|_| path.clone());
        if let Some(ids) = self.inner.lock().plugins.get(&canonical) {
            return Ok(ids.clone());
        }
        check_module_magic(&canonical)?;

        // SAFETY: loading runs the module's initializers; plugins are trusted
        // code built against this crate, verified by the version fields below.
        let library = unsafe { libloading::Library::new(&canonical) }
            .map_err(|e| ComponentError::BadPlugin(e.to_string()))?;
        let table: &'static PluginTable = unsafe {
            let entry = library
                .get::<PluginEntry>(PLUGIN_ENTRY_SYMBOL.as_bytes())
                .map_err(|_| {
                    ComponentError::BadPlugin(format!(
                        "{} does not export `{PLUGIN_ENTRY_SYMBOL}`",
                        canonical.display()
                    ))
                })?;
            entry()
        };
        let ids = self.register_table(table)?;
        loaded_libraries().lock().push(library);
        self.inner.lock().plugins.insert(canonical, ids.clone());
        log::debug!("loaded plugin {} ({} factories)", path.display(), ids.len());
        Ok(ids)
    }

    pub fn component_ids(&self) -> BTreeSet<ComponentId> {
        self.inner.lock().factories.keys().copied().collect()
    }

    pub fn type_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.lock().by_type.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn has_type(&self, type_name: &str) -> bool {
        self.inner.lock().by_type.contains_key(type_name)
    }

    pub fn factory(&self, id: ComponentId) -> Option<Factory> {
        self.inner.lock().factories.get(&id).copied()
    }

    /// Fresh instance with refcount 1, viewing `IBase`.
    pub fn create_component(&self, id: ComponentId) -> Result<ComponentRef, ComponentError> {
        let factory = self
            .factory(id)
            .ok_or(ComponentError::UnknownComponent(id))?;
        let object = (factory.create)();
        Ok(ComponentRef::with_tracker(
            object,
            factory.required,
            self.tracker.clone(),
        ))
    }

    /// Create by type name and apply `config`. The instance is released
    /// again if configuration fails.
    pub fn create_by_type(&self, type_name: &str, config: &Value) -> Result<ComponentRef, ComponentError> {
        let id = self
            .inner
            .lock()
            .by_type
            .get(type_name)
            .copied()
            .ok_or_else(|| ComponentError::UnknownType(type_name.to_string()))?;
        let component = self.create_component(id)?;
        if let Err(e) = component.configure(config) {
            let _ = component.release();
            return Err(e);
        }
        Ok(component)
    }
}

fn resolve_plugin_path(path: &Path) -> Result<PathBuf, ComponentError> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Ok(roots) = std::env::var(PLUGIN_PATH_ENV) {
            for root in roots.split(':').filter(|r| !r.is_empty()) {
                let candidate = Path::new(root).join(path);
                if candidate.is_file() {
                    return Ok(candidate);
                }
            }
        }
    }
    Err(ComponentError::FileNotFound(path.display().to_string()))
}

/// Reject files that are not a platform dynamic module before handing them
/// to the dynamic loader.
fn check_module_magic(path: &Path) -> Result<(), ComponentError> {
    let mut magic = [0u8; 4];
    let mut file =
        File::open(path).map_err(|_| ComponentError::FileNotFound(path.display().to_string()))?;
    if file.read_exact(&mut magic).is_err() {
        return Err(ComponentError::BadPlugin(format!(
            "{} is not a dynamic module",
            path.display()
        )));
    }
    let word = u32::from_le_bytes(magic);
    let is_module = magic == *b"\x7fELF"
        || matches!(word, 0xfeed_face | 0xfeed_facf | 0xcefa_edfe | 0xcffa_edfe | 0xbeba_feca)
        || magic[..2] == *b"MZ";
    if is_module {
        Ok(())
    } else {
        Err(ComponentError::BadPlugin(format!(
            "{} is not a dynamic module",
            path.display()
        )))
    }
}
