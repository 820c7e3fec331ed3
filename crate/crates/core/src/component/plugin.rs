use std::sync::Arc;

use super::{Component, ComponentId, InterfaceId};

/// Exported entry-point symbol of a plugin module.
pub const PLUGIN_ENTRY_SYMBOL: &str = "comanche_factory_v1";

/// Bumped whenever [`PluginTable`] or [`Factory`] change layout.
pub const PLUGIN_ABI_VERSION: u32 = 1;

/// Signature of the exported entry point.
pub type PluginEntry = fn() -> &'static PluginTable;

/// Versioned factory table returned by a plugin's entry point.
///
/// `abi_version` is the first field so a host can reject an incompatible
/// module before touching anything else. Plugins link their own copy of this
/// crate, so `core_version` must match the host exactly.
#[repr(C)]
pub struct PluginTable {
    pub abi_version: u32,
    pub core_version: &'static str,
    pub factories: &'static [Factory],
}

#[derive(Clone, Copy)]
pub struct Factory {
    pub component_id: ComponentId,
    /// Type name used by stack configurations, e.g. `block:file`.
    pub type_name: &'static str,
    /// Interfaces every dependency bound to this component must implement.
    pub required: &'static [InterfaceId],
    pub create: fn() -> Arc<dyn Component>,
}

impl std::fmt::Debug for Factory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factory")
            .field("component_id", &self.component_id)
            .field("type_name", &self.type_name)
            .finish()
    }
}

impl PluginTable {
    pub const fn new(factories: &'static [Factory]) -> PluginTable {
        PluginTable {
            abi_version: PLUGIN_ABI_VERSION,
            core_version: env!("CARGO_PKG_VERSION"),
            factories,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.abi_version != PLUGIN_ABI_VERSION {
            return Err(format!(
                "plugin ABI version {} does not match host version {PLUGIN_ABI_VERSION}",
                self.abi_version
            ));
        }
        if self.core_version != env!("CARGO_PKG_VERSION") {
            return Err(format!(
                "plugin built against core {} but host is {}",
                self.core_version,
                env!("CARGO_PKG_VERSION")
            ));
        }
        if self.factories.is_empty() {
            return Err("plugin exports no factories".into());
        }
        Ok(())
    }
}

/// Export a factory table from a plugin crate built as a `cdylib`.
#[macro_export]
macro_rules! declare_plugin {
    ($table:expr) => {
        #[no_mangle]
        pub fn comanche_factory_v1() -> &'static $crate::component::PluginTable {
            &$table
        }
    };
}
