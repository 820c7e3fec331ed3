//! The file-backed block device as a loadable module.
//!
//! Build with `cargo build -p plugin-blockdev-file`; the host loads the
//! resulting shared object with `Registry::load_plugin`, after which the
//! `block:file` type resolves to the factory below.

use std::sync::Arc;

use comanche_core::blockdev::FileBlockDevice;
use comanche_core::component::{Factory, PluginTable, FILE_BLOCK_DEVICE_ID};
use comanche_core::declare_plugin;

static FACTORIES: [Factory; 1] = [Factory {
    component_id: FILE_BLOCK_DEVICE_ID,
    type_name: "block:file",
    required: &[],
    create: || Arc::new(FileBlockDevice::new()),
}];

pub static TABLE: PluginTable = PluginTable::new(&FACTORIES);

declare_plugin!(TABLE);
