//! Factory table for the components shipped in this crate.

use std::sync::Arc;

use crate::blockdev::{FileBlockDevice, RamBlockDevice};
use crate::component::*;
use crate::composite::{CacheDevice, PartitionDevice, Raid0Device, Raid1Device};
use crate::kv::KvComponent;
use crate::service::IoService;

const BLOCK: &[InterfaceId] = &[IBLOCK_DEVICE];

static FACTORIES: [Factory; 8] = [
    Factory {
        component_id: RAM_BLOCK_DEVICE_ID,
        type_name: "block:ram",
        required: &[],
        create: || Arc::new(RamBlockDevice::new()),
    },
    Factory {
        component_id: FILE_BLOCK_DEVICE_ID,
        type_name: "block:file",
        required: &[],
        create: || Arc::new(FileBlockDevice::new()),
    },
    Factory {
        component_id: RAID0_ID,
        type_name: "raid0",
        required: BLOCK,
        create: || Arc::new(Raid0Device::default()),
    },
    Factory {
        component_id: RAID1_ID,
        type_name: "raid1",
        required: BLOCK,
        create: || Arc::new(Raid1Device::default()),
    },
    Factory {
        component_id: BLOCK_CACHE_ID,
        type_name: "cache",
        required: BLOCK,
        create: || Arc::new(CacheDevice::default()),
    },
    Factory {
        component_id: PARTITION_ID,
        type_name: "partition",
        required: BLOCK,
        create: || Arc::new(PartitionDevice::default()),
    },
    Factory {
        component_id: KV_STORE_ID,
        type_name: "kv",
        required: BLOCK,
        create: || Arc::new(KvComponent::new()),
    },
    Factory {
        component_id: IO_SERVICE_ID,
        type_name: "service",
        required: BLOCK,
        create: || Arc::new(IoService::new()),
    },
];

static TABLE: PluginTable = PluginTable::new(&FACTORIES);

pub fn tables() -> [&'static PluginTable; 1] {
    [&TABLE]
}
