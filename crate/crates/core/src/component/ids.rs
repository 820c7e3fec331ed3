use std::fmt;

use uuid::{uuid, Uuid};

/// Names an interface contract. The method set behind an id never changes;
/// a new method set gets a new id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InterfaceId(Uuid);

/// Names a component implementation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId(Uuid);

impl InterfaceId {
    pub const fn from_uuid(uuid: Uuid) -> Self {
        InterfaceId(uuid)
    }

    pub fn as_uuid(&self) -> Uuid {
        self.0
    }
}

impl ComponentId {
    pub const fn from_uuid(uuid: Uuid) -> Self {
        ComponentId(uuid)
    }

    pub fn as_uuid(&self) -> Uuid {
        self.0
    }
}

impl fmt::Display for InterfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match *self {
            IBASE => "IBase",
            IBLOCK_DEVICE => "IBlock_device",
            IZEROCOPY_MEMORY => "IZerocopy_memory",
            IKVSTORE => "IKVStore",
            IDEVICE_DIAGNOSTICS => "IDevice_diagnostics",
            _ => return write!(f, "{{{}}}", self.0),
        };
        write!(f, "{name}")
    }
}

impl fmt::Debug for InterfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InterfaceId({self})")
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.0)
    }
}

impl fmt::Debug for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComponentId({})", self.0)
    }
}

pub const IBASE: InterfaceId = InterfaceId(uuid!("17471751-7d1c-42c5-b88c-3e6a7633313c"));
pub const IBLOCK_DEVICE: InterfaceId =
    InterfaceId(uuid!("2357f4c1-3ba7-4384-91b5-d7ba8c10bdc3"));
pub const IZEROCOPY_MEMORY: InterfaceId =
    InterfaceId(uuid!("463fb09f-39d1-413f-9721-db86b33cac8a"));
pub const IKVSTORE: InterfaceId = InterfaceId(uuid!("8b7aac2a-f926-4c76-95e5-822d800792a2"));
/// Fault injection, op counters and the zero-copy audit log of leaf devices.
pub const IDEVICE_DIAGNOSTICS: InterfaceId =
    InterfaceId(uuid!("e7c2d41b-6416-4ebe-8df0-4a4591d6a2df"));

pub const RAM_BLOCK_DEVICE_ID: ComponentId =
    ComponentId(uuid!("6a9e3c8d-8397-455b-9bb1-41d585f00f89"));
pub const FILE_BLOCK_DEVICE_ID: ComponentId =
    ComponentId(uuid!("39b95c5d-4384-41d7-8b83-57ff9c6456b6"));
pub const RAID0_ID: ComponentId = ComponentId(uuid!("b2a718f2-a5eb-47f6-b50e-1a561b485ed9"));
pub const RAID1_ID: ComponentId = ComponentId(uuid!("8cdbd9ef-de2c-4244-a029-1c971b0eb40a"));
pub const BLOCK_CACHE_ID: ComponentId =
    ComponentId(uuid!("aae91e0e-d42c-41f2-bfed-52d02163ec0d"));
pub const PARTITION_ID: ComponentId = ComponentId(uuid!("3e8dfada-d318-4e96-980b-8a9b63f75a21"));
pub const KV_STORE_ID: ComponentId = ComponentId(uuid!("f9ce7ed8-ebf1-4e5b-8c5e-689e152a194a"));
pub const IO_SERVICE_ID: ComponentId =
    ComponentId(uuid!("0834f971-52c7-4a05-854a-93df3123c7b1"));
