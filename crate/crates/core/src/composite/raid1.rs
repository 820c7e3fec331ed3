use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{child_infos, virtual_info, Begin, ChildIo, FanOut, Kind, Router, Step};
use crate::blockdev::{BlockDevice, DeviceError, DeviceInfo, IoDescriptor, IoOp, IoStatus};
use crate::component::{ComponentId, RAID1_ID};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Raid1Config {}

pub enum MirrorOp {
    Fan(FanOut),
    Read { first: usize, tried: usize },
}

pub struct Raid1Router {
    info: DeviceInfo,
    mirrors: usize,
    next_read: AtomicUsize,
}

impl Raid1Router {
    fn read_io(&self, desc: &IoDescriptor, child: usize) -> ChildIo {
        ChildIo {
            child,
            op: IoOp::Read,
            lba: desc.lba,
            block_count: desc.block_count,
            offset: 0,
        }
    }
}

impl Router for Raid1Router {
    type Op = MirrorOp;

    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn start(&self, desc: &IoDescriptor, io: &mut Vec<ChildIo>) -> Begin<MirrorOp> {
        match desc.op {
            IoOp::Read => {
                let first = self.next_read.fetch_add(1, Ordering::Relaxed) % self.mirrors;
                io.push(self.read_io(desc, first));
                Begin::Wait(MirrorOp::Read { first, tried: 1 })
            }
            IoOp::Write => {
                io.extend((0..self.mirrors).map(|child| ChildIo {
                    child,
                    op: IoOp::Write,
                    lba: desc.lba,
                    block_count: desc.block_count,
                    offset: 0,
                }));
                Begin::Wait(MirrorOp::Fan(FanOut::new(self.mirrors)))
            }
            IoOp::Flush => {
                io.extend((0..self.mirrors).map(ChildIo::flush));
                Begin::Wait(MirrorOp::Fan(FanOut::new(self.mirrors)))
            }
        }
    }

    fn child_done(
        &self,
        op: &mut MirrorOp,
        desc: &IoDescriptor,
        _child: usize,
        status: IoStatus,
        io: &mut Vec<ChildIo>,
    ) -> Step {
        match op {
            MirrorOp::Fan(fan) => fan.complete(status),
            MirrorOp::Read { first, tried } => {
                if status == IoStatus::Io && *tried < self.mirrors {
                    io.push(self.read_io(desc, (*first + *tried) % self.mirrors));
                    *tried += 1;
                    Step::Wait
                } else {
                    Step::Done(status)
                }
            }
        }
    }
}

pub struct Raid1;

impl Kind for Raid1 {
    type Config = Raid1Config;
    type Router = Raid1Router;
    const COMPONENT_ID: ComponentId = RAID1_ID;
    const NAME: &'static str = "raid1";
    const MIN_CHILDREN: usize = 2;
    const MAX_CHILDREN: usize = 16;

    fn build(_: &Raid1Config, children: &[Arc<dyn BlockDevice>], device_id: u64) -> Result<Raid1Router, DeviceError> {
        let infos = child_infos(children)?;
        let blocks = infos.iter().map(|i| i.block_count).min().unwrap();
        Ok(Raid1Router {
            info: virtual_info(infos[0].block_size, blocks, device_id),
            mirrors: infos.len(),
            next_read: AtomicUsize::new(0),
        })
    }
}
