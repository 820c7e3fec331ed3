use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{child_infos, virtual_info, Begin, ChildIo, FanOut, Kind, Router, Step};
use crate::blockdev::{BlockDevice, DeviceError, DeviceInfo, IoDescriptor, IoOp, IoStatus};
use crate::component::{ComponentId, RAID0_ID};

/// Exposed block -> (child index, child block).
pub fn raid0_map(lba: u64, stripe_blocks: u64, child_count: u64) -> (usize, u64) {
    let stripe = lba / stripe_blocks;
    let child = stripe % child_count;
    let child_lba = (stripe / child_count) * stripe_blocks + lba % stripe_blocks;
    (child as usize, child_lba)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Raid0Config {
    #[serde(default = "default_stripe")]
    pub stripe_blocks: u64,
}

fn default_stripe() -> u64 {
    8
}

impl Default for Raid0Config {
    fn default() -> Self {
        Raid0Config {
            stripe_blocks: default_stripe(),
        }
    }
}

pub struct Raid0Router {
    info: DeviceInfo,
    stripe_blocks: u64,
    children: u64,
}

impl Raid0Router {
    pub fn map(&self, lba: u64) -> (usize, u64) {
        raid0_map(lba, self.stripe_blocks, self.children)
    }
}

impl Router for Raid0Router {
    type Op = FanOut;

    fn info(&self) -> &DeviceInfo {
        &self.info
    }

    fn start(&self, desc: &IoDescriptor, io: &mut Vec<ChildIo>) -> Begin<FanOut> {
        if desc.op == IoOp::Flush {
            io.extend((0..self.children as usize).map(ChildIo::flush));
            return Begin::Wait(FanOut::new(io.len()));
        }
        let bs = self.info.block_size as usize;
        let mut lba = desc.lba;
        let mut left = desc.block_count as u64;
        let mut offset = 0usize;
        while left > 0 {
            let run = (self.stripe_blocks - lba % self.stripe_blocks).min(left);
            let (child, child_lba) = self.map(lba);
            io.push(ChildIo {
                child,
                op: desc.op,
                lba: child_lba,
                block_count: run as u32,
                offset,
            });
            lba += run;
            left -= run;
            offset += run as usize * bs;
        }
        Begin::Wait(FanOut::new(io.len()))
    }

    fn child_done(&self, op: &mut FanOut, _: &IoDescriptor, _: usize, status: IoStatus, _: &mut Vec<ChildIo>) -> Step {
        op.complete(status)
    }
}

pub struct Raid0;

impl Kind for Raid0 {
    type Config = Raid0Config;
    type Router = Raid0Router;
    const COMPONENT_ID: ComponentId = RAID0_ID;
    const NAME: &'static str = "raid0";
    const MIN_CHILDREN: usize = 2;
    const MAX_CHILDREN: usize = 64;

    fn build(config: &Raid0Config, children: &[Arc<dyn BlockDevice>], device_id: u64) -> Result<Raid0Router, DeviceError> {
        let stripe = config.stripe_blocks;
        if stripe == 0 || !stripe.is_power_of_two() {
            return Err(DeviceError::Invalid(format!(
                "stripe_blocks {stripe} must be a power of two"
            )));
        }
        let infos = child_infos(children)?;
        let smallest = infos.iter().map(|i| i.block_count).min().unwrap();
        // whole stripes only, so every exposed block maps to a real child block
        let per_child = smallest / stripe * stripe;
        if per_child == 0 {
            return Err(DeviceError::Invalid("children smaller than one stripe".into()));
        }
        Ok(Raid0Router {
            info: virtual_info(infos[0].block_size, per_child * infos.len() as u64, device_id),
            stripe_blocks: stripe,
            children: infos.len() as u64,
        })
    }
}
