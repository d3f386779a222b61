//! Per-thread invocation counters for the 3D branch.
//!
//! Retrieval must never touch the point-cloud encoder or the expert block;
//! these counters let callers prove it. They are thread-local so concurrent
//! tests do not observe each other.

use std::cell::Cell;

thread_local! {
    static POINTCLOUD_ENCODES: Cell<usize> = const { Cell::new(0) };
    static MME_FORWARDS: Cell<usize> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BranchCounts {
    pub pointcloud_encodes: usize,
    pub mme_forwards: usize,
}

impl BranchCounts {
    pub fn since(self, earlier: BranchCounts) -> BranchCounts {
        BranchCounts {
            pointcloud_encodes: self.pointcloud_encodes - earlier.pointcloud_encodes,
            mme_forwards: self.mme_forwards - earlier.mme_forwards,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.pointcloud_encodes == 0 && self.mme_forwards == 0
    }
}

pub(crate) fn record_pointcloud_encode() {
    POINTCLOUD_ENCODES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_mme_forward() {
    MME_FORWARDS.with(|c| c.set(c.get() + 1));
}

pub fn snapshot() -> BranchCounts {
    BranchCounts {
        pointcloud_encodes: POINTCLOUD_ENCODES.with(Cell::get),
        mme_forwards: MME_FORWARDS.with(Cell::get),
    }
}
