//! Access tracking for the region-parallel phases.

use std::sync::Mutex;

use crate::model::region_of;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Jacobian,
    Head,
    RegionBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resource {
    /// Forward cache of a region.
    Cache(usize),
    /// Parameters owned by a region. The initial projection belongs to
    /// region 0, the head to the last region.
    Params(usize),
    /// Interface adjoint at a boundary.
    Adjoint(usize),
    /// Jacobian output slot of a region.
    JacobianSlot(usize),
    /// Parameter-gradient output slot of a region.
    GradSlot(usize),
    /// Per-region partial canvas adjoint.
    CanvasPartial(usize),
    /// The shared, read-only canvas.
    Canvas,
}

impl Resource {
    /// Region that owns the resource, `None` for shared inputs.
    pub fn owner(self) -> Option<usize> {
        match self {
            Resource::Cache(k)
            | Resource::Params(k)
            | Resource::JacobianSlot(k)
            | Resource::GradSlot(k)
            | Resource::CanvasPartial(k) => Some(k),
            // m̄_{k+1} is region k's output adjoint; m̄_0 feeds region 0's init path
            Resource::Adjoint(b) => Some(b.saturating_sub(1)),
            Resource::Canvas => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub task_region: usize,
    pub phase: Phase,
    pub resource: Resource,
    pub write: bool,
}

impl Access {
    pub fn crosses_regions(&self) -> bool {
        self.resource.owner().is_some_and(|o| o != self.task_region)
    }
}

pub trait AccessObserver: Sync {
    fn record(&self, access: Access);
}

/// Collects every access in arrival order.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<Vec<Access>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<Access> {
        self.entries.lock().expect("access log poisoned").clone()
    }

    pub fn cross_region(&self) -> Vec<Access> {
        self.entries().into_iter().filter(Access::crosses_regions).collect()
    }
}

impl AccessObserver for AccessLog {
    fn record(&self, access: Access) {
        self.entries.lock().expect("access log poisoned").push(access);
    }
}

/// Region owning a parameter name in a model with `regions` regions.
pub(crate) fn param_owner(name: &str, regions: usize) -> usize {
    if let Some(k) = region_of(name) {
        k
    } else if name.starts_with("head.") {
        regions - 1
    } else {
        0
    }
}

/// Thin wrapper that forwards to an optional observer.
#[derive(Clone, Copy)]
pub(crate) struct Tracker<'a> {
    pub observer: Option<&'a dyn AccessObserver>,
    pub task_region: usize,
    pub phase: Phase,
}

impl<'a> Tracker<'a> {
    pub(crate) fn read(&self, resource: Resource) {
        self.log(resource, false);
    }

    pub(crate) fn write(&self, resource: Resource) {
        self.log(resource, true);
    }

    fn log(&self, resource: Resource, write: bool) {
        if let Some(o) = self.observer {
            o.record(Access { task_region: self.task_region, phase: self.phase, resource, write });
        }
    }
}
