//! First-order time estimates: compute blocks, embedding lookups and
//! bandwidth-only collective models over the intra/inter-node hierarchy.

use serde::{Deserialize, Serialize};

use crate::model::{CollectiveKind, DeviceSpec, Level, SystemSpec};
use crate::plan::{CollectiveReq, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "collective")]
pub enum CostKind {
    Compute,
    Lookup,
    Collective(CollectiveKind),
}

impl CostKind {
    pub fn label(self) -> &'static str {
        match self {
            CostKind::Compute => "compute",
            CostKind::Lookup => "lookup",
            CostKind::Collective(k) => k.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostedEvent {
    pub source_layer: String,
    pub kind: CostKind,
    pub duration: f64,
    /// FLOPs for compute, bytes otherwise.
    pub magnitude: f64,
    pub phase: Phase,
}

pub fn compute_time(flops: f64, device: &DeviceSpec) -> f64 {
    flops / (device.peak_flops * device.compute_utilization)
}

pub fn lookup_time(bytes: f64, device: &DeviceSpec) -> f64 {
    bytes / (device.hbm_bandwidth * device.hbm_utilization)
}

struct Hop {
    level: Level,
    participants: u64,
    bw: f64,
}

fn hop(system: &SystemSpec, level: Level) -> Hop {
    match level {
        Level::Intra => Hop {
            level,
            participants: system.devices_per_node,
            bw: system.intra_node_bw,
        },
        _ => Hop {
            level: Level::Inter,
            participants: system.num_nodes,
            bw: system.inter_node_bw,
        },
    }
}

fn ring_fraction(n: u64) -> f64 {
    (n as f64 - 1.0) / n as f64
}

fn with_latency(system: &SystemSpec, bytes: f64, t: f64) -> f64 {
    if bytes > 0.0 {
        t + system.collective_latency
    } else {
        0.0
    }
}

/// Point-to-point based All2All: bound by the slowest interconnect the span
/// crosses.
pub fn all2all_time(send_bytes_per_device: f64, system: &SystemSpec, span: Level) -> f64 {
    let level = match span {
        Level::Intra => Level::Intra,
        Level::Inter => Level::Inter,
        Level::Global if system.num_nodes > 1 => Level::Inter,
        Level::Global => Level::Intra,
    };
    let h = hop(system, level);
    let eff = system.efficiency(CollectiveKind::All2All, h.level, send_bytes_per_device);
    with_latency(system, send_bytes_per_device, send_bytes_per_device / (h.bw * eff))
}

/// Ring time for moving `(n-1)/n * full_bytes * passes` on one level.
fn ring_phase(system: &SystemSpec, kind: CollectiveKind, level: Level, full_bytes: f64, passes: f64) -> f64 {
    let h = hop(system, level);
    if h.participants <= 1 || full_bytes <= 0.0 {
        return 0.0;
    }
    let eff = system.efficiency(kind, h.level, full_bytes);
    passes * ring_fraction(h.participants) * full_bytes / (h.bw * eff)
}

/// Ring AllReduce of a `buffer_bytes` buffer. A global span runs the
/// intra-node ring and then the inter-node ring, each over the full buffer.
pub fn allreduce_time(buffer_bytes: f64, system: &SystemSpec, span: Level) -> f64 {
    let k = CollectiveKind::AllReduce;
    let t = match span {
        Level::Intra | Level::Inter => ring_phase(system, k, span, buffer_bytes, 2.0),
        Level::Global => {
            ring_phase(system, k, Level::Intra, buffer_bytes, 2.0) + ring_phase(system, k, Level::Inter, buffer_bytes, 2.0)
        }
    };
    with_latency(system, buffer_bytes, t)
}

fn gather_like(kind: CollectiveKind, shard_bytes: f64, system: &SystemSpec, span: Level) -> f64 {
    let t = match span {
        Level::Intra | Level::Inter => {
            let n = hop(system, span).participants as f64;
            ring_phase(system, kind, span, shard_bytes * n, 1.0)
        }
        Level::Global => {
            let nodes = system.num_nodes as f64;
            ring_phase(system, kind, Level::Inter, shard_bytes * nodes, 1.0)
                + ring_phase(system, kind, Level::Intra, shard_bytes * system.total_devices() as f64, 1.0)
        }
    };
    with_latency(system, shard_bytes, t)
}

/// Ring AllGather where each participant contributes `shard_bytes`.
pub fn allgather_time(shard_bytes: f64, system: &SystemSpec, span: Level) -> f64 {
    gather_like(CollectiveKind::AllGather, shard_bytes, system, span)
}

/// Ring ReduceScatter leaving each participant with `shard_bytes`.
pub fn reducescatter_time(shard_bytes: f64, system: &SystemSpec, span: Level) -> f64 {
    gather_like(CollectiveKind::ReduceScatter, shard_bytes, system, span)
}

pub fn collective_time(req: &CollectiveReq, system: &SystemSpec) -> f64 {
    match req.kind {
        CollectiveKind::All2All => all2all_time(req.bytes_per_device, system, req.level),
        CollectiveKind::AllReduce => allreduce_time(req.bytes_per_device, system, req.level),
        CollectiveKind::AllGather => allgather_time(req.bytes_per_device, system, req.level),
        CollectiveKind::ReduceScatter => reducescatter_time(req.bytes_per_device, system, req.level),
    }
}

pub fn cost_collective(req: &CollectiveReq, system: &SystemSpec) -> CostedEvent {
    CostedEvent {
        source_layer: req.source_layer.clone(),
        kind: CostKind::Collective(req.kind),
        duration: collective_time(req, system),
        magnitude: req.bytes_per_device,
        phase: req.phase,
    }
}
