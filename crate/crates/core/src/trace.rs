//! Per-device compute and communication streams for one representative
//! device. Every device runs the same trace under even sharding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{collective_time, compute_time, lookup_time, CostKind};
use crate::error::{Error, Result};
use crate::model::{embedding_lookup_bytes, layer_fwd_flops, CollectiveKind, LayerKind, ModelArch, SystemSpec, TaskSpec};
use crate::plan::{layer_roles, required_collectives, validate_plan, CollectiveReq, Infeasibility, ParallelPlan, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Forward,
    Lookup,
    InputGrad,
    WeightGrad,
    /// Sparse embedding update in the backward pass.
    Update,
    Collective(CollectiveKind),
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Forward => "fwd",
            Op::Lookup => "lookup",
            Op::InputGrad => "input_grad",
            Op::WeightGrad => "weight_grad",
            Op::Update => "update",
            Op::Collective(k) => k.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub layer: String,
    pub unit: u64,
    pub phase: Phase,
    pub op: Op,
}

impl EventLabel {
    pub fn name(&self) -> String {
        let phase = match self.phase {
            Phase::Forward => "f",
            Phase::Backward => "b",
        };
        format!("{}_{}_{}_{}", self.layer, self.unit, phase, self.op.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub stream: Stream,
    pub duration: f64,
    pub deps: Vec<usize>,
    /// Communication only: some compute event waits on this.
    pub blocking: bool,
    pub kind: CostKind,
    /// FLOPs or bytes behind `duration`.
    pub magnitude: f64,
    pub label: EventLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub events: Vec<Event>,
    pub compute_order: Vec<usize>,
    pub comm_order: Vec<usize>,
}

impl DeviceTrace {
    pub fn order(&self, stream: Stream) -> &[usize] {
        match stream {
            Stream::Compute => &self.compute_order,
            Stream::Comm => &self.comm_order,
        }
    }

    /// Sum of all durations: the fully serialized iteration.
    pub fn serialized_time(&self) -> f64 {
        self.events.iter().map(|e| e.duration).sum()
    }

    pub fn comm_time(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.stream == Stream::Comm)
            .map(|e| e.duration)
            .sum()
    }

    /// Builds a trace with each stream issued in id order.
    pub fn from_events(events: Vec<Event>) -> Self {
        let order = |s| events.iter().filter(|e| e.stream == s).map(|e| e.id).collect();
        DeviceTrace {
            compute_order: order(Stream::Compute),
            comm_order: order(Stream::Comm),
            events,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseStep {
    pub layer: String,
    pub phase: Phase,
    /// Backward only: weight gradients are produced.
    pub weight_grad: bool,
}

pub fn build_execution_order(model: &ModelArch, task: &TaskSpec) -> Vec<PhaseStep> {
    let mut steps: Vec<PhaseStep> = model
        .execution_order
        .iter()
        .map(|id| PhaseStep {
            layer: id.clone(),
            phase: Phase::Forward,
            weight_grad: false,
        })
        .collect();
    if task.kind.has_backward() {
        steps.extend(model.execution_order.iter().rev().map(|id| PhaseStep {
            layer: id.clone(),
            phase: Phase::Backward,
            weight_grad: !task.is_frozen(id),
        }));
    }
    steps
}

struct Builder {
    events: Vec<Event>,
    /// Dependencies used once FSDP prefetching is enabled.
    prefetch_deps: BTreeMap<usize, Vec<usize>>,
    /// Compute events closing each unit that gathered parameters.
    anchors: Vec<usize>,
    gathered: bool,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        stream: Stream,
        kind: CostKind,
        duration: f64,
        magnitude: f64,
        deps: Vec<usize>,
        blocking: bool,
        label: EventLabel,
    ) -> usize {
        let id = self.events.len();
        let mut deps = deps;
        deps.sort_unstable();
        deps.dedup();
        self.events.push(Event {
            id,
            stream,
            duration,
            deps,
            blocking,
            kind,
            magnitude,
            label,
        });
        id
    }

    fn collective(&mut self, req: &CollectiveReq, units: u64, unit: u64, system: &SystemSpec, deps: Vec<usize>) -> usize {
        let mut per_unit = req.clone();
        per_unit.bytes_per_device /= units as f64;
        let duration = collective_time(&per_unit, system);
        self.push(
            Stream::Comm,
            CostKind::Collective(req.kind),
            duration,
            per_unit.bytes_per_device,
            deps,
            req.blocking,
            EventLabel {
                layer: req.source_layer.clone(),
                unit,
                phase: req.phase,
                op: Op::Collective(req.kind),
            },
        )
    }

    fn close_unit(&mut self, compute: usize) {
        if std::mem::take(&mut self.gathered) {
            self.anchors.push(compute);
        }
    }

    /// Parameter gather for the next unit: issued when the previous gathered
    /// unit closes, or one such unit earlier when prefetching.
    fn gather(&mut self, req: &CollectiveReq, units: u64, unit: u64, system: &SystemSpec) -> usize {
        let base: Vec<usize> = self.anchors.last().copied().into_iter().collect();
        let early: Vec<usize> = match self.anchors.len() {
            n if n >= 2 => vec![self.anchors[n - 2]],
            _ => vec![],
        };
        let id = self.collective(req, units, unit, system, base);
        self.prefetch_deps.insert(id, early);
        self.gathered = true;
        id
    }
}

/// Where a collective attaches relative to a unit's compute.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    BeforeCompute,
    AfterCompute,
    AfterInputGrad,
    AfterWeightGrad,
}

fn slot(req: &CollectiveReq, is_moe: bool) -> Slot {
    use CollectiveKind::*;
    match (req.phase, req.kind) {
        (_, AllGather) => Slot::BeforeCompute,
        (Phase::Forward, All2All) if is_moe => Slot::BeforeCompute,
        (Phase::Forward, _) => Slot::AfterCompute,
        (Phase::Backward, ReduceScatter) => Slot::AfterWeightGrad,
        (Phase::Backward, AllReduce) if !req.blocking => Slot::AfterWeightGrad,
        (Phase::Backward, All2All) if !is_moe => Slot::BeforeCompute,
        (Phase::Backward, _) => Slot::AfterInputGrad,
    }
}

fn label(layer: &str, unit: u64, phase: Phase, op: Op) -> EventLabel {
    EventLabel {
        layer: layer.to_string(),
        unit,
        phase,
        op,
    }
}

/// Assembles the dependency-annotated streams for one iteration.
///
/// Compute is issued in the order its dependencies resolve with unlimited
/// resources; collectives in the order they become ready once that compute
/// order is serialized, those gating compute first on ties, then by creation
/// order. The order is fixed before
/// prefetch relaxes the gather dependencies, so prefetching can only move
/// events earlier.
pub fn build_streams(model: &ModelArch, plan: &ParallelPlan, task: &TaskSpec, system: &SystemSpec) -> Result<DeviceTrace> {
    build_streams_with(model, plan, task, system, true)
}

/// As [`build_streams`]; with `check_memory` off, plans that only fail the
/// memory-capacity check are still built.
pub fn build_streams_with(
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
    check_memory: bool,
) -> Result<DeviceTrace> {
    model.validate()?;
    task.validate(model)?;
    system.validate()?;
    match validate_plan(model, plan, task, system) {
        Ok(_) => {}
        Err(Infeasibility::OutOfMemory { .. }) if !check_memory => {}
        Err(e) => return Err(Error::Infeasible(e)),
    }

    let device = &system.device;
    let opts = &task.options;
    let ctx = task.context_length;
    let local_batch = task.local_batch(system);
    let roles = layer_roles(model, task);
    let producers = model.producers();
    let layers = model.ordered_layers();

    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, ps) in &producers {
        for p in ps {
            consumers.entry(*p).or_default().push(*id);
        }
    }

    let mut b = Builder {
        events: Vec::new(),
        prefetch_deps: BTreeMap::new(),
        anchors: Vec::new(),
        gathered: false,
    };
    let mut collectives = BTreeMap::new();
    for layer in &layers {
        let entry = plan.entry_for(layer).expect("validated plan covers every layer");
        let reqs = required_collectives(layer, entry, task, system, local_batch, roles[&layer.id], plan.fsdp_prefetch)?;
        collectives.insert(layer.id.as_str(), reqs);
    }

    // Forward.
    let mut fwd_out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for layer in &layers {
        let id = layer.id.as_str();
        let units = layer.units();
        let is_moe = matches!(layer.kind, LayerKind::Moe { .. });
        let reqs: Vec<&CollectiveReq> = collectives[id].iter().filter(|r| r.phase == Phase::Forward).collect();
        let flops = layer_fwd_flops(layer, local_batch, ctx)? / units as f64;
        let lookup = if layer.is_embedding() {
            embedding_lookup_bytes(layer, local_batch, ctx)? * opts.lookup_skew
        } else {
            0.0
        };

        let mut ready: Vec<usize> = producers[id].iter().flat_map(|p| fwd_out[p].clone()).collect();
        for unit in 0..units {
            let mut deps = ready.clone();
            for req in reqs.iter().filter(|r| slot(r, is_moe) == Slot::BeforeCompute) {
                let e = if req.kind == CollectiveKind::AllGather {
                    b.gather(req, units, unit, system)
                } else {
                    b.collective(req, units, unit, system, ready.clone())
                };
                if req.kind == CollectiveKind::AllGather || req.blocking {
                    deps.push(e);
                }
            }
            let mut last = None;
            if lookup > 0.0 {
                let e = b.push(
                    Stream::Compute,
                    CostKind::Lookup,
                    lookup_time(lookup, device),
                    lookup,
                    deps.clone(),
                    false,
                    label(id, unit, Phase::Forward, Op::Lookup),
                );
                last = Some(e);
            }
            if flops > 0.0 || last.is_none() {
                let mut d = deps.clone();
                d.extend(last);
                last = Some(b.push(
                    Stream::Compute,
                    CostKind::Compute,
                    compute_time(flops, device),
                    flops,
                    d,
                    false,
                    label(id, unit, Phase::Forward, Op::Forward),
                ));
            }
            let compute = last.expect("at least one compute event per unit");
            b.close_unit(compute);
            let mut out = vec![compute];
            for req in reqs.iter().filter(|r| slot(r, is_moe) == Slot::AfterCompute) {
                let e = b.collective(req, units, unit, system, vec![compute]);
                if req.blocking {
                    out.push(e);
                }
            }
            ready = out;
        }
        fwd_out.insert(id, ready);
    }

    // Backward, in reverse execution order.
    if task.kind.has_backward() {
        let terminal: Vec<usize> = layers
            .iter()
            .filter(|l| !consumers.contains_key(l.id.as_str()))
            .flat_map(|l| fwd_out[l.id.as_str()].clone())
            .collect();
        let mut bwd_out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for layer in layers.iter().rev() {
            let id = layer.id.as_str();
            let role = roles[id];
            if !role.trainable && !role.input_grad {
                continue;
            }
            let units = layer.units();
            let is_moe = matches!(layer.kind, LayerKind::Moe { .. });
            let reqs: Vec<&CollectiveReq> = collectives[id].iter().filter(|r| r.phase == Phase::Backward).collect();
            let bwd_flops = layer_fwd_flops(layer, local_batch, ctx)? / units as f64 * opts.backward_flops_multiplier;

            let mut grad_in: Vec<usize> = match consumers.get(id) {
                None => terminal.clone(),
                Some(cs) => cs.iter().flat_map(|c| bwd_out.get(c).cloned().unwrap_or_default()).collect(),
            };
            for unit in (0..units).rev() {
                let mut deps = grad_in.clone();
                let mut to_compute = Vec::new();
                for req in reqs.iter().filter(|r| slot(r, is_moe) == Slot::BeforeCompute) {
                    let e = if req.kind == CollectiveKind::AllGather {
                        b.gather(req, units, unit, system)
                    } else {
                        b.collective(req, units, unit, system, grad_in.clone())
                    };
                    if req.kind == CollectiveKind::AllGather {
                        deps.push(e);
                    } else {
                        to_compute.push(e);
                    }
                }
                deps.extend(to_compute);

                let mut input_grad = None;
                let mut weight_grad = None;
                if layer.is_embedding() {
                    if role.trainable {
                        let bytes = embedding_lookup_bytes(layer, local_batch, ctx)?
                            * opts.lookup_skew
                            * opts.embedding_backward_factor;
                        weight_grad = Some(b.push(
                            Stream::Compute,
                            CostKind::Lookup,
                            lookup_time(bytes, device),
                            bytes,
                            deps.clone(),
                            false,
                            label(id, unit, Phase::Backward, Op::Update),
                        ));
                    }
                } else {
                    if role.input_grad {
                        let f = bwd_flops * opts.input_grad_fraction;
                        input_grad = Some(b.push(
                            Stream::Compute,
                            CostKind::Compute,
                            compute_time(f, device),
                            f,
                            deps.clone(),
                            false,
                            label(id, unit, Phase::Backward, Op::InputGrad),
                        ));
                    }
                    if role.trainable {
                        let f = bwd_flops * (1.0 - opts.input_grad_fraction);
                        weight_grad = Some(b.push(
                            Stream::Compute,
                            CostKind::Compute,
                            compute_time(f, device),
                            f,
                            deps.clone(),
                            false,
                            label(id, unit, Phase::Backward, Op::WeightGrad),
                        ));
                    }
                }
                if let Some(anchor) = weight_grad.or(input_grad) {
                    b.close_unit(anchor);
                }

                let mut out: Vec<usize> = input_grad.into_iter().collect();
                for req in reqs.iter().filter(|r| slot(r, is_moe) == Slot::AfterInputGrad) {
                    let d = input_grad.map_or_else(|| grad_in.clone(), |e| vec![e]);
                    let e = b.collective(req, units, unit, system, d);
                    if req.blocking && input_grad.is_some() {
                        out.push(e);
                    }
                }
                if let Some(wg) = weight_grad {
                    for req in reqs.iter().filter(|r| slot(r, is_moe) == Slot::AfterWeightGrad) {
                        b.collective(req, units, unit, system, vec![wg]);
                    }
                }
                grad_in = out;
            }
            bwd_out.insert(id, grad_in);
        }
    }

    let mut trace = DeviceTrace::from_events(b.events);
    let est = earliest_starts(&trace.events);
    trace.compute_order.sort_by(|&x, &y| est[x].total_cmp(&est[y]).then(x.cmp(&y)));
    let ready = comm_ready_times(&trace.events, &trace.compute_order);
    let mut gates = vec![false; trace.events.len()];
    for e in trace.events.iter().filter(|e| e.stream == Stream::Compute) {
        for &d in &e.deps {
            gates[d] = true;
        }
    }
    trace.comm_order.sort_by(|&x, &y| {
        ready[x]
            .total_cmp(&ready[y])
            .then(gates[y].cmp(&gates[x]))
            .then(x.cmp(&y))
    });
    if plan.fsdp_prefetch {
        for (id, deps) in b.prefetch_deps {
            trace.events[id].deps = deps;
        }
    }
    Ok(trace)
}

/// Time each communication event's dependencies resolve when compute runs
/// serially in `compute_order` and communication is unconstrained.
fn comm_ready_times(events: &[Event], compute_order: &[usize]) -> Vec<f64> {
    let mut end: Vec<Option<f64>> = vec![None; events.len()];
    let mut ready = vec![0.0f64; events.len()];
    let deps_end = |e: &Event, end: &[Option<f64>]| e.deps.iter().try_fold(0.0f64, |acc, &d| end[d].map(|t| acc.max(t)));
    let (mut head, mut free) = (0, 0.0f64);
    loop {
        let mut progressed = false;
        for e in events.iter().filter(|e| e.stream == Stream::Comm) {
            if end[e.id].is_some() {
                continue;
            }
            if let Some(t) = deps_end(e, &end) {
                ready[e.id] = t;
                end[e.id] = Some(t + e.duration);
                progressed = true;
            }
        }
        while let Some(&id) = compute_order.get(head) {
            let Some(t) = deps_end(&events[id], &end) else { break };
            free = free.max(t) + events[id].duration;
            end[id] = Some(free);
            head += 1;
            progressed = true;
        }
        if !progressed {
            return ready;
        }
    }
}

/// Earliest start of each event with unlimited streams. Events must be
/// listed in a topological order (dependencies on lower ids only).
fn earliest_starts(events: &[Event]) -> Vec<f64> {
    let mut est = vec![0.0f64; events.len()];
    for e in events {
        est[e.id] = e
            .deps
            .iter()
            .map(|&d| est[d] + events[d].duration)
            .fold(0.0, f64::max);
    }
    est
}
