//! Workload metrics over simulated timelines and exhaustive search of the
//! hierarchical parallelization space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scale_hardware, DeviceSpec, HardwareComponent, HardwareScaling, ModelArch, SystemSpec, TaskSpec, WorkUnit};
use crate::plan::{per_device_memory, validate_plan, Infeasibility, MemoryFootprint, ParallelPlan, PlanEntry, Strategy};
use crate::sim::{exposed_comm, simulate, Timeline};
use crate::trace::{build_streams_with, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub plan: String,
    pub overlapped_iter_time: f64,
    pub serialized_iter_time: f64,
    pub throughput: f64,
    /// `samples_per_s` or `tokens_per_s`.
    pub throughput_unit: String,
    pub compute_time: f64,
    pub comm_time: f64,
    pub exposed_comm_time: f64,
    /// Exposed share of total communication time.
    pub exposed_comm_fraction: f64,
    /// Serialized time per cost label (compute, lookup, collectives).
    pub serialized_breakdown: BTreeMap<String, f64>,
    /// Communication time per collective kind.
    pub collective_breakdown: BTreeMap<String, f64>,
    pub exposed_breakdown: BTreeMap<String, f64>,
    pub memory: MemoryFootprint,
    pub normalized_gpu_hours_per_unit_work: f64,
}

impl ReportSummary {
    /// Millions of samples per second.
    pub fn mqps(&self) -> f64 {
        self.throughput / 1e6
    }
}

pub fn throughput_unit(task: &TaskSpec) -> &'static str {
    match task.work_unit {
        WorkUnit::Samples => "samples_per_s",
        WorkUnit::Tokens => "tokens_per_s",
    }
}

/// Metrics for a simulated iteration. `reference_peak` defaults to the
/// device's own peak.
pub fn summarize(
    timeline: &Timeline,
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
    reference_peak: Option<f64>,
) -> Result<ReportSummary> {
    let memory = per_device_memory(model, plan, task, system)?;
    let mut serialized_breakdown = BTreeMap::new();
    let mut collective_breakdown = BTreeMap::new();
    for e in &timeline.events {
        *serialized_breakdown.entry(e.kind.label().to_string()).or_insert(0.0) += e.duration();
        if e.stream == Stream::Comm {
            *collective_breakdown.entry(e.kind.label().to_string()).or_insert(0.0) += e.duration();
        }
    }
    let exposed = exposed_comm(timeline);
    let comm_time = timeline.stream_time(Stream::Comm);
    let t = timeline.makespan;
    let work = task.work_per_iteration();
    let throughput = if t > 0.0 { work / t } else { f64::INFINITY };
    let device_hours = t * system.total_devices() as f64 / 3600.0;
    let peak = reference_peak.unwrap_or(system.device.peak_flops);
    Ok(ReportSummary {
        plan: plan.name(),
        overlapped_iter_time: t,
        serialized_iter_time: serialized_breakdown.values().sum(),
        throughput,
        throughput_unit: throughput_unit(task).into(),
        compute_time: timeline.stream_time(Stream::Compute),
        comm_time,
        exposed_comm_time: exposed.total,
        exposed_comm_fraction: if comm_time > 0.0 { exposed.total / comm_time } else { 0.0 },
        serialized_breakdown,
        collective_breakdown,
        exposed_breakdown: exposed.by_collective.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
        memory,
        normalized_gpu_hours_per_unit_work: normalized_gpu_hours(device_hours / work, &system.device, peak),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDuration {
    pub iterations: f64,
    pub days: f64,
    pub device_hours: f64,
}

/// Wall-clock and aggregate device time over `task.total_work`.
pub fn training_duration(summary: &ReportSummary, task: &TaskSpec, system: &SystemSpec) -> Result<TrainingDuration> {
    let work = task
        .total_work
        .ok_or_else(|| Error::invalid("task", "total_work is required for a duration estimate"))?;
    Ok(duration_for_steps(summary, work / task.work_per_iteration(), system))
}

pub fn duration_for_steps(summary: &ReportSummary, iterations: f64, system: &SystemSpec) -> TrainingDuration {
    let days = iterations * summary.overlapped_iter_time / 86400.0;
    TrainingDuration {
        iterations,
        days,
        device_hours: days * 24.0 * system.total_devices() as f64,
    }
}

pub fn normalized_gpu_hours(device_hours: f64, device: &DeviceSpec, reference_peak: f64) -> f64 {
    device_hours * device.peak_flops / reference_peak
}

/// Candidate entries per layer type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyDomain(pub BTreeMap<String, Vec<PlanEntry>>);

impl StrategyDomain {
    /// Every (intra, inter) pair drawn from `strategies`.
    pub fn product(strategies: &[Strategy]) -> Vec<PlanEntry> {
        strategies
            .iter()
            .flat_map(|&a| strategies.iter().map(move |&b| PlanEntry::new(a, b)))
            .collect()
    }
}

/// Excludes entries matching every set field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter: Option<Strategy>,
}

impl Exclusion {
    fn matches(&self, layer_type: &str, e: PlanEntry) -> bool {
        self.layer_type.as_deref().is_none_or(|t| t == layer_type)
            && self.intra.is_none_or(|s| s == e.intra)
            && self.inter.is_none_or(|s| s == e.inter)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
    /// Keep plans that only fail the memory check.
    #[serde(default)]
    pub ignore_memory: bool,
    #[serde(default)]
    pub fsdp_prefetch: bool,
}

/// Cartesian product of the domain in key order, minus excluded and
/// structurally invalid plans. Plans over capacity are dropped unless
/// `ignore_memory` is set.
pub fn enumerate_plans(
    model: &ModelArch,
    system: &SystemSpec,
    task: &TaskSpec,
    domain: &StrategyDomain,
    constraints: &Constraints,
) -> Result<Vec<ParallelPlan>> {
    let mut axes: Vec<(&String, Vec<PlanEntry>)> = Vec::new();
    for (t, entries) in &domain.0 {
        let kept: Vec<PlanEntry> = entries
            .iter()
            .copied()
            .filter(|&e| !constraints.exclude.iter().any(|x| x.matches(t, e)))
            .collect();
        axes.push((t, kept));
    }
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::EmptyDomain);
    }
    let mut plans = vec![ParallelPlan {
        fsdp_prefetch: constraints.fsdp_prefetch,
        ..ParallelPlan::new()
    }];
    for (t, entries) in &axes {
        plans = plans
            .iter()
            .flat_map(|p| entries.iter().map(move |&e| p.clone().with(t, e)))
            .collect();
    }
    plans.retain(|p| match validate_plan(model, p, task, system) {
        Ok(_) => true,
        Err(Infeasibility::OutOfMemory { .. }) => constraints.ignore_memory,
        Err(Infeasibility::Structural { .. }) => false,
    });
    Ok(plans)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Throughput,
    GpuHours,
    Exposed,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "throughput" => Ok(Objective::Throughput),
            "gpu-hours" => Ok(Objective::GpuHours),
            "exposed" => Ok(Objective::Exposed),
            _ => Err(Error::invalid("objective", format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plan: ParallelPlan,
    pub feasible: bool,
    /// Present whenever the plan was simulated.
    pub summary: Option<ReportSummary>,
    pub memory: MemoryFootprint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasibility: Option<Infeasibility>,
}

/// Simulates one plan. With `check_memory` off, an over-capacity plan is
/// still timed but reported infeasible.
pub fn evaluate_plan(
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
    reference_peak: Option<f64>,
    check_memory: bool,
) -> Result<PlanResult> {
    let memory = per_device_memory(model, plan, task, system)?;
    let infeasibility = validate_plan(model, plan, task, system).err();
    let timed = match &infeasibility {
        None => true,
        Some(Infeasibility::OutOfMemory { .. }) => !check_memory,
        Some(Infeasibility::Structural { .. }) => false,
    };
    let summary = if timed {
        let trace = build_streams_with(model, plan, task, system, false)?;
        let timeline = simulate(&trace)?;
        Some(summarize(&timeline, model, plan, task, system, reference_peak)?)
    } else {
        None
    };
    Ok(PlanResult {
        plan: plan.clone(),
        feasible: infeasibility.is_none(),
        summary,
        memory,
        infeasibility,
    })
}

fn score(r: &PlanResult, objective: Objective) -> f64 {
    let Some(s) = &r.summary else {
        return f64::INFINITY;
    };
    match objective {
        Objective::Throughput => -s.throughput,
        Objective::GpuHours => s.normalized_gpu_hours_per_unit_work,
        Objective::Exposed => s.exposed_comm_fraction,
    }
}

/// Best first; ties by lower memory, then plan name.
pub fn rank(results: &mut [PlanResult], objective: Objective) {
    results.sort_by(|a, b| {
        score(a, objective)
            .total_cmp(&score(b, objective))
            .then(a.memory.total.total_cmp(&b.memory.total))
            .then_with(|| a.plan.name().cmp(&b.plan.name()))
    });
}

/// Evaluates every enumerated plan in parallel and ranks them.
pub fn search_optimal(
    model: &ModelArch,
    system: &SystemSpec,
    task: &TaskSpec,
    domain: &StrategyDomain,
    constraints: &Constraints,
    objective: Objective,
    reference_peak: Option<f64>,
) -> Result<Vec<PlanResult>> {
    let plans = enumerate_plans(model, system, task, domain, constraints)?;
    if plans.is_empty() {
        return Err(Error::NoFeasiblePlan { evaluated: 0 });
    }
    let mut results = plans
        .par_iter()
        .map(|p| evaluate_plan(model, p, task, system, reference_peak, !constraints.ignore_memory))
        .collect::<Result<Vec<_>>>()?;
    if !results.iter().any(|r| r.summary.is_some()) {
        return Err(Error::NoFeasiblePlan { evaluated: results.len() });
    }
    rank(&mut results, objective);
    Ok(results)
}

/// Indices of the non-dominated points when minimizing `x` and maximizing
/// `y`, sorted by `x` then descending `y`, ties by index.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let dominates = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1);
    let mut keep: Vec<usize> = (0..points.len())
        .filter(|&i| !points.iter().any(|&p| dominates(p, points[i])))
        .collect();
    keep.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
            .then(a.cmp(&b))
    });
    keep
}

/// Memory-vs-throughput frontier over the simulated results.
pub fn pareto_frontier(results: &[PlanResult]) -> Vec<PlanResult> {
    let mut timed: Vec<&PlanResult> = results.iter().filter(|r| r.summary.is_some()).collect();
    timed.sort_by_key(|r| r.plan.name());
    let points: Vec<(f64, f64)> = timed
        .iter()
        .map(|r| (r.memory.total, r.summary.as_ref().map_or(0.0, |s| s.throughput)))
        .collect();
    pareto_indices(&points).into_iter().map(|i| timed[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    /// Component name, or `all`.
    pub component: String,
    pub factor: f64,
    pub feasible: bool,
    pub iter_time: Option<f64>,
    pub throughput: Option<f64>,
    pub speedup: Option<f64>,
}

/// Speedups over the unscaled system when each component, and then all of
/// them together, is multiplied by each factor.
pub fn scale_study(
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
    factors: &[f64],
) -> Result<Vec<ScaleRow>> {
    if factors.is_empty() {
        return Err(Error::invalid("factors", "at least one scaling factor is required"));
    }
    let base = evaluate_plan(model, plan, task, system, None, true)?;
    let Some(base) = base.summary else {
        return Err(Error::Infeasible(base.infeasibility.expect("untimed plan is infeasible")));
    };
    let mut cases: Vec<(String, f64, HardwareScaling)> = Vec::new();
    for &f in factors {
        for c in HardwareComponent::ALL {
            cases.push((c.name().into(), f, HardwareScaling::single(c, f)));
        }
        cases.push(("all".into(), f, HardwareScaling::uniform(f)));
    }
    cases
        .par_iter()
        .map(|(component, factor, scaling)| {
            let scaled = scale_hardware(system, scaling)?;
            let r = evaluate_plan(model, plan, task, &scaled, None, true)?;
            let t = r.summary.as_ref().map(|s| s.overlapped_iter_time);
            Ok(ScaleRow {
                component: component.clone(),
                factor: *factor,
                feasible: r.feasible,
                iter_time: t,
                throughput: r.summary.as_ref().map(|s| s.throughput),
                speedup: t.map(|t| base.overlapped_iter_time / t),
            })
        })
        .collect()
}
