//! Hierarchical parallelization plans: sharding factors, the collectives a
//! strategy pair implies, and per-device memory with OOM validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    embedding_lookup_bytes, layer_activation_bytes, layer_param_bytes, layer_param_count, CollectiveKind, LayerKind,
    LayerSpec, Level, ModelArch, SystemSpec, TaskKind, TaskSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "DDP")]
    Ddp,
    #[serde(rename = "FSDP")]
    Fsdp,
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "MP")]
    Mp,
    #[serde(rename = "NONE")]
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Ddp, Strategy::Fsdp, Strategy::Tp, Strategy::Mp, Strategy::None];

    pub fn shards(self) -> bool {
        matches!(self, Strategy::Fsdp | Strategy::Tp | Strategy::Mp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ddp => "DDP",
            Strategy::Fsdp => "FSDP",
            Strategy::Tp => "TP",
            Strategy::Mp => "MP",
            Strategy::None => "NONE",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "EntryRepr", into = "EntryRepr")]
pub struct PlanEntry {
    pub intra: Strategy,
    pub inter: Strategy,
}

/// Wire form: `{"intra": .., "inter": ..}` or `{"shard": ..}` for the same
/// strategy on both levels.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EntryRepr {
    Levels { intra: Strategy, inter: Strategy },
    Shard { shard: Strategy },
}

impl From<EntryRepr> for PlanEntry {
    fn from(r: EntryRepr) -> Self {
        match r {
            EntryRepr::Levels { intra, inter } => PlanEntry { intra, inter },
            EntryRepr::Shard { shard } => PlanEntry::global(shard),
        }
    }
}

impl From<PlanEntry> for EntryRepr {
    fn from(e: PlanEntry) -> Self {
        if e.intra == e.inter && e.intra == Strategy::Mp {
            EntryRepr::Shard { shard: e.intra }
        } else {
            EntryRepr::Levels {
                intra: e.intra,
                inter: e.inter,
            }
        }
    }
}

impl PlanEntry {
    pub fn new(intra: Strategy, inter: Strategy) -> Self {
        PlanEntry { intra, inter }
    }

    pub fn global(s: Strategy) -> Self {
        PlanEntry { intra: s, inter: s }
    }

    /// Strategy groups as (span, strategy). Identical strategies on both
    /// levels form one global group.
    pub fn groups(self) -> Vec<(Level, Strategy)> {
        if self.intra == self.inter {
            vec![(Level::Global, self.intra)]
        } else {
            vec![(Level::Intra, self.intra), (Level::Inter, self.inter)]
        }
    }

    pub fn contains(self, s: Strategy) -> bool {
        self.intra == s || self.inter == s
    }
}

impl fmt::Display for PlanEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.intra == self.inter {
            write!(f, "({})", self.intra)
        } else {
            write!(f, "({}, {})", self.intra, self.inter)
        }
    }
}

pub fn group_size(system: &SystemSpec, level: Level) -> u64 {
    match level {
        Level::Intra => system.devices_per_node,
        Level::Inter => system.num_nodes,
        Level::Global => system.total_devices(),
    }
}

pub fn sharding_factor(entry: PlanEntry, system: &SystemSpec) -> u64 {
    let intra = if entry.intra.shards() { system.devices_per_node } else { 1 };
    let inter = if entry.inter.shards() { system.num_nodes } else { 1 };
    intra * inter
}

fn tp_degree(entry: PlanEntry, system: &SystemSpec) -> u64 {
    let intra = if entry.intra == Strategy::Tp { system.devices_per_node } else { 1 };
    let inter = if entry.inter == Strategy::Tp { system.num_nodes } else { 1 };
    intra * inter
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    /// Strategy per layer type.
    pub entries: BTreeMap<String, PlanEntry>,
    /// Per-layer-id overrides taking precedence over `entries`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, PlanEntry>,
    #[serde(default)]
    pub fsdp_prefetch: bool,
}

impl ParallelPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, layer_type: &str, entry: PlanEntry) -> Self {
        self.entries.insert(layer_type.to_string(), entry);
        self
    }

    pub fn entry_for(&self, layer: &LayerSpec) -> Option<PlanEntry> {
        self.overrides
            .get(&layer.id)
            .or_else(|| self.entries.get(&layer.layer_type))
            .copied()
    }

    /// Canonical display name, e.g. `dense=(TP, DDP) embedding=(MP)`.
    pub fn name(&self) -> String {
        let mut parts: Vec<String> = self.entries.iter().map(|(t, e)| format!("{t}={e}")).collect();
        parts.extend(self.overrides.iter().map(|(id, e)| format!("@{id}={e}")));
        if self.fsdp_prefetch {
            parts.push("+prefetch".into());
        }
        parts.join(" ")
    }
}

impl fmt::Display for ParallelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectiveReq {
    pub kind: CollectiveKind,
    /// Shard bytes for AllGather/ReduceScatter, buffer bytes for AllReduce,
    /// send bytes for All2All.
    pub bytes_per_device: f64,
    pub phase: Phase,
    pub blocking: bool,
    pub level: Level,
    pub source_layer: String,
}

/// What the backward pass has to produce for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRole {
    /// Weight gradients are computed (not frozen, task has a backward pass).
    pub trainable: bool,
    /// Some trainable layer lies upstream, so the input gradient is needed.
    pub input_grad: bool,
}

pub fn layer_roles(model: &ModelArch, task: &TaskSpec) -> BTreeMap<String, LayerRole> {
    let producers = model.producers();
    let mut roles: BTreeMap<String, LayerRole> = BTreeMap::new();
    // Any trainable layer at or above this one, computed in execution order.
    let mut reaches_trainable: BTreeMap<&str, bool> = BTreeMap::new();
    for layer in model.ordered_layers() {
        let backward = task.kind.has_backward();
        let trainable = backward && !task.is_frozen(&layer.id);
        let upstream = producers
            .get(layer.id.as_str())
            .map(|ps| ps.iter().any(|p| reaches_trainable.get(p).copied().unwrap_or(false)))
            .unwrap_or(false);
        reaches_trainable.insert(layer.id.as_str(), trainable || upstream);
        roles.insert(
            layer.id.clone(),
            LayerRole {
                trainable,
                input_grad: backward && upstream && !layer.is_embedding(),
            },
        );
    }
    roles
}

fn check_entry(layer: &LayerSpec, entry: PlanEntry) -> Result<()> {
    // MP on an MoE layer places experts on devices (expert parallelism).
    let is_moe = matches!(layer.kind, LayerKind::Moe { .. });
    if entry.contains(Strategy::Mp) && !layer.is_embedding() && !is_moe {
        return Err(Error::MpOnNonEmbedding { layer: layer.id.clone() });
    }
    Ok(())
}

/// Collectives one device issues for `layer` in one iteration, summed over
/// the layer's repeated units.
pub fn required_collectives(
    layer: &LayerSpec,
    entry: PlanEntry,
    task: &TaskSpec,
    system: &SystemSpec,
    local_batch: u64,
    role: LayerRole,
    fsdp_prefetch: bool,
) -> Result<Vec<CollectiveReq>> {
    check_entry(layer, entry)?;
    let ctx = task.context_length;
    let shards = sharding_factor(entry, system) as f64;
    let param_bytes = layer_param_bytes(layer);
    let shard_bytes = param_bytes / shards;
    let tp = tp_degree(entry, system);
    let backward = task.kind.has_backward();

    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let req = |kind, bytes, phase, blocking, level| CollectiveReq {
        kind,
        bytes_per_device: bytes,
        phase,
        blocking,
        level,
        source_layer: layer.id.clone(),
    };

    for (level, strategy) in entry.groups() {
        let n = group_size(system, level);
        if n <= 1 {
            continue;
        }
        match strategy {
            Strategy::Fsdp => {
                fwd.push(req(CollectiveKind::AllGather, shard_bytes, Phase::Forward, !fsdp_prefetch, level));
                if role.trainable || role.input_grad {
                    bwd.push(req(CollectiveKind::AllGather, shard_bytes, Phase::Backward, !fsdp_prefetch, level));
                }
                if role.trainable {
                    bwd.push(req(CollectiveKind::ReduceScatter, shard_bytes, Phase::Backward, false, level));
                }
            }
            Strategy::Tp => {
                let act = layer_activation_bytes(layer, local_batch * tp, ctx)?;
                fwd.push(req(CollectiveKind::AllReduce, act, Phase::Forward, true, level));
                if role.input_grad {
                    bwd.push(req(CollectiveKind::AllReduce, act, Phase::Backward, true, level));
                }
            }
            Strategy::Ddp => {
                if role.trainable {
                    bwd.push(req(CollectiveKind::AllReduce, shard_bytes, Phase::Backward, false, level));
                }
            }
            Strategy::Mp if !layer.is_embedding() => {}
            Strategy::Mp => {
                let pooled = layer_activation_bytes(layer, local_batch, ctx)?;
                let send = pooled * (n as f64 - 1.0) / n as f64;
                fwd.push(req(CollectiveKind::All2All, send, Phase::Forward, true, level));
                if role.trainable {
                    bwd.push(req(CollectiveKind::All2All, send, Phase::Backward, true, level));
                }
            }
            Strategy::None => {}
        }
    }

    if let LayerKind::Moe {
        expert,
        num_experts,
        active_experts,
        blocking_routing,
    } = &layer.kind
    {
        let span = match (entry.intra.shards(), entry.inter.shards()) {
            (true, true) => Some(Level::Global),
            (true, false) => Some(Level::Intra),
            (false, true) => Some(Level::Inter),
            (false, false) => None,
        };
        if let Some(span) = span.filter(|&s| group_size(system, s) > 1) {
            let routed = layer_activation_bytes(expert, local_batch, ctx)? * *active_experts as f64
                / *num_experts as f64;
            // Routing precedes the expert compute, so it goes first.
            fwd.insert(0, req(CollectiveKind::All2All, routed, Phase::Forward, *blocking_routing, span));
            if backward && (role.trainable || role.input_grad) {
                bwd.push(req(CollectiveKind::All2All, routed, Phase::Backward, *blocking_routing, span));
            }
        }
    }

    if !backward {
        bwd.clear();
    }
    fwd.extend(bwd);
    Ok(fwd)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub params: f64,
    pub grads: f64,
    pub optimizer_states: f64,
    pub activations: f64,
    pub total: f64,
    pub capacity: f64,
    pub fits: bool,
}

impl MemoryFootprint {
    pub fn overage(&self) -> f64 {
        (self.total - self.capacity).max(0.0)
    }
}

/// Per-layer footprint components on one device.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerMemory {
    pub params: f64,
    pub grads: f64,
    pub optimizer_states: f64,
    pub activations: f64,
}

pub fn layer_memory(
    layer: &LayerSpec,
    entry: PlanEntry,
    task: &TaskSpec,
    system: &SystemSpec,
    local_batch: u64,
) -> Result<LayerMemory> {
    let shards = sharding_factor(entry, system) as f64;
    let params = layer_param_bytes(layer) / shards;
    let count = layer_param_count(layer) / shards;
    let opts = &task.options;
    let trainable = task.kind.has_backward() && !task.is_frozen(&layer.id);
    let (grads, optimizer_states) = match (trainable, layer.is_embedding()) {
        (false, _) => (0.0, 0.0),
        // Sparse gradients: one row gradient per lookup served by this device.
        (true, true) => {
            let touched = embedding_lookup_bytes(layer, local_batch, task.context_length)? * opts.lookup_skew;
            (touched.min(params), count * opts.opt_bytes_per_param_embedding)
        }
        (true, false) => (params, count * opts.opt_bytes_per_param_dense),
    };
    let activations = layer_activation_bytes(layer, local_batch * tp_degree(entry, system), task.context_length)?;
    Ok(LayerMemory {
        params,
        grads,
        optimizer_states,
        activations,
    })
}

fn covered_entries<'a>(model: &'a ModelArch, plan: &ParallelPlan) -> Result<Vec<(&'a LayerSpec, PlanEntry)>> {
    model
        .ordered_layers()
        .into_iter()
        .map(|l| {
            plan.entry_for(l)
                .map(|e| (l, e))
                .ok_or_else(|| Error::invalid("plan", format!("no strategy for layer `{}` (type `{}`)", l.id, l.layer_type)))
        })
        .collect()
}

pub fn per_device_memory(
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
) -> Result<MemoryFootprint> {
    let local_batch = task.local_batch(system);
    let mut fp = MemoryFootprint {
        capacity: system.device.hbm_capacity,
        ..Default::default()
    };
    let mut acts = Vec::new();
    for (layer, entry) in covered_entries(model, plan)? {
        let m = layer_memory(layer, entry, task, system, local_batch)?;
        fp.params += m.params;
        fp.grads += m.grads;
        fp.optimizer_states += m.optimizer_states;
        acts.push(m.activations);
    }
    fp.activations = if task.kind == TaskKind::Inference {
        // Only a layer's input and output are live at once.
        match acts.len() {
            1 => acts[0],
            _ => acts.windows(2).map(|w| w[0] + w[1]).fold(0.0, f64::max),
        }
    } else {
        acts.iter().sum()
    };
    fp.total = fp.params + fp.grads + fp.optimizer_states + fp.activations;
    fp.fits = fp.total <= fp.capacity;
    Ok(fp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Infeasibility {
    OutOfMemory {
        required_bytes: f64,
        capacity_bytes: f64,
        overage_bytes: f64,
    },
    Structural {
        reason: String,
    },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::OutOfMemory {
                required_bytes,
                capacity_bytes,
                overage_bytes,
            } => write!(
                f,
                "out of memory: needs {:.3} GB per device, capacity {:.3} GB, over by {:.0} bytes",
                required_bytes / 1e9,
                capacity_bytes / 1e9,
                overage_bytes
            ),
            Infeasibility::Structural { reason } => write!(f, "structural violation: {reason}"),
        }
    }
}

fn structural(reason: impl Into<String>) -> Infeasibility {
    Infeasibility::Structural { reason: reason.into() }
}

/// Checks structure first, then memory. Inputs must already be
/// individually valid.
pub fn validate_plan(
    model: &ModelArch,
    plan: &ParallelPlan,
    task: &TaskSpec,
    system: &SystemSpec,
) -> std::result::Result<MemoryFootprint, Infeasibility> {
    if model.layers.is_empty() {
        return Err(structural("model has no layers"));
    }
    let entries = covered_entries(model, plan).map_err(|e| structural(e.to_string()))?;
    let roles = layer_roles(model, task);
    for (layer, entry) in &entries {
        if let Err(e) = check_entry(layer, *entry) {
            return Err(structural(e.to_string()));
        }
        if !roles[&layer.id].trainable {
            continue;
        }
        for (level, strategy) in entry.groups() {
            if strategy == Strategy::None && group_size(system, level) > 1 {
                return Err(structural(format!(
                    "trainable layer `{}` is replicated at {} level without gradient sync",
                    layer.id,
                    level.name()
                )));
            }
        }
    }
    let fp = per_device_memory(model, plan, task, system).map_err(|e| structural(e.to_string()))?;
    if fp.fits {
        Ok(fp)
    } else {
        Err(Infeasibility::OutOfMemory {
            required_bytes: fp.total,
            capacity_bytes: fp.capacity,
            overage_bytes: fp.overage(),
        })
    }
}
