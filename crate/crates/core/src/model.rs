//! Declarative descriptions of models, tasks and hardware, plus the
//! first-order per-layer quantities (FLOPs, parameters, bytes) everything
//! else is derived from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

fn default_precision() -> u8 {
    4
}

fn default_true() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Mlp {
        in_dim: u64,
        out_dim: u64,
        num_layers: u64,
        /// Applied to every token of context (language-model heads).
        #[serde(default, skip_serializing_if = "is_false")]
        per_token: bool,
    },
    EmbeddingBag {
        num_tables: u64,
        rows_per_table: u64,
        embedding_dim: u64,
        lookups_per_table_per_sample: u64,
        /// Lookups are counted per token of context rather than per sample
        /// (token embeddings of language models).
        #[serde(default, skip_serializing_if = "is_false")]
        per_token: bool,
    },
    TransformerBlock {
        hidden_dim: u64,
        num_heads: u64,
        ffn_dim: u64,
        num_layers: u64,
    },
    Moe {
        expert: Box<LayerSpec>,
        num_experts: u64,
        active_experts: u64,
        /// Whether the token-routing All2All sits on the critical path.
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        blocking_routing: bool,
    },
    /// Per-sample totals for a block whose internal dimensions are not
    /// modeled individually.
    Aggregate {
        fwd_flops_per_sample: f64,
        params: f64,
        lookup_bytes_per_sample: f64,
        activation_bytes_per_sample: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    /// Key used by parallel plans to select a strategy for this layer.
    pub layer_type: String,
    pub kind: LayerKind,
    #[serde(default = "default_precision")]
    pub param_precision_bytes: u8,
    #[serde(default = "default_precision")]
    pub activation_precision_bytes: u8,
    /// Producers of this layer's input. `None` means the previous layer in
    /// execution order; an empty list means the layer reads raw input only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, layer_type: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.into(),
            layer_type: layer_type.into(),
            kind,
            param_precision_bytes: 4,
            activation_precision_bytes: 4,
            inputs: None,
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = Some(inputs.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn with_precision(mut self, param: u8, activation: u8) -> Self {
        self.param_precision_bytes = param;
        self.activation_precision_bytes = activation;
        self
    }

    /// Lookup-bound layers: embedding bags and aggregates that carry
    /// sparse lookup traffic.
    pub fn is_embedding(&self) -> bool {
        match &self.kind {
            LayerKind::EmbeddingBag { .. } => true,
            LayerKind::Aggregate {
                lookup_bytes_per_sample,
                ..
            } => *lookup_bytes_per_sample > 0.0,
            _ => false,
        }
    }

    pub fn needs_context(&self) -> bool {
        match &self.kind {
            LayerKind::TransformerBlock { .. } => true,
            LayerKind::EmbeddingBag { per_token, .. } | LayerKind::Mlp { per_token, .. } => *per_token,
            LayerKind::Moe { expert, .. } => expert.needs_context(),
            _ => false,
        }
    }

    /// Number of identical repeated units (transformer blocks) the layer is
    /// executed as. Collectives are issued per unit.
    pub fn units(&self) -> u64 {
        match &self.kind {
            LayerKind::TransformerBlock { num_layers, .. } => *num_layers,
            LayerKind::Moe { expert, .. } => expert.units(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let what = || format!("layer `{}`", self.id);
        if self.id.is_empty() {
            return Err(Error::invalid("layer", "empty id"));
        }
        for p in [self.param_precision_bytes, self.activation_precision_bytes] {
            if !matches!(p, 1 | 2 | 4) {
                return Err(Error::invalid(what(), format!("precision {p} not in {{1,2,4}}")));
            }
        }
        let positive = |dims: &[u64]| dims.iter().all(|&d| d >= 1);
        let ok = match &self.kind {
            LayerKind::Mlp {
                in_dim,
                out_dim,
                num_layers,
                ..
            } => positive(&[*in_dim, *out_dim, *num_layers]),
            LayerKind::EmbeddingBag {
                num_tables,
                rows_per_table,
                embedding_dim,
                lookups_per_table_per_sample,
                ..
            } => positive(&[
                *num_tables,
                *rows_per_table,
                *embedding_dim,
                *lookups_per_table_per_sample,
            ]),
            LayerKind::TransformerBlock {
                hidden_dim,
                num_heads,
                num_layers,
                ..
            } => {
                // ffn_dim 0 is an attention-only block; MoE feed-forwards live in their own layer.
                positive(&[*hidden_dim, *num_heads, *num_layers])
            }
            LayerKind::Moe {
                expert,
                num_experts,
                active_experts,
                ..
            } => {
                expert.validate()?;
                if matches!(expert.kind, LayerKind::Moe { .. }) {
                    return Err(Error::invalid(what(), "nested MoE experts"));
                }
                *num_experts >= 1 && *active_experts >= 1 && active_experts <= num_experts
            }
            LayerKind::Aggregate {
                fwd_flops_per_sample,
                params,
                lookup_bytes_per_sample,
                activation_bytes_per_sample,
            } => [
                *fwd_flops_per_sample,
                *params,
                *lookup_bytes_per_sample,
                *activation_bytes_per_sample,
            ]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(what(), "dimension out of range"))
        }
    }
}

fn require_batch(local_batch: u64) -> Result<f64> {
    if local_batch == 0 {
        Err(Error::ZeroBatch)
    } else {
        Ok(local_batch as f64)
    }
}

fn require_context(layer: &LayerSpec, context_length: Option<u64>) -> Result<f64> {
    match context_length {
        Some(l) if l >= 1 => Ok(l as f64),
        _ => Err(Error::MissingContextLength {
            layer: layer.id.clone(),
        }),
    }
}

/// Forward FLOPs of `layer` for `local_batch` samples (sequences for
/// transformer layers).
pub fn layer_fwd_flops(layer: &LayerSpec, local_batch: u64, context_length: Option<u64>) -> Result<f64> {
    let b = require_batch(local_batch)?;
    Ok(match &layer.kind {
        LayerKind::Mlp {
            in_dim,
            out_dim,
            num_layers,
            per_token,
        } => {
            let (i, o) = (*in_dim as f64, *out_dim as f64);
            let rows = if *per_token { b * require_context(layer, context_length)? } else { b };
            2.0 * rows * (i * o + (*num_layers as f64 - 1.0) * o * o)
        }
        LayerKind::EmbeddingBag { .. } => 0.0,
        LayerKind::TransformerBlock {
            hidden_dim,
            ffn_dim,
            num_layers,
            ..
        } => {
            let l = require_context(layer, context_length)?;
            let (d, f) = (*hidden_dim as f64, *ffn_dim as f64);
            // projections (4d^2) and FFN (2 d f) at 2 FLOPs/MAC, plus QK^T and AV.
            let per_block = 2.0 * b * l * (4.0 * d * d + 2.0 * d * f) + 4.0 * b * l * l * d;
            per_block * *num_layers as f64
        }
        LayerKind::Moe {
            expert,
            active_experts,
            ..
        } => *active_experts as f64 * layer_fwd_flops(expert, local_batch, context_length)?,
        LayerKind::Aggregate {
            fwd_flops_per_sample,
            ..
        } => fwd_flops_per_sample * b,
    })
}

pub fn layer_param_count(layer: &LayerSpec) -> f64 {
    match &layer.kind {
        LayerKind::Mlp {
            in_dim,
            out_dim,
            num_layers,
            ..
        } => {
            let (i, o) = (*in_dim as f64, *out_dim as f64);
            i * o + o + (*num_layers as f64 - 1.0) * (o * o + o)
        }
        LayerKind::EmbeddingBag {
            num_tables,
            rows_per_table,
            embedding_dim,
            ..
        } => (*num_tables * *rows_per_table * *embedding_dim) as f64,
        LayerKind::TransformerBlock {
            hidden_dim,
            ffn_dim,
            num_layers,
            ..
        } => {
            let (d, f) = (*hidden_dim as f64, *ffn_dim as f64);
            (4.0 * d * d + 2.0 * d * f) * *num_layers as f64
        }
        LayerKind::Moe {
            expert, num_experts, ..
        } => *num_experts as f64 * layer_param_count(expert),
        LayerKind::Aggregate { params, .. } => *params,
    }
}

pub fn layer_param_bytes(layer: &LayerSpec) -> f64 {
    layer_param_count(layer) * layer.param_precision_bytes as f64
}

/// Bytes read from embedding storage for `local_batch` samples.
pub fn embedding_lookup_bytes(layer: &LayerSpec, local_batch: u64, context_length: Option<u64>) -> Result<f64> {
    let not_embedding = || Error::NotEmbedding {
        layer: layer.id.clone(),
    };
    let b = require_batch(local_batch)?;
    match &layer.kind {
        LayerKind::EmbeddingBag {
            num_tables,
            embedding_dim,
            lookups_per_table_per_sample,
            per_token,
            ..
        } => {
            let tokens = if *per_token {
                require_context(layer, context_length)?
            } else {
                1.0
            };
            Ok((*num_tables * *lookups_per_table_per_sample * *embedding_dim) as f64
                * layer.param_precision_bytes as f64
                * tokens
                * b)
        }
        LayerKind::Aggregate {
            lookup_bytes_per_sample,
            ..
        } if *lookup_bytes_per_sample > 0.0 => Ok(lookup_bytes_per_sample * b),
        _ => Err(not_embedding()),
    }
}

/// Bytes of the outputs retained for backward over every stacked sub-layer,
/// for `local_batch` samples.
pub fn layer_activation_bytes(layer: &LayerSpec, local_batch: u64, context_length: Option<u64>) -> Result<f64> {
    let b = require_batch(local_batch)?;
    let prec = layer.activation_precision_bytes as f64;
    Ok(match &layer.kind {
        LayerKind::Mlp {
            out_dim,
            num_layers,
            per_token,
            ..
        } => {
            let rows = if *per_token { b * require_context(layer, context_length)? } else { b };
            (*num_layers * *out_dim) as f64 * rows * prec
        }
        LayerKind::EmbeddingBag {
            num_tables,
            embedding_dim,
            per_token,
            ..
        } => {
            let tokens = if *per_token {
                require_context(layer, context_length)?
            } else {
                1.0
            };
            (*num_tables * *embedding_dim) as f64 * tokens * b * prec
        }
        LayerKind::TransformerBlock {
            hidden_dim, num_layers, ..
        } => {
            let l = require_context(layer, context_length)?;
            (*num_layers * *hidden_dim) as f64 * l * b * prec
        }
        LayerKind::Moe { expert, .. } => layer_activation_bytes(expert, local_batch, context_length)?,
        LayerKind::Aggregate {
            activation_bytes_per_sample,
            ..
        } => activation_bytes_per_sample * b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub schema_version: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub layers: Vec<LayerSpec>,
    pub execution_order: Vec<String>,
}

impl ModelArch {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        let execution_order = layers.iter().map(|l| l.id.clone()).collect();
        ModelArch {
            schema_version: SCHEMA_VERSION.to_string(),
            name: name.into(),
            notes: String::new(),
            layers,
            execution_order,
        }
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Layers in forward execution order.
    pub fn ordered_layers(&self) -> Vec<&LayerSpec> {
        self.execution_order
            .iter()
            .filter_map(|id| self.layer(id))
            .collect()
    }

    /// Resolved producers of each layer's input, keyed by layer id.
    pub fn producers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out = BTreeMap::new();
        let mut prev: Option<&str> = None;
        for id in &self.execution_order {
            let Some(layer) = self.layer(id) else { continue };
            let inputs = match &layer.inputs {
                Some(v) => v.iter().map(String::as_str).collect(),
                None => prev.into_iter().collect(),
            };
            out.insert(layer.id.as_str(), inputs);
            prev = Some(layer.id.as_str());
        }
        out
    }

    pub fn total_params(&self) -> f64 {
        self.layers.iter().map(layer_param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model", "no layers"));
        }
        let mut ids = BTreeSet::new();
        for layer in &self.layers {
            layer.validate()?;
            if !ids.insert(layer.id.as_str()) {
                return Err(Error::invalid("model", format!("duplicate layer id `{}`", layer.id)));
            }
        }
        let order: BTreeSet<&str> = self.execution_order.iter().map(String::as_str).collect();
        if order.len() != self.execution_order.len() || order != ids {
            return Err(Error::invalid(
                "model",
                "execution_order is not a permutation of layer ids",
            ));
        }
        let position: BTreeMap<&str, usize> = self
            .execution_order
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        for (id, inputs) in self.producers() {
            for input in inputs {
                match position.get(input) {
                    Some(&p) if p < position[id] => {}
                    Some(_) => {
                        return Err(Error::invalid(
                            "model",
                            format!("layer `{id}` consumes `{input}` which runs later"),
                        ))
                    }
                    None => {
                        return Err(Error::invalid(
                            "model",
                            format!("layer `{id}` consumes unknown layer `{input}`"),
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pretrain,
    Finetune,
    Inference,
}

impl TaskKind {
    pub fn has_backward(self) -> bool {
        !matches!(self, TaskKind::Inference)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkUnit {
    #[default]
    Samples,
    Tokens,
}

impl WorkUnit {
    pub fn label(self) -> &'static str {
        match self {
            WorkUnit::Samples => "samples",
            WorkUnit::Tokens => "tokens",
        }
    }
}

/// Calibration knobs the first-order model needs but cannot observe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelingOptions {
    /// Backward FLOPs as a multiple of forward FLOPs.
    pub backward_flops_multiplier: f64,
    /// Share of backward FLOPs spent on the input gradient; the rest is the
    /// weight gradient.
    pub input_grad_fraction: f64,
    /// Per-device multiplier on lookup bytes for uneven embedding sharding.
    pub lookup_skew: f64,
    /// Backward (sparse update) lookup traffic as a multiple of forward.
    pub embedding_backward_factor: f64,
    pub opt_bytes_per_param_dense: f64,
    pub opt_bytes_per_param_embedding: f64,
}

impl Default for ModelingOptions {
    fn default() -> Self {
        ModelingOptions {
            backward_flops_multiplier: 2.0,
            input_grad_fraction: 0.5,
            lookup_skew: 1.0,
            embedding_backward_factor: 1.0,
            opt_bytes_per_param_dense: 8.0,
            opt_bytes_per_param_embedding: 4.0,
        }
    }
}

impl ModelingOptions {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(finite_nonneg(self.backward_flops_multiplier)
            && (0.0..=1.0).contains(&self.input_grad_fraction)
            && self.lookup_skew.is_finite()
            && self.lookup_skew > 0.0
            && finite_nonneg(self.embedding_backward_factor)
            && finite_nonneg(self.opt_bytes_per_param_dense)
            && finite_nonneg(self.opt_bytes_per_param_embedding))
        {
            return Err(Error::invalid("modeling options", "value out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Samples (sequences for language models) per iteration.
    pub global_batch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_layers: Vec<String>,
    /// Work to project training duration over, in `work_unit`s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_work: Option<f64>,
    #[serde(default)]
    pub work_unit: WorkUnit,
    #[serde(default)]
    pub options: ModelingOptions,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, global_batch: u64) -> Self {
        TaskSpec {
            kind,
            global_batch,
            context_length: None,
            frozen_layers: Vec::new(),
            total_work: None,
            work_unit: WorkUnit::Samples,
            options: ModelingOptions::default(),
        }
    }

    pub fn with_context(mut self, l: u64) -> Self {
        self.context_length = Some(l);
        self
    }

    pub fn is_frozen(&self, layer_id: &str) -> bool {
        self.kind == TaskKind::Inference || self.frozen_layers.iter().any(|f| f == layer_id)
    }

    /// Work units completed per iteration.
    pub fn work_per_iteration(&self) -> f64 {
        match self.work_unit {
            WorkUnit::Samples => self.global_batch as f64,
            WorkUnit::Tokens => self.global_batch as f64 * self.context_length.unwrap_or(1) as f64,
        }
    }

    pub fn local_batch(&self, system: &SystemSpec) -> u64 {
        self.global_batch.div_ceil(system.total_devices()).max(1)
    }

    pub fn validate(&self, model: &ModelArch) -> Result<()> {
        if self.global_batch == 0 {
            return Err(Error::invalid("task", "global_batch must be at least 1"));
        }
        if !self.frozen_layers.is_empty() && self.kind != TaskKind::Finetune {
            return Err(Error::invalid("task", "frozen_layers only apply to finetune"));
        }
        for f in &self.frozen_layers {
            if model.layer(f).is_none() {
                return Err(Error::invalid("task", format!("frozen layer `{f}` not in model")));
            }
        }
        if let Some(w) = self.total_work {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid("task", "total_work must be positive"));
            }
        }
        if self.work_unit == WorkUnit::Tokens && self.context_length.is_none() {
            return Err(Error::invalid("task", "token work unit needs a context_length"));
        }
        self.options.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    /// FLOP/s for the active datatype.
    pub peak_flops: f64,
    pub compute_utilization: f64,
    pub hbm_capacity: f64,
    pub hbm_bandwidth: f64,
    pub hbm_utilization: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let util = |v: f64| v > 0.0 && v <= 1.0;
        if pos(self.peak_flops)
            && pos(self.hbm_capacity)
            && pos(self.hbm_bandwidth)
            && util(self.compute_utilization)
            && util(self.hbm_utilization)
        {
            Ok(())
        } else {
            Err(Error::invalid(
                format!("device `{}`", self.name),
                "peaks must be positive and utilizations in (0,1]",
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveKind {
    All2All,
    AllReduce,
    AllGather,
    ReduceScatter,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 4] = [
        CollectiveKind::All2All,
        CollectiveKind::AllReduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::All2All => "all2all",
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::AllGather => "allgather",
            CollectiveKind::ReduceScatter => "reducescatter",
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CollectiveKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("collective", format!("unknown collective `{s}`")))
    }
}

/// Span of a collective in the two-level node hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Intra,
    Inter,
    Global,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Intra => "intra",
            Level::Inter => "inter",
            Level::Global => "global",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "intra" => Ok(Level::Intra),
            "inter" => Ok(Level::Inter),
            "global" => Ok(Level::Global),
            _ => Err(Error::invalid("level", format!("unknown level `{s}`"))),
        }
    }
}

/// Measured efficiency of a collective on one interconnect level for
/// messages of at least `min_bytes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyEntry {
    pub collective: CollectiveKind,
    pub level: Level,
    #[serde(default)]
    pub min_bytes: f64,
    pub efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub schema_version: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub device: DeviceSpec,
    pub devices_per_node: u64,
    pub num_nodes: u64,
    /// Unidirectional bytes/s per device.
    pub intra_node_bw: f64,
    /// Unidirectional bytes/s per device.
    pub inter_node_bw: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub collective_efficiency: Vec<EfficiencyEntry>,
    /// Fixed per-collective launch latency in seconds.
    #[serde(default)]
    pub collective_latency: f64,
}

impl SystemSpec {
    pub fn total_devices(&self) -> u64 {
        self.devices_per_node * self.num_nodes
    }

    /// Efficiency factor for a collective on one physical level. The entry
    /// with the largest `min_bytes` not exceeding `bytes` wins; 1 if none.
    pub fn efficiency(&self, kind: CollectiveKind, level: Level, bytes: f64) -> f64 {
        self.collective_efficiency
            .iter()
            .filter(|e| e.collective == kind && e.level == level && e.min_bytes <= bytes)
            .max_by(|a, b| a.min_bytes.total_cmp(&b.min_bytes))
            .map_or(1.0, |e| e.efficiency)
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        let what = || format!("system `{}`", self.name);
        if self.devices_per_node == 0 || self.num_nodes == 0 {
            return Err(Error::invalid(what(), "device and node counts must be at least 1"));
        }
        if !(self.intra_node_bw > 0.0 && self.inter_node_bw > 0.0)
            || !self.intra_node_bw.is_finite()
            || !self.inter_node_bw.is_finite()
        {
            return Err(Error::invalid(what(), "bandwidths must be positive"));
        }
        if !(self.collective_latency.is_finite() && self.collective_latency >= 0.0) {
            return Err(Error::invalid(what(), "collective_latency must be non-negative"));
        }
        for e in &self.collective_efficiency {
            if !(e.efficiency > 0.0 && e.efficiency <= 1.0) || e.level == Level::Global || e.min_bytes < 0.0 {
                return Err(Error::invalid(
                    what(),
                    "efficiency entries need a level of intra|inter and a factor in (0,1]",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardwareComponent {
    Compute,
    HbmCapacity,
    HbmBw,
    IntraBw,
    InterBw,
}

impl HardwareComponent {
    pub const ALL: [HardwareComponent; 5] = [
        HardwareComponent::Compute,
        HardwareComponent::HbmCapacity,
        HardwareComponent::HbmBw,
        HardwareComponent::IntraBw,
        HardwareComponent::InterBw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HardwareComponent::Compute => "compute",
            HardwareComponent::HbmCapacity => "hbm_capacity",
            HardwareComponent::HbmBw => "hbm_bw",
            HardwareComponent::IntraBw => "intra_bw",
            HardwareComponent::InterBw => "inter_bw",
        }
    }
}

/// Multipliers applied by [`scale_hardware`]; unset components stay at 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardwareScaling(pub BTreeMap<HardwareComponent, f64>);

impl HardwareScaling {
    pub fn single(component: HardwareComponent, factor: f64) -> Self {
        HardwareScaling(BTreeMap::from([(component, factor)]))
    }

    pub fn uniform(factor: f64) -> Self {
        HardwareScaling(HardwareComponent::ALL.iter().map(|&c| (c, factor)).collect())
    }

    pub fn factor(&self, c: HardwareComponent) -> f64 {
        self.0.get(&c).copied().unwrap_or(1.0)
    }
}

pub fn scale_hardware(system: &SystemSpec, factors: &HardwareScaling) -> Result<SystemSpec> {
    for (c, f) in &factors.0 {
        if !(f.is_finite() && *f > 0.0) {
            return Err(Error::invalid(
                "scaling factor",
                format!("{} factor {f} must be positive", c.name()),
            ));
        }
    }
    let mut out = system.clone();
    out.device.peak_flops *= factors.factor(HardwareComponent::Compute);
    out.device.hbm_capacity *= factors.factor(HardwareComponent::HbmCapacity);
    out.device.hbm_bandwidth *= factors.factor(HardwareComponent::HbmBw);
    out.intra_node_bw *= factors.factor(HardwareComponent::IntraBw);
    out.inter_node_bw *= factors.factor(HardwareComponent::InterBw);
    Ok(out)
}
