#![allow(dead_code)]

pub mod oracle;
pub mod props;

use std::path::PathBuf;

use madmax::io::{fixtures_dir, load_inputs, TaskFile};
use madmax::model::{DeviceSpec, LayerKind, LayerSpec, ModelArch, SystemSpec, TaskKind, TaskSpec, SCHEMA_VERSION};
use madmax::plan::{ParallelPlan, PlanEntry, Strategy as Par};
use proptest::prelude::*;

pub struct Fixture {
    pub model: ModelArch,
    pub system: SystemSpec,
    pub file: TaskFile,
}

impl Fixture {
    pub fn task(&self) -> TaskSpec {
        self.file.task()
    }

    pub fn plan(&self) -> ParallelPlan {
        self.file.plan()
    }
}

pub fn fixture_path(kind: &str, name: &str) -> PathBuf {
    fixtures_dir().join(kind).join(format!("{name}.json"))
}

pub fn fixture(model: &str, system: &str, task: &str) -> Fixture {
    let (model, system, file) = load_inputs(
        &fixture_path("models", model),
        &fixture_path("systems", system),
        &fixture_path("tasks", task),
    )
    .unwrap_or_else(|e| panic!("loading {model}/{system}/{task}: {e}"));
    Fixture { model, system, file }
}

pub fn dlrm_a() -> Fixture {
    fixture("dlrm_a", "zionex_a100_128", "dlrm_a_pretrain")
}

pub fn gpt3() -> Fixture {
    fixture("gpt3_175b", "llm_a100_2048", "gpt3_175b_pretrain")
}

pub fn system(dpn: u64, nodes: u64) -> SystemSpec {
    SystemSpec {
        schema_version: SCHEMA_VERSION.into(),
        name: "toy".into(),
        notes: String::new(),
        device: DeviceSpec {
            name: String::new(),
            peak_flops: 100e12,
            compute_utilization: 0.5,
            hbm_capacity: 1e15,
            hbm_bandwidth: 1e12,
            hbm_utilization: 0.8,
        },
        devices_per_node: dpn,
        num_nodes: nodes,
        intra_node_bw: 200e9,
        inter_node_bw: 20e9,
        collective_efficiency: vec![],
        collective_latency: 0.0,
    }
}

/// A small recommendation-style model with an optional transformer block.
#[derive(Clone, Debug)]
pub struct Toy {
    pub model: ModelArch,
    pub system: SystemSpec,
    pub task: TaskSpec,
    pub plan: ParallelPlan,
}

fn mlp(id: &str, i: u64, o: u64, n: u64) -> LayerSpec {
    LayerSpec::new(
        id,
        "dense",
        LayerKind::Mlp {
            in_dim: i,
            out_dim: o,
            num_layers: n,
            per_token: false,
        },
    )
}

pub fn dense_strategy() -> impl Strategy<Value = Par> {
    prop_oneof![Just(Par::Ddp), Just(Par::Fsdp), Just(Par::Tp)]
}

pub fn emb_strategy() -> impl Strategy<Value = Par> {
    prop_oneof![Just(Par::Mp), Just(Par::Fsdp), Just(Par::Ddp)]
}

pub fn task_kind() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Pretrain), Just(TaskKind::Inference), Just(TaskKind::Finetune)]
}

pub fn toy() -> impl Strategy<Value = Toy> {
    (
        (1u64..=8, 1u64..=4),
        (16u64..=256, 64u64..=1024, 1u64..=3),
        (1u64..=8, 8u64..=64, 1u64..=8),
        prop::option::of((64u64..=512, 1u64..=3)),
        task_kind(),
        1u64..=4,
        (dense_strategy(), dense_strategy(), emb_strategy(), emb_strategy()),
        (dense_strategy(), dense_strategy()),
        any::<bool>(),
    )
        .prop_map(|(topo, mlp_dims, emb_dims, block, kind, batch_mult, strat, tstrat, prefetch)| {
            let (dpn, nodes) = topo;
            let (in_dim, width, depth) = mlp_dims;
            let (tables, dim, lookups) = emb_dims;
            let mut layers = vec![
                LayerSpec::new(
                    "emb",
                    "embedding",
                    LayerKind::EmbeddingBag {
                        num_tables: tables,
                        rows_per_table: 10_000,
                        embedding_dim: dim,
                        lookups_per_table_per_sample: lookups,
                        per_token: false,
                    },
                ),
                mlp("bot", in_dim, width, depth).with_inputs(&[]),
            ];
            let mut top_inputs = vec!["emb", "bot"];
            if let Some((d, n)) = block {
                layers.push(
                    LayerSpec::new(
                        "block",
                        "transformer",
                        LayerKind::TransformerBlock {
                            hidden_dim: d,
                            num_heads: 4,
                            ffn_dim: 4 * d,
                            num_layers: n,
                        },
                    )
                    .with_inputs(&["bot"]),
                );
                top_inputs = vec!["emb", "block"];
            }
            layers.push(mlp("top", width + tables * dim, width, depth).with_inputs(&top_inputs));
            let model = ModelArch::new("toy", layers);
            let system = system(dpn, nodes);
            let mut task = TaskSpec::new(kind, dpn * nodes * batch_mult * 8).with_context(16);
            if kind == TaskKind::Finetune {
                task.frozen_layers = vec!["emb".into()];
            }
            let mut plan = ParallelPlan::new()
                .with("dense", PlanEntry::new(strat.0, strat.1))
                .with("embedding", PlanEntry::new(strat.2, strat.3))
                .with("transformer", PlanEntry::new(tstrat.0, tstrat.1));
            plan.fsdp_prefetch = prefetch;
            Toy {
                model,
                system,
                task,
                plan,
            }
        })
}

pub fn fixtures_dir_of(kind: &str) -> PathBuf {
    fixtures_dir().join(kind)
}
