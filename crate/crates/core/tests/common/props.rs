//! Property suites shared by the `properties` and `acceptance` targets.

use std::collections::BTreeMap;
use std::fs;
use std::process::Command;

use madmax::cost::{all2all_time, allgather_time, allreduce_time, compute_time, lookup_time, reducescatter_time};
use madmax::explore::{pareto_indices, search_optimal, Constraints, Objective, PlanResult, StrategyDomain};
use madmax::model::{scale_hardware, HardwareComponent, HardwareScaling, Level, ModelArch, SystemSpec, TaskKind, TaskSpec};
use madmax::plan::{ParallelPlan, PlanEntry, Strategy as Par};
use madmax::sim::{exposed_comm, simulate, Timeline};
use madmax::trace::{build_streams_with, DeviceTrace, Stream};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use super::{system, toy, Toy};

pub type Check = fn() -> Result<(), String>;

pub const SUITES: [(&str, Check); 9] = [
    ("bandwidth-inverse scaling", bandwidth_inverse_scaling),
    ("uniform-scaling ranking invariance", uniform_scaling_preserves_ranking),
    ("overlapped <= serialized", overlapped_within_serialized),
    ("exposed <= total comm", exposed_within_comm),
    ("inference collectives subset of pretrain", inference_subset_of_pretrain),
    ("prefetch never slower", prefetch_never_slower),
    ("pareto dominance-free", pareto_dominance_free),
    ("deterministic outputs", deterministic_outputs),
    ("json round trip", json_round_trip),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(cases)
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&s, f).map_err(|e| e.to_string())
}

pub fn rates(k: f64) -> HardwareScaling {
    HardwareScaling(
        [
            HardwareComponent::Compute,
            HardwareComponent::HbmBw,
            HardwareComponent::IntraBw,
            HardwareComponent::InterBw,
        ]
        .into_iter()
        .map(|c| (c, k))
        .collect(),
    )
}

fn level() -> impl Strategy<Value = Level> {
    prop_oneof![Just(Level::Intra), Just(Level::Inter), Just(Level::Global)]
}

fn collective_times(bytes: f64, s: &SystemSpec, l: Level) -> [f64; 4] {
    [
        all2all_time(bytes, s, l),
        allreduce_time(bytes, s, l),
        allgather_time(bytes, s, l),
        reducescatter_time(bytes, s, l),
    ]
}

fn timed(t: &Toy) -> Option<(Timeline, DeviceTrace)> {
    let trace = build_streams_with(&t.model, &t.plan, &t.task, &t.system, false).ok()?;
    let timeline = simulate(&trace).ok()?;
    Some((timeline, trace))
}

pub fn bandwidth_inverse_scaling() -> Result<(), String> {
    let s = (1.0f64..1e10, 0.01f64..100.0, -6i32..6, 1u64..=8, 1u64..=16, level());
    run(256, s, |(bytes, k, j, dpn, nodes, l)| {
        let s = system(dpn, nodes);
        let base = collective_times(bytes, &s, l);
        let mut scaled = s.clone();
        scaled.intra_node_bw *= k;
        scaled.inter_node_bw *= k;
        for (a, b) in base.iter().zip(collective_times(bytes, &scaled, l)) {
            prop_assert!((a / k - b).abs() <= 1e-12 * a, "{a} {b} {k}");
        }
        // Power-of-two factors scale bit-exactly.
        let p = 2f64.powi(j);
        let mut exact = s.clone();
        exact.intra_node_bw *= p;
        exact.inter_node_bw *= p;
        exact.device.peak_flops *= p;
        exact.device.hbm_bandwidth *= p;
        for (a, b) in base.iter().zip(collective_times(bytes, &exact, l)) {
            prop_assert_eq!(a / p, b);
        }
        prop_assert_eq!(compute_time(bytes, &s.device) / p, compute_time(bytes, &exact.device));
        prop_assert_eq!(lookup_time(bytes, &s.device) / p, lookup_time(bytes, &exact.device));
        Ok(())
    })
}

fn dense_domain() -> StrategyDomain {
    let strategies = [Par::Ddp, Par::Fsdp, Par::Tp];
    StrategyDomain(BTreeMap::from([
        ("dense".to_string(), StrategyDomain::product(&strategies)),
        ("embedding".to_string(), vec![PlanEntry::global(Par::Mp)]),
        ("transformer".to_string(), vec![PlanEntry::global(Par::Fsdp)]),
    ]))
}

fn names(r: &[PlanResult]) -> Vec<String> {
    r.iter().map(|x| x.plan.name()).collect()
}

pub fn uniform_scaling_preserves_ranking() -> Result<(), String> {
    let s = (toy(), prop_oneof![Just(-2i32), Just(-1), Just(1), Just(3)]);
    run(24, s, |(t, j)| {
        let mut task = t.task.clone();
        task.kind = TaskKind::Pretrain;
        task.frozen_layers.clear();
        let constraints = Constraints {
            ignore_memory: true,
            ..Default::default()
        };
        let sweep = |s: &SystemSpec| {
            search_optimal(&t.model, s, &task, &dense_domain(), &constraints, Objective::Throughput, None)
        };
        let base = sweep(&t.system).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let k = 2f64.powi(j);
        let scaled = scale_hardware(&t.system, &rates(k)).unwrap();
        let other = sweep(&scaled).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(names(&base), names(&other));
        for (a, b) in base.iter().zip(&other) {
            if let (Some(a), Some(b)) = (&a.summary, &b.summary) {
                prop_assert_eq!(a.overlapped_iter_time / k, b.overlapped_iter_time);
                prop_assert_eq!(a.exposed_comm_fraction, b.exposed_comm_fraction);
            }
        }
        Ok(())
    })?;
    // Same on a shipped fixture with a non-power-of-two factor.
    let f = super::dlrm_a();
    let task = f.task();
    let constraints = f.file.constraints(true);
    let sweep = |s: &SystemSpec| {
        search_optimal(&f.model, s, &task, &f.file.domain(), &constraints, Objective::Throughput, None).unwrap()
    };
    let base = names(&sweep(&f.system));
    for k in [0.5, 3.0, 10.0] {
        let other = names(&sweep(&scale_hardware(&f.system, &rates(k)).unwrap()));
        if base != other {
            return Err(format!("factor {k}: {base:?} vs {other:?}"));
        }
    }
    Ok(())
}

pub fn overlapped_within_serialized() -> Result<(), String> {
    run(128, toy(), |t| {
        let Some((timeline, trace)) = timed(&t) else {
            return Err(TestCaseError::fail("toy failed to simulate"));
        };
        let serialized = trace.serialized_time();
        prop_assert!(timeline.makespan <= serialized * (1.0 + 1e-12));
        let busy = timeline.stream_time(Stream::Compute).max(timeline.stream_time(Stream::Comm));
        prop_assert!(timeline.makespan >= busy * (1.0 - 1e-12));
        Ok(())
    })
}

pub fn exposed_within_comm() -> Result<(), String> {
    run(128, toy(), |t| {
        let Some((timeline, trace)) = timed(&t) else {
            return Err(TestCaseError::fail("toy failed to simulate"));
        };
        let exposed = exposed_comm(&timeline);
        prop_assert!(exposed.total >= 0.0);
        prop_assert!(exposed.total <= trace.comm_time() * (1.0 + 1e-12));
        let parts: f64 = exposed.by_event.values().sum();
        prop_assert!((parts - exposed.total).abs() <= 1e-9 * exposed.total.max(1e-12));
        Ok(())
    })
}

fn comm_signature(model: &ModelArch, plan: &ParallelPlan, task: &TaskSpec, system: &SystemSpec) -> Option<Vec<(String, String, u64)>> {
    let trace = build_streams_with(model, plan, task, system, false).ok()?;
    let mut v: Vec<_> = trace
        .events
        .iter()
        .filter(|e| e.stream == Stream::Comm)
        .map(|e| (e.label.layer.clone(), e.label.op.name().to_string(), e.magnitude.to_bits()))
        .collect();
    v.sort();
    Some(v)
}

pub fn inference_subset_of_pretrain() -> Result<(), String> {
    run(128, toy(), |t| {
        let mut pre = t.task.clone();
        pre.kind = TaskKind::Pretrain;
        pre.frozen_layers.clear();
        let mut inf = pre.clone();
        inf.kind = TaskKind::Inference;
        let p = comm_signature(&t.model, &t.plan, &pre, &t.system).ok_or(TestCaseError::fail("pretrain"))?;
        let i = comm_signature(&t.model, &t.plan, &inf, &t.system).ok_or(TestCaseError::fail("inference"))?;
        let mut pool = p.clone();
        for c in &i {
            let pos = pool.iter().position(|x| x == c);
            prop_assert!(pos.is_some(), "{:?} missing from pretrain collectives", c);
            pool.remove(pos.unwrap());
        }
        Ok(())
    })
}

pub fn prefetch_never_slower() -> Result<(), String> {
    run(128, toy(), |t| {
        let mut off = t.clone();
        off.plan.fsdp_prefetch = false;
        let mut on = t.clone();
        on.plan.fsdp_prefetch = true;
        let (Some((a, _)), Some((b, _))) = (timed(&off), timed(&on)) else {
            return Err(TestCaseError::fail("toy failed to simulate"));
        };
        prop_assert!(b.makespan <= a.makespan, "{} > {}", b.makespan, a.makespan);
        Ok(())
    })?;
    // And on the shipped FSDP language-model plan.
    let f = super::fixture("llama_65b", "llm_a100_2048", "llama_65b_pretrain");
    let mut plan = f.plan();
    let mut t = Vec::new();
    for p in [false, true] {
        plan.fsdp_prefetch = p;
        let trace = build_streams_with(&f.model, &plan, &f.task(), &f.system, true).map_err(|e| e.to_string())?;
        t.push(simulate(&trace).map_err(|e| e.to_string())?.makespan);
    }
    if t[1] > t[0] {
        return Err(format!("llama prefetch {} > {}", t[1], t[0]));
    }
    Ok(())
}

pub fn pareto_dominance_free() -> Result<(), String> {
    let s = (prop::collection::vec((0u8..20, 0u8..20), 0..30), any::<u64>());
    run(256, s, |(pts, seed)| {
        let points: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let front = pareto_indices(&points);
        let dominates = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 && a.1 >= b.1 && a != b;
        for &i in &front {
            prop_assert!(!points.iter().any(|&p| dominates(p, points[i])));
        }
        for i in (0..points.len()).filter(|i| !front.contains(i)) {
            prop_assert!(front.iter().any(|&f| dominates(points[f], points[i])));
        }
        // Order independence: shuffle and compare the frontier as a set.
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut x = seed | 1;
        for i in (1..order.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            order.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let shuffled: Vec<(f64, f64)> = order.iter().map(|&i| points[i]).collect();
        let key = |p: &[(f64, f64)], idx: Vec<usize>| {
            let mut v: Vec<(u64, u64)> = idx.iter().map(|&i| (p[i].0.to_bits(), p[i].1.to_bits())).collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&points, front), key(&shuffled, pareto_indices(&shuffled)));
        Ok(())
    })
}

pub fn deterministic_outputs() -> Result<(), String> {
    let dirs = [tempfile::TempDir::new().unwrap(), tempfile::TempDir::new().unwrap()];
    let commands: [&[&str]; 3] = [
        &["run", "--trace"],
        &["sweep", "--ignore-memory", "--jobs", "3"],
        &["scale-study", "--factors", "1,2,10"],
    ];
    for (i, dir) in dirs.iter().enumerate() {
        for cmd in commands {
            let mut args = vec![cmd[0]];
            args.extend([
                "--model",
                "dlrm_a",
                "--system",
                "zionex_a100_128",
                "--task",
                "dlrm_a_pretrain",
                "--out",
                dir.path().to_str().unwrap(),
            ]);
            args.extend(&cmd[1..]);
            if i == 1 && cmd[0] == "sweep" {
                // A different pool size must not change the output.
                *args.last_mut().unwrap() = "1";
            }
            let o = Command::new(env!("CARGO_BIN_EXE_madmax"))
                .args(&args)
                .env_remove("MADMAX_FIXTURES")
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
    }
    for f in ["report.json", "breakdown.csv", "timeline.trace.json", "sweep.csv", "pareto.csv", "scale.csv"] {
        let a = fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(())
}

pub fn json_round_trip() -> Result<(), String> {
    run(64, toy(), |t| {
        let m = serde_json::to_string(&t.model).unwrap();
        let back: ModelArch = serde_json::from_str(&m).unwrap();
        prop_assert_eq!(&back, &t.model);
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), m);
        let s = serde_json::to_string(&t.system).unwrap();
        let back: SystemSpec = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(&back, &t.system);
        let k = serde_json::to_string(&t.task).unwrap();
        let back: TaskSpec = serde_json::from_str(&k).unwrap();
        prop_assert_eq!(&back, &t.task);
        let p = serde_json::to_string(&t.plan).unwrap();
        let back: ParallelPlan = serde_json::from_str(&p).unwrap();
        prop_assert_eq!(&back, &t.plan);
        Ok(())
    })?;
    for kind in ["models", "systems"] {
        let dir = super::fixtures_dir_of(kind);
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
            let again = if kind == "models" {
                let m: ModelArch = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                let s = serde_json::to_string(&m).unwrap();
                (s.clone(), serde_json::to_string(&serde_json::from_str::<ModelArch>(&s).unwrap()).unwrap())
            } else {
                let m: SystemSpec = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                let s = serde_json::to_string(&m).unwrap();
                (s.clone(), serde_json::to_string(&serde_json::from_str::<SystemSpec>(&s).unwrap()).unwrap())
            };
            if again.0 != again.1 {
                return Err(format!("{} does not round-trip", path.display()));
            }
        }
    }
    Ok(())
}
