//! Input files, fixture lookup and deterministic report writers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::explore::{Constraints, Exclusion, PlanResult, ReportSummary, ScaleRow, StrategyDomain, TrainingDuration};
use crate::model::{
    CollectiveKind, EfficiencyEntry, Level, ModelArch, ModelingOptions, SystemSpec, TaskKind, TaskSpec, WorkUnit,
    SCHEMA_VERSION,
};
use crate::plan::{ParallelPlan, PlanEntry, Strategy};
use crate::sim::{write_chrome_trace, Timeline};

pub const FIXTURES_ENV: &str = "MADMAX_FIXTURES";

/// `$MADMAX_FIXTURES`, or the fixtures shipped with this crate.
pub fn fixtures_dir() -> PathBuf {
    std::env::var_os(FIXTURES_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

fn from_value<T: DeserializeOwned>(path: &Path, v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| parse_error(path, e.path().to_string(), e.inner().to_string()))
}

fn parse_json(path: &Path) -> Result<Value> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, ".", format!("line {} column {}: {e}", e.line(), e.column())))
}

fn check_version(path: &Path, v: &Value) -> Result<()> {
    match v.get("schema_version").and_then(Value::as_str) {
        Some(SCHEMA_VERSION) => Ok(()),
        Some(other) => Err(parse_error(
            path,
            "schema_version",
            format!("unsupported version `{other}`, expected `{SCHEMA_VERSION}`"),
        )),
        None => Err(parse_error(path, "schema_version", "missing string field")),
    }
}

pub fn load_model(path: &Path) -> Result<ModelArch> {
    let v = parse_json(path)?;
    check_version(path, &v)?;
    let m: ModelArch = from_value(path, v)?;
    m.validate().map_err(|e| parse_error(path, ".", e.to_string()))?;
    Ok(m)
}

/// Loads a system. A `collective_efficiency_csv` key names a CSV, relative
/// to the JSON file, whose rows extend the efficiency table.
pub fn load_system(path: &Path) -> Result<SystemSpec> {
    let mut v = parse_json(path)?;
    check_version(path, &v)?;
    let csv = match v.as_object_mut().and_then(|o| o.remove("collective_efficiency_csv")) {
        None => None,
        Some(Value::String(s)) => Some(path.parent().unwrap_or(Path::new(".")).join(s)),
        Some(_) => return Err(parse_error(path, "collective_efficiency_csv", "expected a path string")),
    };
    let mut s: SystemSpec = from_value(path, v)?;
    if let Some(csv) = csv {
        s.collective_efficiency.extend(load_efficiency_csv(&csv)?);
    }
    s.validate().map_err(|e| parse_error(path, ".", e.to_string()))?;
    Ok(s)
}

/// Rows of `collective,level,min_bytes,efficiency`.
pub fn load_efficiency_csv(path: &Path) -> Result<Vec<EfficiencyEntry>> {
    #[derive(Deserialize)]
    struct Row {
        collective: String,
        level: String,
        min_bytes: f64,
        efficiency: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_error(path, ".", e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let at = format!("row {}", i + 1);
        let row = row.map_err(|e| parse_error(path, &at, e.to_string()))?;
        let collective: CollectiveKind = row
            .collective
            .parse()
            .map_err(|e: Error| parse_error(path, format!("{at}.collective"), e.to_string()))?;
        let level: Level = row
            .level
            .parse()
            .map_err(|e: Error| parse_error(path, format!("{at}.level"), e.to_string()))?;
        out.push(EfficiencyEntry {
            collective,
            level,
            min_bytes: row.min_bytes,
            efficiency: row.efficiency,
        });
    }
    Ok(out)
}

/// Candidate entries for one layer type: explicit entries, or the product
/// of per-level strategy lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSpec {
    Levels { intra: Vec<Strategy>, inter: Vec<Strategy> },
    Entries(Vec<PlanEntry>),
    Single(PlanEntry),
}

impl DomainSpec {
    pub fn entries(&self) -> Vec<PlanEntry> {
        match self {
            DomainSpec::Levels { intra, inter } => intra
                .iter()
                .flat_map(|&a| inter.iter().map(move |&b| PlanEntry::new(a, b)))
                .collect(),
            DomainSpec::Entries(v) => v.clone(),
            DomainSpec::Single(e) => vec![*e],
        }
    }
}

/// Contents of task.json: the workload plus either a single plan or a
/// strategy domain to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub kind: TaskKind,
    pub global_batch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_layers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_work: Option<f64>,
    #[serde(default)]
    pub work_unit: WorkUnit,
    #[serde(default)]
    pub options: ModelingOptions,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub plan: BTreeMap<String, PlanEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub plan_overrides: BTreeMap<String, PlanEntry>,
    #[serde(default)]
    pub fsdp_prefetch: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub domain: BTreeMap<String, DomainSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<Exclusion>,
}

impl TaskFile {
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            kind: self.kind,
            global_batch: self.global_batch,
            context_length: self.context_length,
            frozen_layers: self.frozen_layers.clone(),
            total_work: self.total_work,
            work_unit: self.work_unit,
            options: self.options.clone(),
        }
    }

    pub fn plan(&self) -> ParallelPlan {
        ParallelPlan {
            entries: self.plan.clone(),
            overrides: self.plan_overrides.clone(),
            fsdp_prefetch: self.fsdp_prefetch,
        }
    }

    pub fn domain(&self) -> StrategyDomain {
        StrategyDomain(self.domain.iter().map(|(t, d)| (t.clone(), d.entries())).collect())
    }

    pub fn constraints(&self, ignore_memory: bool) -> Constraints {
        Constraints {
            exclude: self.exclude.clone(),
            ignore_memory,
            fsdp_prefetch: self.fsdp_prefetch,
        }
    }
}

pub fn load_task(path: &Path) -> Result<TaskFile> {
    let v = parse_json(path)?;
    check_version(path, &v)?;
    from_value(path, v)
}

/// Loads the trio and checks the task against the model.
pub fn load_inputs(model: &Path, system: &Path, task: &Path) -> Result<(ModelArch, SystemSpec, TaskFile)> {
    let m = load_model(model)?;
    let s = load_system(system)?;
    let t = load_task(task)?;
    t.task().validate(&m).map_err(|e| parse_error(task, ".", e.to_string()))?;
    Ok((m, s, t))
}

/// Six significant digits, fixed notation within a readable range.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.5e}", x.abs());
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits = mant.replace('.', "");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    let body = if !(-4..15).contains(&exp) {
        format!("{}e{exp}", trim(mant.to_string()))
    } else if exp >= 5 {
        format!("{digits}{}", "0".repeat(exp as usize - 5))
    } else if exp >= 0 {
        let (int, frac) = digits.split_at(exp as usize + 1);
        trim(format!("{int}.{frac}"))
    } else {
        trim(format!("0.{}{digits}", "0".repeat((-exp - 1) as usize)))
    };
    if x < 0.0 {
        format!("-{body}")
    } else {
        body
    }
}

fn round_sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pretty JSON with floats rounded to six significant digits.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    round_floats(&mut v);
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, &v)?;
    f.write_all(b"\n").map_err(io_err(path))
}

#[derive(Serialize)]
struct RunReport<'a> {
    model: &'a str,
    system: &'a str,
    summary: &'a ReportSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<TrainingDuration>,
}

pub fn write_report(
    path: &Path,
    model: &ModelArch,
    system: &SystemSpec,
    summary: &ReportSummary,
    training: Option<TrainingDuration>,
) -> Result<()> {
    write_json(
        path,
        &RunReport {
            model: &model.name,
            system: &system.name,
            summary,
            training,
        },
    )
}

/// One row per serialized label, collective kind and exposed collective.
pub fn write_breakdown_csv(path: &Path, summary: &ReportSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["section", "label", "time_ms", "share_pct"])?;
    let sections = [
        ("serialized", &summary.serialized_breakdown, summary.serialized_iter_time),
        ("collective", &summary.collective_breakdown, summary.comm_time),
        ("exposed", &summary.exposed_breakdown, summary.comm_time),
    ];
    for (section, map, total) in sections {
        for (label, t) in map {
            let share = if total > 0.0 { 100.0 * t / total } else { 0.0 };
            w.write_record([section, label, &fmt_sig(t * 1e3), &fmt_sig(share)])?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

/// Ranked plans, one row each.
pub fn write_sweep_csv(path: &Path, results: &[PlanResult], unit: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let throughput = format!("throughput_{unit}");
    w.write_record([
        "rank",
        "plan",
        "feasible",
        "memory_gb",
        "iter_ms",
        "serialized_ms",
        throughput.as_str(),
        "exposed_pct",
        "normalized_gpu_hours_per_unit",
    ])?;
    for (i, r) in results.iter().enumerate() {
        let s = r.summary.as_ref();
        w.write_record([
            (i + 1).to_string(),
            r.plan.name(),
            r.feasible.to_string(),
            fmt_sig(r.memory.total / 1e9),
            opt(s.map(|s| s.overlapped_iter_time * 1e3)),
            opt(s.map(|s| s.serialized_iter_time * 1e3)),
            opt(s.map(|s| s.throughput)),
            opt(s.map(|s| s.exposed_comm_fraction * 100.0)),
            opt(s.map(|s| s.normalized_gpu_hours_per_unit_work)),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_scale_csv(path: &Path, rows: &[ScaleRow], unit: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let throughput = format!("throughput_{unit}");
    w.write_record(["component", "factor", "feasible", "iter_ms", throughput.as_str(), "speedup"])?;
    for r in rows {
        w.write_record([
            r.component.clone(),
            fmt_sig(r.factor),
            r.feasible.to_string(),
            opt(r.iter_time.map(|t| t * 1e3)),
            opt(r.throughput),
            opt(r.speedup),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_trace_file(path: &Path, timeline: &Timeline) -> Result<()> {
    let f = create(path)?;
    write_chrome_trace(timeline, std::io::BufWriter::new(f))
}
