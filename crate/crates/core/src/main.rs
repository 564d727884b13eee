use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use madmax::explore::{evaluate_plan, pareto_frontier, scale_study, search_optimal, throughput_unit, training_duration, Objective};
use madmax::io::{
    fixtures_dir, load_inputs, write_breakdown_csv, write_report, write_scale_csv, write_sweep_csv, write_trace_file,
};
use madmax::model::{ModelArch, SystemSpec};
use madmax::sim::simulate;
use madmax::trace::build_streams;
use madmax::Error;

#[derive(Parser)]
#[command(name = "madmax", version, about = "Analytical performance model for distributed ML workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the plan in the task file.
    Run {
        #[command(flatten)]
        io: IoArgs,
        /// Also write timeline.trace.json.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate every plan in the task file's strategy domain.
    Sweep {
        #[command(flatten)]
        io: IoArgs,
        /// Keep and rank plans that exceed device memory.
        #[arg(long)]
        ignore_memory: bool,
        #[arg(long, default_value = "throughput", value_parser = ["throughput", "gpu-hours", "exposed"])]
        objective: String,
        /// Worker threads for plan evaluation.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Speedups from scaling each hardware component, then all together.
    ScaleStudy {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,10")]
        factors: Vec<f64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write only the Chrome trace of the task file's plan.
    ExportTrace {
        #[command(flatten)]
        io: IoArgs,
    },
}

#[derive(Args)]
struct IoArgs {
    /// Path to model.json, or a fixture name.
    #[arg(long)]
    model: String,
    /// Path to system.json, or a fixture name.
    #[arg(long)]
    system: String,
    /// Path to task.json, or a fixture name.
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Enable FSDP parameter prefetching.
    #[arg(long)]
    prefetch: bool,
    /// Peak FLOP/s that GPU-hours are normalized to.
    #[arg(long)]
    reference_peak: Option<f64>,
}

/// Existing paths win; bare names resolve inside the fixture directory.
fn resolve(arg: &str, kind: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.exists() || p.extension().is_some() || p.components().count() > 1 {
        return p;
    }
    fixtures_dir().join(kind).join(format!("{arg}.json"))
}

struct Inputs {
    model: ModelArch,
    system: SystemSpec,
    file: madmax::io::TaskFile,
}

impl IoArgs {
    fn load(&self) -> madmax::Result<Inputs> {
        let (model, system, mut file) = load_inputs(
            &resolve(&self.model, "models"),
            &resolve(&self.system, "systems"),
            &resolve(&self.task, "tasks"),
        )?;
        file.fsdp_prefetch |= self.prefetch;
        if let Some(p) = self.reference_peak {
            if !(p.is_finite() && p > 0.0) {
                return Err(invalid("--reference-peak must be positive"));
            }
        }
        fs::create_dir_all(&self.out).map_err(|source| Error::Io {
            path: self.out.clone(),
            source,
        })?;
        Ok(Inputs { model, system, file })
    }
}

fn invalid(reason: &str) -> Error {
    Error::Invalid {
        what: "arguments".into(),
        reason: reason.into(),
    }
}

fn set_jobs(jobs: Option<usize>) -> madmax::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(invalid("--jobs must be at least 1"));
        }
        // Only fails if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> madmax::Result<()> {
    match cli.command {
        Command::Run { io, trace } => {
            let inp = io.load()?;
            let (task, plan) = (inp.file.task(), inp.file.plan());
            let r = evaluate_plan(&inp.model, &plan, &task, &inp.system, io.reference_peak, true)?;
            let Some(summary) = r.summary else {
                return Err(Error::Infeasible(r.infeasibility.expect("untimed plan is infeasible")));
            };
            let training = task.total_work.map(|_| training_duration(&summary, &task, &inp.system)).transpose()?;
            write_report(&io.out.join("report.json"), &inp.model, &inp.system, &summary, training)?;
            write_breakdown_csv(&io.out.join("breakdown.csv"), &summary)?;
            if trace {
                export(&inp, &io.out)?;
            }
            println!("plan        {}", summary.plan);
            println!("iteration   {:.4} ms overlapped, {:.4} ms serialized", summary.overlapped_iter_time * 1e3, summary.serialized_iter_time * 1e3);
            println!("throughput  {:.6e} {}", summary.throughput, summary.throughput_unit);
            println!("exposed     {:.2}% of communication", summary.exposed_comm_fraction * 100.0);
            println!("memory      {:.3} GB of {:.3} GB", summary.memory.total / 1e9, summary.memory.capacity / 1e9);
            if let Some(d) = training {
                println!("training    {:.3} days, {:.0} device-hours", d.days, d.device_hours);
            }
        }
        Command::Sweep {
            io,
            ignore_memory,
            objective,
            jobs,
        } => {
            set_jobs(jobs)?;
            let inp = io.load()?;
            let task = inp.file.task();
            let objective: Objective = objective.parse()?;
            let results = search_optimal(
                &inp.model,
                &inp.system,
                &task,
                &inp.file.domain(),
                &inp.file.constraints(ignore_memory),
                objective,
                io.reference_peak,
            )?;
            let unit = throughput_unit(&task);
            write_sweep_csv(&io.out.join("sweep.csv"), &results, unit)?;
            write_sweep_csv(&io.out.join("pareto.csv"), &pareto_frontier(&results), unit)?;
            println!("{} plans evaluated; best {}", results.len(), results[0].plan.name());
        }
        Command::ScaleStudy { io, factors, jobs } => {
            set_jobs(jobs)?;
            let inp = io.load()?;
            let task = inp.file.task();
            let rows = scale_study(&inp.model, &inp.file.plan(), &task, &inp.system, &factors)?;
            write_scale_csv(&io.out.join("scale.csv"), &rows, throughput_unit(&task))?;
            println!("{} scaling rows written", rows.len());
        }
        Command::ExportTrace { io } => {
            let inp = io.load()?;
            export(&inp, &io.out)?;
        }
    }
    Ok(())
}

fn export(inp: &Inputs, out: &Path) -> madmax::Result<()> {
    let trace = build_streams(&inp.model, &inp.file.plan(), &inp.file.task(), &inp.system)?;
    write_trace_file(&out.join("timeline.trace.json"), &simulate(&trace)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) | Error::NoFeasiblePlan { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
