//! `fbsim`: map, simulate and compare CNNs on a reconfigurable ReRAM
//! crossbar accelerator.
//!
//! Exit status: 0 ok, 1 I/O error, 2 config/model/plan-file error,
//! 3 infeasible plan, 4 oracle mismatch, 5 internal invariant violation.

mod trace_view;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbsim_core::baseline::{run_baseline, BaselineKind};
use fbsim_core::config::HardwareConfig;
use fbsim_core::floorplan::BalanceOptions;
use fbsim_core::metrics::baseline_summary;
use fbsim_core::model::{benchmarks, parse_model, ModelGraph};
use fbsim_core::plan::{MappingPlan, PlanError, PlanOptions};
use fbsim_core::session::{self, utilization_csv};
use fbsim_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "fbsim",
    version,
    about = "Reconfigurable ReRAM crossbar CNN accelerator simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the mapping plan and print the floorplan summary.
    Map(RunArgs),
    /// Plan, time and execute the model; check it against the integer reference.
    Simulate(SimulateArgs),
    /// Run one GEMM-only baseline.
    Baseline(RunArgs),
    /// Compare the reconfigurable accelerator with the baselines.
    Compare(RunArgs),
    /// Summarize a trace file as per-block busy time and a text timeline.
    TraceView(trace_view::TraceViewArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Model file, or a shipped model name (alexnet-cifar, vgg16-cifar, resnet18-cifar, toy-conv-relu-max).
    #[arg(long)]
    model: String,
    /// Hardware config file; defaults to the shipped reference config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `reconfig`, `static-<size>` or `multi-size`. `compare` accepts it
    /// repeatedly to pick baselines (default: all).
    #[arg(long)]
    mode: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write array size vs spatial utilization CSV.
    #[arg(long)]
    emit_plot_data: bool,
    /// Override the config's reset-before-write setting.
    #[arg(long, value_name = "BOOL")]
    include_reset: Option<bool>,
    /// Place independent blocks side by side instead of stacking them.
    #[arg(long)]
    alg1_canonical: bool,
    /// Measure consumer intake in the producer's op width.
    #[arg(long)]
    throughput_index_literal: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use this plan file instead of planning on the fly.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Config(String),
    Infeasible(String),
    Mismatch(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Mismatch(_) => 4,
            Failure::Internal(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m)
            | Failure::Config(m)
            | Failure::Infeasible(m)
            | Failure::Mismatch(m)
            | Failure::Internal(m) => m,
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let m = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::Model(_) => Failure::Config(m),
            CoreError::Lowering(_) => Failure::Infeasible(m),
            CoreError::Plan(p) => match p {
                PlanError::Lowering(_) | PlanError::Floorplan { .. } => Failure::Infeasible(m),
                PlanError::Parse(_) | PlanError::WrongModel { .. } | PlanError::Invalid { .. } => {
                    Failure::Config(m)
                }
                PlanError::Datamap(_) => Failure::Internal(m),
            },
            CoreError::Exec(_) | CoreError::Invariant(_) => Failure::Internal(m),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))
}

/// Write through a temporary file in the same directory, then rename.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let io =
        |e: std::io::Error| Failure::Io(format!("cannot write {}: {e}", dir.join(name).display()));
    fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, &path).map_err(io)?;
    Ok(path)
}

fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    for (name, contents) in files {
        let path = write_atomic(dir, name, contents)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_model(spec: &str) -> Result<ModelGraph> {
    let path = Path::new(spec);
    if path.exists() {
        return parse_model(&read(path)?)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())));
    }
    benchmarks::load(spec).ok_or_else(|| {
        Failure::Config(format!(
            "no model file `{spec}` and no shipped model of that name ({})",
            benchmarks::NAMES.join(", ")
        ))
    })
}

fn load_config(args: &RunArgs) -> Result<HardwareConfig> {
    let mut cfg = match &args.config {
        Some(p) => HardwareConfig::parse(&read(p)?)
            .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => HardwareConfig::reference(),
    };
    if let Some(r) = args.include_reset {
        cfg.include_reset = r;
    }
    Ok(cfg)
}

fn plan_options(args: &RunArgs) -> PlanOptions {
    PlanOptions {
        canonical: args.alg1_canonical,
        balance: BalanceOptions {
            literal_index: args.throughput_index_literal,
        },
    }
}

enum Mode {
    Reconfig,
    Baseline(BaselineKind),
}

fn parse_mode(s: &str) -> Result<Mode> {
    if s == "reconfig" {
        return Ok(Mode::Reconfig);
    }
    s.parse()
        .map(Mode::Baseline)
        .map_err(|e: String| Failure::Config(format!("--mode: {e}")))
}

fn single_mode(args: &RunArgs, default: &str) -> Result<Mode> {
    match args.mode.as_slice() {
        [] => parse_mode(default),
        [m] => parse_mode(m),
        _ => Err(Failure::Config("--mode given more than once".into())),
    }
}

fn cmd_map(args: &RunArgs) -> Result<()> {
    let graph = load_model(&args.model)?;
    let cfg = load_config(args)?;
    let plan = session::plan_model(&graph, &cfg, plan_options(args))?;
    let cells = (plan.array.0 * plan.array.1) as f64;
    let mut summary =
        String::from("ima,group,fb_id,op,layer,origin,extent,dataflow,mapped_cells\n");
    for ima in &plan.imas {
        for fb in &ima.fbs {
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{}:{},{}x{},{},{}",
                ima.ima,
                ima.group,
                fb.fb_id,
                fb.op_kind,
                fb.layer,
                fb.origin.0,
                fb.origin.1,
                fb.extent.0,
                fb.extent.1,
                fb.dataflow.name(),
                fb.mapped_cells()
            );
        }
    }
    let mut layers = String::from("group,layers,arrays,spatial_utilization\n");
    for g in &plan.groups {
        let imas: Vec<_> = plan.imas_of(g.index).collect();
        let mapped: usize = imas.iter().map(|i| i.mapped_cells()).sum();
        let ids: Vec<String> = g
            .layers
            .iter()
            .map(|&i| graph.layers[i].id.to_string())
            .collect();
        let _ = writeln!(
            layers,
            "{},{},{},{:.6}",
            g.index,
            ids.join(" "),
            imas.len(),
            mapped as f64 / (imas.len() as f64 * cells)
        );
    }
    print!("{summary}\n{layers}");
    println!(
        "{} arrays of {}x{}",
        plan.imas.len(),
        plan.array.0,
        plan.array.1
    );
    write_all(
        &args.out,
        &[
            ("plan.json", plan.to_json()),
            ("floorplan.csv", summary),
            ("layers.csv", layers),
        ],
    )
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let run = &args.run;
    if !matches!(single_mode(run, "reconfig")?, Mode::Reconfig) {
        return Err(Failure::Config(
            "simulate runs the reconfigurable accelerator; use `baseline` for baseline modes"
                .into(),
        ));
    }
    let graph = load_model(&run.model)?;
    let cfg = load_config(run)?;
    let sim = match &args.plan {
        Some(p) => {
            let plan = MappingPlan::parse(&read(p)?, &graph)
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            session::simulate_plan(&graph, &cfg, plan, run.seed)?
        }
        None => session::simulate(
            &graph,
            &cfg,
            session::RunSettings {
                seed: run.seed,
                plan: plan_options(run),
            },
        )?,
    };
    let mut files = sim.artifacts();
    if run.emit_plot_data {
        files.push((
            "plot_utilization_vs_array_size.csv",
            session::utilization_sweep(&graph, &cfg, plan_options(run))?,
        ));
    }
    write_all(&run.out, &files)?;
    let r = &sim.report;
    println!(
        "cycles {}  arrays {}  mean spatial {:.4}  mean temporal {:.4}  steady stalls {}",
        r.summary.total_cycles,
        r.summary.arrays,
        r.summary.mean_spatial,
        r.summary.mean_temporal,
        r.steady_stall_cycles
    );
    if r.oracle.pass {
        println!(
            "oracle: PASS (max softmax error {:.2e})",
            r.oracle.max_probability_error
        );
        Ok(())
    } else {
        println!("oracle: FAIL");
        Err(Failure::Mismatch(format!(
            "output differs from the integer reference (layers {:?}, softmax error {:.2e})",
            r.oracle.mismatched_layers, r.oracle.max_probability_error
        )))
    }
}

fn cmd_baseline(args: &RunArgs) -> Result<()> {
    let Mode::Baseline(kind) = single_mode(args, "static-512")? else {
        return Err(Failure::Config(
            "baseline needs a baseline mode (static-<size> or multi-size)".into(),
        ));
    };
    let graph = load_model(&args.model)?;
    let cfg = load_config(args)?;
    let report = run_baseline(&graph, &cfg, &kind);
    let summary = baseline_summary(&report, &cfg).map_err(CoreError::from)?;
    println!(
        "{}: cycles {}  arrays {}  mean spatial {:.4}  mean temporal {:.4}",
        summary.name,
        summary.total_cycles,
        summary.arrays,
        summary.mean_spatial,
        summary.mean_temporal
    );
    let json = serde_json::to_string_pretty(&report).expect("baseline report serializes");
    let mut files = vec![
        ("baseline.json", json),
        ("utilization.csv", utilization_csv(&summary)),
    ];
    if args.emit_plot_data {
        files.push((
            "plot_utilization_vs_array_size.csv",
            session::utilization_sweep(&graph, &cfg, plan_options(args))?,
        ));
    }
    write_all(&args.out, &files)
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let graph = load_model(&args.model)?;
    let cfg = load_config(args)?;
    let mut baselines = Vec::new();
    for m in &args.mode {
        match parse_mode(m)? {
            Mode::Reconfig => {}
            Mode::Baseline(k) => baselines.push(k),
        }
    }
    if baselines.is_empty() {
        baselines = session::all_baselines();
    }
    let report = session::compare(&graph, &cfg, plan_options(args), &baselines)?;
    print!("{}\n{}", report.summary_csv(), report.relative_csv());
    let mut files = vec![
        ("comparison.json", report.to_json()),
        ("summary.csv", report.summary_csv()),
        ("relative.csv", report.relative_csv()),
        ("utilization.csv", report.utilization_csv()),
    ];
    if args.emit_plot_data {
        files.push((
            "plot_utilization_vs_array_size.csv",
            session::utilization_sweep(&graph, &cfg, plan_options(args))?,
        ));
    }
    write_all(&args.out, &files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Map(a) => cmd_map(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Compare(a) => cmd_compare(a),
        Command::TraceView(a) => trace_view::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
