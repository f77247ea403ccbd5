//! End-to-end runs: plan a model, time it, execute it on crossbar state
//! against the integer reference, and collect the reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{run_baseline, BaselineKind, ARRAY_SIZES};
use crate::config::HardwareConfig;
use crate::exec::{simulate_inference, ExecStats};
use crate::metrics::{
    baseline_summary, reconfig_summary, ComparisonReport, RunSummary, REPORT_VERSION,
};
use crate::model::ModelGraph;
use crate::pipeline::{simulate_timing, PipelineTrace, TimingModel};
use crate::plan::{build_plan, MappingPlan, PlanOptions};
use crate::reference::{reference_run, InferenceOutput};
use crate::workload::workload;
use crate::Error;

/// Largest per-entry softmax deviation accepted by the oracle check.
pub const SOFTMAX_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Seeds the synthetic weights and input.
    pub seed: u64,
    pub plan: PlanOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub pass: bool,
    /// Layers whose activations differ from the reference.
    pub mismatched_layers: Vec<u32>,
    pub max_probability_error: f64,
    pub predicted_class: usize,
    pub reference_class: usize,
}

/// Execute `plan` on seeded data and compare with the integer reference.
pub fn check_against_reference(
    graph: &ModelGraph,
    plan: &MappingPlan,
    cfg: &HardwareConfig,
    seed: u64,
) -> Result<(OracleVerdict, ExecStats), Error> {
    let (weights, input) = workload(graph, seed);
    let got = simulate_inference(plan, graph, &weights, &input, cfg)?;
    let want = reference_run(graph, &weights, &input);
    let mismatched_layers = got
        .activations
        .iter()
        .zip(&want.activations)
        .zip(&graph.layers)
        .filter(|((a, b), _)| a != b)
        .map(|(_, l)| l.id)
        .collect::<Vec<_>>();
    let max_probability_error = match (&got.output, &want.output) {
        (InferenceOutput::Probabilities(p), InferenceOutput::Probabilities(q)) => p
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        _ => 0.0,
    };
    let verdict = OracleVerdict {
        pass: mismatched_layers.is_empty() && max_probability_error <= SOFTMAX_TOLERANCE,
        mismatched_layers,
        max_probability_error,
        predicted_class: got.output.argmax(),
        reference_class: want.output.argmax(),
    };
    Ok((verdict, got.stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub version: String,
    pub model: String,
    pub model_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub array: (usize, usize),
    pub include_reset: bool,
    pub canonical_positioning: bool,
    pub stall_cycles: u64,
    pub steady_stall_cycles: u64,
    pub summary: RunSummary,
    pub exec: ExecStats,
    pub oracle: OracleVerdict,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct Simulation {
    pub plan: MappingPlan,
    pub trace: PipelineTrace,
    pub report: SimulationReport,
}

impl Simulation {
    /// Output files as `(name, contents)`, in a fixed order.
    pub fn artifacts(&self) -> Vec<(&'static str, String)> {
        vec![
            ("plan.json", self.plan.to_json()),
            ("trace.csv", self.trace.to_csv(&self.plan)),
            ("report.json", self.report.to_json()),
            ("utilization.csv", utilization_csv(&self.report.summary)),
        ]
    }
}

pub fn config_hash(cfg: &HardwareConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_json().as_bytes()))
}

/// Plan on the configured array, or fail if the model does not fit.
pub fn plan_model(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    options: PlanOptions,
) -> Result<MappingPlan, Error> {
    Ok(build_plan(graph, cfg.array(), options)?)
}

/// Timing, utilization and the oracle check for a given plan.
pub fn simulate_plan(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    plan: MappingPlan,
    seed: u64,
) -> Result<Simulation, Error> {
    plan.validate()?;
    let trace = simulate_timing(&plan, graph, &TimingModel::from_config(cfg));
    trace.check_causality().map_err(Error::Invariant)?;
    let summary = reconfig_summary(&plan, &trace, cfg)?;
    let (oracle, exec) = check_against_reference(graph, &plan, cfg, seed)?;
    let report = SimulationReport {
        version: REPORT_VERSION.into(),
        model: graph.name.clone(),
        model_hash: graph.fingerprint(),
        config_hash: config_hash(cfg),
        seed,
        array: plan.array,
        include_reset: cfg.include_reset,
        canonical_positioning: plan.options.canonical,
        stall_cycles: trace.stall_cycles(),
        steady_stall_cycles: trace.steady_stall_cycles(),
        summary,
        exec,
        oracle,
    };
    Ok(Simulation {
        plan,
        trace,
        report,
    })
}

pub fn simulate(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    settings: RunSettings,
) -> Result<Simulation, Error> {
    let plan = plan_model(graph, cfg, settings.plan)?;
    simulate_plan(graph, cfg, plan, settings.seed)
}

/// Timing-only summary of the reconfigurable accelerator.
pub fn reconfig_run(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    options: PlanOptions,
) -> Result<RunSummary, Error> {
    let plan = plan_model(graph, cfg, options)?;
    let trace = simulate_timing(&plan, graph, &TimingModel::from_config(cfg));
    Ok(reconfig_summary(&plan, &trace, cfg)?)
}

pub fn baseline_run(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    kind: &BaselineKind,
) -> Result<RunSummary, Error> {
    Ok(baseline_summary(&run_baseline(graph, cfg, kind), cfg)?)
}

pub fn all_baselines() -> Vec<BaselineKind> {
    let mut v: Vec<BaselineKind> = ARRAY_SIZES
        .iter()
        .map(|&a| BaselineKind::Static(a))
        .collect();
    v.push(BaselineKind::MultiSize);
    v
}

/// The reconfigurable run against each baseline.
pub fn compare(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    options: PlanOptions,
    baselines: &[BaselineKind],
) -> Result<ComparisonReport, Error> {
    let subject = reconfig_run(graph, cfg, options)?;
    let runs = baselines
        .iter()
        .map(|k| baseline_run(graph, cfg, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ComparisonReport::new(&graph.name, subject, runs))
}

/// Mean spatial utilization against unit array size, for the static
/// mapping and for the reconfigurable plan on an array of that size.
pub fn utilization_sweep(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    options: PlanOptions,
) -> Result<String, Error> {
    let mut s = String::from("array_size,static,reconfig\n");
    for &a in &ARRAY_SIZES {
        let fixed = baseline_run(graph, cfg, &BaselineKind::Static(a))?.mean_spatial;
        let sized = HardwareConfig {
            array_rows: a,
            array_cols: a,
            ..cfg.clone()
        };
        let reconfig = match build_plan(graph, sized.array(), options) {
            Ok(plan) => {
                let trace = simulate_timing(&plan, graph, &TimingModel::from_config(&sized));
                format!(
                    "{:.6}",
                    reconfig_summary(&plan, &trace, &sized)?.mean_spatial
                )
            }
            Err(_) => String::new(),
        };
        let _ = writeln!(s, "{a},{fixed:.6},{reconfig}");
    }
    Ok(s)
}

/// Per-group utilization rows of one run.
pub fn utilization_csv(summary: &RunSummary) -> String {
    let mut s = String::from("run,group,start,end,arrays,spatial,temporal\n");
    for g in &summary.groups {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            summary.name, g.group, g.start, g.end, g.arrays, g.spatial, g.temporal
        );
    }
    s
}
