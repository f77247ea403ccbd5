//! Utilization, energy and area accounting shared by the reconfigurable
//! simulator and the GEMM-only baselines, plus the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineReport;
use crate::config::{ConfigError, HardwareConfig};
use crate::pipeline::{EventCounts, PipelineTrace};
use crate::plan::MappingPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUtilization {
    pub group: usize,
    pub start: u64,
    pub end: u64,
    pub arrays: usize,
    pub spatial: f64,
    pub temporal: f64,
}

/// Everything the comparison needs about one accelerator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub total_cycles: u64,
    pub arrays: usize,
    pub groups: Vec<GroupUtilization>,
    pub mean_spatial: f64,
    pub mean_temporal: f64,
    pub spatial_stddev: f64,
    /// Activated cell-cycles over all allocated cells for the whole run.
    pub overall_temporal: f64,
    pub energy_pj: BTreeMap<String, f64>,
    pub area_mm2: BTreeMap<String, f64>,
    pub events: EventCounts,
}

impl RunSummary {
    pub fn total_energy_pj(&self) -> f64 {
        self.energy_pj.values().sum()
    }

    pub fn total_area_mm2(&self) -> f64 {
        self.area_mm2.values().sum()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation.
pub fn stddev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

/// Energy per event class in pJ. In-array logic gates are priced as one
/// output-cell write each.
pub fn energy_breakdown(
    events: &EventCounts,
    cfg: &HardwareConfig,
) -> Result<BTreeMap<String, f64>, ConfigError> {
    let e = &cfg.energy;
    let mut adc = 0.0;
    for (&side, &n) in &events.adc_conversions {
        adc += n as f64 * cfg.adc_pj_per_conversion(side)?;
    }
    Ok(BTreeMap::from([
        ("adc".to_string(), adc),
        (
            "cell_read".into(),
            events.cell_reads as f64 * e.cell_read_pj,
        ),
        (
            "cell_write".into(),
            (events.cell_writes + events.logic_gates) as f64 * e.cell_write_pj,
        ),
        (
            "controller".into(),
            events.controller_cycles as f64 * e.controller_cycle_pj,
        ),
        ("dac".into(), events.dac_drives as f64 * e.dac_drive_pj),
        (
            "digital".into(),
            events.digital_ops as f64 * e.digital_op_pj,
        ),
        (
            "edram".into(),
            events.edram_bytes as f64 * e.edram_pj_per_byte,
        ),
        ("lut".into(), events.lut_lookups as f64 * e.lut_lookup_pj),
        (
            "register".into(),
            events.register_bytes as f64 * e.register_access_pj_per_byte,
        ),
        ("sna".into(), events.sna_ops as f64 * e.sna_op_pj),
    ]))
}

fn array_area(cfg: &HardwareConfig, side: usize) -> Result<(f64, f64, f64), ConfigError> {
    let a = &cfg.area;
    let cells = (side * side) as f64 * a.cell_um2 * 1e-6;
    let dac = side as f64 * a.dac_per_row_um2 * 1e-6;
    Ok((cells, dac, cfg.adc_spec(side)?.area_mm2))
}

fn ima_area(cfg: &HardwareConfig) -> f64 {
    let a = &cfg.area;
    a.sna_per_ima_mm2 + a.ir_mm2_per_kb * cfg.ir_capacity_kb + a.or_mm2_per_kb * cfg.or_capacity_kb
}

/// Area of the arrays a plan occupies, one array per IMA, with the tiles
/// that host them.
pub fn reconfig_area(
    plan: &MappingPlan,
    cfg: &HardwareConfig,
) -> Result<BTreeMap<String, f64>, ConfigError> {
    let n = plan.imas.len() as f64;
    let tiles = plan.imas.len().div_ceil(cfg.imas_per_tile) as f64;
    let side = plan.array.0.max(plan.array.1);
    let (cells, dac, adc) = array_area(cfg, side)?;
    let a = &cfg.area;
    Ok(BTreeMap::from([
        ("adc".to_string(), n * adc),
        ("cells".into(), n * cells),
        ("dac".into(), n * dac),
        ("ima_periphery".into(), n * ima_area(cfg)),
        (
            "tile".into(),
            tiles * (a.controller_per_tile_mm2 + a.edram_per_tile_mm2 + a.lut_per_tile_mm2),
        ),
    ]))
}

/// Baseline area: smaller arrays are packed into IMAs of the same total
/// cell budget as one full-size array; tiles carry digital units.
pub fn baseline_area(
    report: &BaselineReport,
    cfg: &HardwareConfig,
) -> Result<BTreeMap<String, f64>, ConfigError> {
    let full = cfg.array_rows.max(cfg.array_cols);
    let (mut cells, mut dac, mut adc, mut imas) = (0.0, 0.0, 0.0, 0usize);
    for (&side, &n) in &report.arrays_by_size {
        let (c, d, a) = array_area(cfg, side)?;
        cells += n as f64 * c;
        dac += n as f64 * d;
        adc += n as f64 * a;
        let per_ima = ((full / side) * (full / side)).max(1);
        imas += n.div_ceil(per_ima);
    }
    let tiles = imas.div_ceil(cfg.imas_per_tile) as f64;
    let a = &cfg.area;
    Ok(BTreeMap::from([
        ("adc".to_string(), adc),
        ("cells".into(), cells),
        ("dac".into(), dac),
        ("ima_periphery".into(), imas as f64 * ima_area(cfg)),
        (
            "tile".into(),
            tiles
                * (a.controller_per_tile_mm2 + a.edram_per_tile_mm2 + a.digital_units_per_tile_mm2),
        ),
    ]))
}

fn finish(
    name: String,
    total_cycles: u64,
    arrays: usize,
    groups: Vec<GroupUtilization>,
    overall_temporal: f64,
    energy_pj: BTreeMap<String, f64>,
    events: EventCounts,
    area_mm2: BTreeMap<String, f64>,
) -> RunSummary {
    let spatial: Vec<f64> = groups.iter().map(|g| g.spatial).collect();
    let temporal: Vec<f64> = groups.iter().map(|g| g.temporal).collect();
    RunSummary {
        name,
        total_cycles,
        arrays,
        mean_spatial: mean(&spatial),
        mean_temporal: mean(&temporal),
        spatial_stddev: stddev(&spatial),
        overall_temporal,
        groups,
        energy_pj,
        area_mm2,
        events,
    }
}

/// Per-group utilization of the reconfigurable run. Only groups holding a
/// GEMM layer are counted, matching the baselines.
pub fn reconfig_summary(
    plan: &MappingPlan,
    trace: &PipelineTrace,
    cfg: &HardwareConfig,
) -> Result<RunSummary, ConfigError> {
    let cells = (plan.array.0 * plan.array.1) as f64;
    let mut groups = Vec::new();
    for span in &trace.groups {
        if plan.imas_of(span.group).all(|i| i.gemm().is_none()) {
            continue;
        }
        let imas: Vec<_> = plan.imas_of(span.group).collect();
        let mapped: usize = imas.iter().map(|i| i.mapped_cells()).sum();
        let activated: u128 = trace
            .imas
            .iter()
            .filter(|t| t.group == span.group)
            .map(|t| t.activated_in(&plan.imas[t.ima], span.start, span.end))
            .sum();
        let n = imas.len() as f64;
        groups.push(GroupUtilization {
            group: span.group,
            start: span.start,
            end: span.end,
            arrays: imas.len(),
            spatial: mapped as f64 / (n * cells),
            temporal: activated as f64 / ((span.end - span.start) as f64 * n * cells),
        });
    }
    let events = trace.events();
    let overall = trace.activated_cell_cycles(plan) as f64
        / (trace.total_cycles as f64 * plan.imas.len() as f64 * cells);
    Ok(finish(
        "reconfig".into(),
        trace.total_cycles,
        plan.imas.len(),
        groups,
        overall,
        energy_breakdown(&events, cfg)?,
        events,
        reconfig_area(plan, cfg)?,
    ))
}

pub fn baseline_summary(
    report: &BaselineReport,
    cfg: &HardwareConfig,
) -> Result<RunSummary, ConfigError> {
    let groups = report
        .groups
        .iter()
        .map(|g| GroupUtilization {
            group: g.group,
            start: g.start,
            end: g.end,
            arrays: g.arrays,
            spatial: g.spatial_utilization,
            temporal: g.temporal_utilization,
        })
        .collect();
    let overall = report.activated_cell_cycles as f64
        / (report.total_cycles as f64 * report.total_cells() as f64);
    Ok(finish(
        report.name.clone(),
        report.total_cycles,
        report.arrays_by_size.values().sum(),
        groups,
        overall,
        energy_breakdown(&report.events, cfg)?,
        report.events.clone(),
        baseline_area(report, cfg)?,
    ))
}

/// `subject` relative to `base`: >1 means `subject` is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relative {
    pub baseline: String,
    pub speedup: f64,
    pub energy_efficiency: f64,
    /// Throughput per area.
    pub area_efficiency: f64,
}

pub fn relative(subject: &RunSummary, base: &RunSummary) -> Relative {
    let t = |s: &RunSummary| s.total_cycles as f64;
    Relative {
        baseline: base.name.clone(),
        speedup: t(base) / t(subject),
        energy_efficiency: base.total_energy_pj() / subject.total_energy_pj(),
        area_efficiency: (t(base) * base.total_area_mm2())
            / (t(subject) * subject.total_area_mm2()),
    }
}

/// ADC bank cost of covering one `big × big` array with `(big/small)²`
/// small arrays: (power ratio, area ratio) of small over big.
pub fn adc_tradeoff(
    cfg: &HardwareConfig,
    small: usize,
    big: usize,
) -> Result<(f64, f64), ConfigError> {
    let n = ((big / small) * (big / small)) as f64;
    let (s, b) = (cfg.adc_spec(small)?, cfg.adc_spec(big)?);
    Ok((n * s.power_mw / b.power_mw, n * s.area_mm2 / b.area_mm2))
}

pub const REPORT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub version: String,
    pub model: String,
    pub runs: Vec<RunSummary>,
    /// First run relative to each of the others.
    pub relative: Vec<Relative>,
}

impl ComparisonReport {
    pub fn new(model: &str, subject: RunSummary, baselines: Vec<RunSummary>) -> Self {
        let relative = baselines.iter().map(|b| relative(&subject, b)).collect();
        let mut runs = vec![subject];
        runs.extend(baselines);
        Self {
            version: REPORT_VERSION.into(),
            model: model.into(),
            runs,
            relative,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per run.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "run,total_cycles,arrays,mean_spatial,mean_temporal,spatial_stddev,overall_temporal,energy_pj,area_mm2\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.6}",
                r.name,
                r.total_cycles,
                r.arrays,
                r.mean_spatial,
                r.mean_temporal,
                r.spatial_stddev,
                r.overall_temporal,
                r.total_energy_pj(),
                r.total_area_mm2()
            );
        }
        s
    }

    /// One row per (run, group): the utilization plot data.
    pub fn utilization_csv(&self) -> String {
        let mut s = String::from("run,group,start,end,arrays,spatial,temporal\n");
        for r in &self.runs {
            for g in &r.groups {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{:.6},{:.6}",
                    r.name, g.group, g.start, g.end, g.arrays, g.spatial, g.temporal
                );
            }
        }
        s
    }

    pub fn relative_csv(&self) -> String {
        let mut s = String::from("baseline,speedup,energy_efficiency,area_efficiency\n");
        for r in &self.relative {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r.baseline, r.speedup, r.energy_efficiency, r.area_efficiency
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stddev_is_population() {
        assert_eq!(stddev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
        assert_eq!(stddev(&[]), 0.0);
    }

    #[test]
    fn adc_tradeoff_reference_values() {
        let cfg = HardwareConfig::reference();
        let (p, a) = adc_tradeoff(&cfg, 128, 512).unwrap();
        assert!((p - 16.0 * 8.0 / 37.6).abs() < 1e-12);
        assert!((a - 16.0 * 0.0006 / 0.0026).abs() < 1e-12);
    }

    #[test]
    fn energy_is_linear_in_unit_costs() {
        let cfg = HardwareConfig::reference();
        let ev = EventCounts {
            cell_reads: 1000,
            cell_writes: 10,
            adc_conversions: BTreeMap::from([(512, 64)]),
            edram_bytes: 7,
            logic_gates: 3,
            ..Default::default()
        };
        let e1: f64 = energy_breakdown(&ev, &cfg).unwrap().values().sum();
        let e3: f64 = energy_breakdown(&ev, &cfg.scaled_costs(3.0))
            .unwrap()
            .values()
            .sum();
        assert!((e3 - 3.0 * e1).abs() < 1e-9 * e3);
    }
}
