//! Hardware configuration: architecture parameters and unit costs.
//!
//! Every cost field carries its unit in the name. The shipped default is
//! `configs/default.json`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::LogicCost;

pub const CONFIG_VERSION: &str = "v1";
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSpec {
    pub power_mw: f64,
    pub area_mm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyCosts {
    pub cell_read_pj: f64,
    pub cell_write_pj: f64,
    pub dac_drive_pj: f64,
    pub sna_op_pj: f64,
    pub controller_cycle_pj: f64,
    pub register_access_pj_per_byte: f64,
    pub edram_pj_per_byte: f64,
    pub digital_op_pj: f64,
    pub lut_lookup_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaCosts {
    pub cell_um2: f64,
    pub dac_per_row_um2: f64,
    pub sna_per_ima_mm2: f64,
    pub ir_mm2_per_kb: f64,
    pub or_mm2_per_kb: f64,
    pub controller_per_tile_mm2: f64,
    pub edram_per_tile_mm2: f64,
    pub lut_per_tile_mm2: f64,
    /// Pooling/activation/softmax units of a GEMM-only tile.
    pub digital_units_per_tile_mm2: f64,
}

/// Cycle costs of the digital units used by GEMM-only baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitalCosts {
    /// Cycles of one two-input comparison (pooling, ReLU).
    pub compare_cycles: u64,
    pub add_cycles: u64,
    pub softmax_cycles_per_class: u64,
    /// Operations the digital units of a tile complete in parallel.
    pub lanes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub version: String,
    pub tiles: usize,
    pub imas_per_tile: usize,
    pub array_rows: usize,
    pub array_cols: usize,
    pub clock_mhz: f64,
    /// Bitline conversions the ADC bank of one array completes per cycle.
    pub adc_columns_per_cycle: usize,
    /// ADC resolution per square array size (key: side length).
    pub adc_bits: BTreeMap<String, u32>,
    /// Per-array ADC bank cost per resolution (key: bits).
    pub adc: BTreeMap<String, AdcSpec>,
    pub ir_capacity_kb: f64,
    pub or_capacity_kb: f64,
    pub cmp_cycles_per_2bits: u64,
    pub sel_cycles: u64,
    pub softmax_cycles_per_class: u64,
    pub movement_bytes_per_cycle: u64,
    /// Cell precision of the GEMM-only baselines.
    pub baseline_cell_bits: u32,
    pub include_reset: bool,
    pub energy: EnergyCosts,
    pub area: AreaCosts,
    pub digital: DigitalCosts,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON for the v1 schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("missing cost entry `{0}`")]
    MissingCost(String),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

impl HardwareConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: HardwareConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reference() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(
                "version",
                format!("expected \"{CONFIG_VERSION}\", got \"{}\"", self.version),
            ));
        }
        for (name, v) in [
            ("tiles", self.tiles),
            ("imas_per_tile", self.imas_per_tile),
            ("array_rows", self.array_rows),
            ("array_cols", self.array_cols),
            ("adc_columns_per_cycle", self.adc_columns_per_cycle),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.movement_bytes_per_cycle == 0 || self.digital.lanes == 0 {
            return Err(invalid(
                "movement_bytes_per_cycle/digital.lanes",
                "must be at least 1",
            ));
        }
        if !(1..=8).contains(&self.baseline_cell_bits) {
            return Err(invalid("baseline_cell_bits", "must be in 1..=8"));
        }
        if self.clock_mhz <= 0.0 {
            return Err(invalid("clock_mhz", "must be positive"));
        }
        let e = &self.energy;
        let a = &self.area;
        let costs = [
            ("energy.cell_read_pj", e.cell_read_pj),
            ("energy.cell_write_pj", e.cell_write_pj),
            ("energy.dac_drive_pj", e.dac_drive_pj),
            ("energy.sna_op_pj", e.sna_op_pj),
            ("energy.controller_cycle_pj", e.controller_cycle_pj),
            (
                "energy.register_access_pj_per_byte",
                e.register_access_pj_per_byte,
            ),
            ("energy.edram_pj_per_byte", e.edram_pj_per_byte),
            ("energy.digital_op_pj", e.digital_op_pj),
            ("energy.lut_lookup_pj", e.lut_lookup_pj),
            ("area.cell_um2", a.cell_um2),
            ("area.dac_per_row_um2", a.dac_per_row_um2),
            ("area.sna_per_ima_mm2", a.sna_per_ima_mm2),
            ("area.ir_mm2_per_kb", a.ir_mm2_per_kb),
            ("area.or_mm2_per_kb", a.or_mm2_per_kb),
            ("area.controller_per_tile_mm2", a.controller_per_tile_mm2),
            ("area.edram_per_tile_mm2", a.edram_per_tile_mm2),
            ("area.lut_per_tile_mm2", a.lut_per_tile_mm2),
            (
                "area.digital_units_per_tile_mm2",
                a.digital_units_per_tile_mm2,
            ),
            ("ir_capacity_kb", self.ir_capacity_kb),
            ("or_capacity_kb", self.or_capacity_kb),
        ];
        for (name, v) in costs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(
                    name,
                    format!("cost must be a finite value >= 0, got {v}"),
                ));
            }
        }
        for (bits, spec) in &self.adc {
            if !(spec.power_mw >= 0.0 && spec.area_mm2 >= 0.0) {
                return Err(invalid(&format!("adc.{bits}"), "costs must be >= 0"));
            }
        }
        // Every simulated array size needs an ADC resolution with costs.
        self.adc_spec(self.array_rows.max(self.array_cols))?;
        Ok(())
    }

    pub fn array(&self) -> (usize, usize) {
        (self.array_rows, self.array_cols)
    }

    pub fn array_cells(&self) -> usize {
        self.array_rows * self.array_cols
    }

    pub fn adc_bits_for(&self, side: usize) -> Result<u32, ConfigError> {
        self.adc_bits
            .get(&side.to_string())
            .copied()
            .ok_or_else(|| ConfigError::MissingCost(format!("adc_bits.{side}")))
    }

    pub fn adc_spec(&self, side: usize) -> Result<&AdcSpec, ConfigError> {
        let bits = self.adc_bits_for(side)?;
        self.adc
            .get(&bits.to_string())
            .ok_or_else(|| ConfigError::MissingCost(format!("adc.{bits}")))
    }

    /// Energy of one bitline conversion: bank power spread over its
    /// conversion rate.
    pub fn adc_pj_per_conversion(&self, side: usize) -> Result<f64, ConfigError> {
        let spec = self.adc_spec(side)?;
        // mW / (conversions/s) = mJ per conversion; 1 mJ = 1e9 pJ.
        Ok(spec.power_mw / (self.adc_columns_per_cycle as f64 * self.clock_mhz * 1e6) * 1e9)
    }

    pub fn logic_cost(&self) -> LogicCost {
        LogicCost {
            cmp_cycles_per_2bits: self.cmp_cycles_per_2bits,
            sel_cycles: self.sel_cycles,
        }
    }

    /// Same config with every unit energy and area cost multiplied by `k`.
    pub fn scaled_costs(&self, k: f64) -> Self {
        let mut c = self.clone();
        let e = &mut c.energy;
        for v in [
            &mut e.cell_read_pj,
            &mut e.cell_write_pj,
            &mut e.dac_drive_pj,
            &mut e.sna_op_pj,
            &mut e.controller_cycle_pj,
            &mut e.register_access_pj_per_byte,
            &mut e.edram_pj_per_byte,
            &mut e.digital_op_pj,
            &mut e.lut_lookup_pj,
        ] {
            *v *= k;
        }
        let a = &mut c.area;
        for v in [
            &mut a.cell_um2,
            &mut a.dac_per_row_um2,
            &mut a.sna_per_ima_mm2,
            &mut a.ir_mm2_per_kb,
            &mut a.or_mm2_per_kb,
            &mut a.controller_per_tile_mm2,
            &mut a.edram_per_tile_mm2,
            &mut a.lut_per_tile_mm2,
            &mut a.digital_units_per_tile_mm2,
        ] {
            *v *= k;
        }
        for spec in c.adc.values_mut() {
            spec.power_mw *= k;
            spec.area_mm2 *= k;
        }
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
