//! Mapping plans: the placed and sized blocks of every array, serializable
//! as the `map` command's JSON output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamap::{CellAssignment, Dataflow, DatamapError, TileLayout};
use crate::floorplan::{
    check_constraints, floorplan, BalanceOptions, FbShape, FloorplanError, Placement, SequencePair,
};
use crate::lowering::{lower_to_fbs, FbId, FbOp, FbRequirement, LayerGroup, LoweringError};
use crate::model::{LayerId, LayerKind, ModelGraph};

pub const PLAN_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Place non-accumulating blocks to the right of their predecessor
    /// instead of below it.
    pub canonical: bool,
    pub balance: BalanceOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedFb {
    pub fb_id: FbId,
    pub op_kind: LayerKind,
    pub layer: LayerId,
    pub origin: (usize, usize),
    pub extent: (usize, usize),
    pub dataflow: Dataflow,
    pub bx: usize,
    pub by: usize,
    pub ops_per_layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulates_with: Option<FbId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fused_relu: bool,
    pub op: FbOp,
    pub layout: TileLayout,
}

impl PlannedFb {
    pub fn placement(&self) -> Placement {
        Placement {
            fb_id: self.fb_id,
            origin: self.origin,
            extent: self.extent,
        }
    }

    pub fn requirement(&self) -> FbRequirement {
        FbRequirement {
            fb_id: self.fb_id,
            op_kind: self.op_kind,
            bx: self.bx,
            by: self.by,
            ops_per_layer: self.ops_per_layer,
            accumulates_with: self.accumulates_with,
            layer: self.layer,
            fused_relu: self.fused_relu,
        }
    }

    pub fn shape(&self) -> FbShape {
        FbShape {
            fb_id: self.fb_id,
            nx: self.extent.0,
            ny: self.extent.1,
        }
    }

    pub fn assignment(&self) -> CellAssignment {
        CellAssignment::new(self.placement(), self.layout.clone())
            .expect("planned blocks hold whole tiles")
    }

    pub fn replicas(&self) -> (usize, usize) {
        (self.extent.0 / self.bx, self.extent.1 / self.by)
    }

    pub fn replica_count(&self) -> usize {
        let (a, b) = self.replicas();
        a * b
    }

    pub fn mapped_cells(&self) -> usize {
        self.replica_count() * self.layout.tile_mapped_cells()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImaMapping {
    pub ima: usize,
    pub group: usize,
    pub final_chunk: bool,
    pub sequence_pair: SequencePair,
    pub fbs: Vec<PlannedFb>,
}

impl ImaMapping {
    pub fn fb(&self, id: FbId) -> &PlannedFb {
        self.fbs
            .iter()
            .find(|f| f.fb_id == id)
            .expect("block id exists")
    }

    pub fn gemm(&self) -> Option<&PlannedFb> {
        self.fbs.iter().find(|f| matches!(f.op, FbOp::Gemm { .. }))
    }

    pub fn mapped_cells(&self) -> usize {
        self.fbs.iter().map(PlannedFb::mapped_cells).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub version: String,
    pub model: String,
    pub fingerprint: String,
    pub array: (usize, usize),
    pub options: PlanOptions,
    pub groups: Vec<LayerGroup>,
    pub imas: Vec<ImaMapping>,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error("array {ima}: {source}")]
    Floorplan { ima: usize, source: FloorplanError },
    #[error("plan is not valid JSON for the v1 schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("plan was made for model {found}, not {expected}")]
    WrongModel { expected: String, found: String },
    #[error("array {ima}: {message}")]
    Invalid { ima: usize, message: String },
    #[error(transparent)]
    Datamap(#[from] DatamapError),
}

pub fn build_plan(
    graph: &ModelGraph,
    array: (usize, usize),
    options: PlanOptions,
) -> Result<MappingPlan, PlanError> {
    let lowered = lower_to_fbs(graph, array, options.balance)?;
    let mut imas = Vec::with_capacity(lowered.imas.len());
    for ima in &lowered.imas {
        let reqs = ima.requirements();
        let (sp, shapes, placements) = floorplan(&reqs, array, options.canonical, options.balance)
            .map_err(|source| PlanError::Floorplan {
                ima: ima.ima,
                source,
            })?;
        let fbs = ima
            .fbs
            .iter()
            .zip(&shapes)
            .map(|(fb, shape)| {
                debug_assert_eq!(fb.req.fb_id, shape.fb_id);
                let p = placements
                    .iter()
                    .find(|p| p.fb_id == fb.req.fb_id)
                    .expect("every block is placed");
                PlannedFb {
                    fb_id: fb.req.fb_id,
                    op_kind: fb.req.op_kind,
                    layer: fb.req.layer,
                    origin: p.origin,
                    extent: p.extent,
                    dataflow: fb.layout.dataflow(),
                    bx: fb.req.bx,
                    by: fb.req.by,
                    ops_per_layer: fb.req.ops_per_layer,
                    accumulates_with: fb.req.accumulates_with,
                    fused_relu: fb.req.fused_relu,
                    op: fb.op.clone(),
                    layout: fb.layout.clone(),
                }
            })
            .collect();
        imas.push(ImaMapping {
            ima: ima.ima,
            group: ima.group,
            final_chunk: ima.final_chunk,
            sequence_pair: sp,
            fbs,
        });
    }
    Ok(MappingPlan {
        version: PLAN_VERSION.into(),
        model: graph.name.clone(),
        fingerprint: graph.fingerprint(),
        array,
        options,
        groups: lowered.groups,
        imas,
    })
}

impl MappingPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Parse a plan and check it belongs to `graph` and is internally sound.
    pub fn parse(text: &str, graph: &ModelGraph) -> Result<Self, PlanError> {
        let plan: MappingPlan = serde_json::from_str(text)?;
        if plan.version != PLAN_VERSION {
            return Err(PlanError::Invalid {
                ima: 0,
                message: format!("unsupported plan version {:?}", plan.version),
            });
        }
        if plan.fingerprint != graph.fingerprint() {
            return Err(PlanError::WrongModel {
                expected: graph.name.clone(),
                found: plan.model,
            });
        }
        plan.validate()?;
        Ok(plan)
    }

    /// Geometric and sizing checks: in bounds, whole tiles, pairwise
    /// disjoint, and every balancing constraint satisfied.
    pub fn validate(&self) -> Result<(), PlanError> {
        let (rows, cols) = self.array;
        for ima in &self.imas {
            let bad = |message: String| PlanError::Invalid {
                ima: ima.ima,
                message,
            };
            for (i, a) in ima.fbs.iter().enumerate() {
                let end = a.placement().end();
                if end.0 > rows || end.1 > cols {
                    return Err(bad(format!(
                        "FB{} ends at {end:?} outside {rows}x{cols}",
                        a.fb_id
                    )));
                }
                if a.layout.tile() != (a.bx, a.by) {
                    return Err(bad(format!(
                        "FB{} layout tile {:?} != ({}, {})",
                        a.fb_id,
                        a.layout.tile(),
                        a.bx,
                        a.by
                    )));
                }
                CellAssignment::new(a.placement(), a.layout.clone())?;
                for b in &ima.fbs[i + 1..] {
                    if a.placement().overlaps(&b.placement()) {
                        return Err(bad(format!("FB{} overlaps FB{}", a.fb_id, b.fb_id)));
                    }
                }
            }
            let reqs: Vec<FbRequirement> = ima.fbs.iter().map(PlannedFb::requirement).collect();
            let shapes: Vec<FbShape> = ima.fbs.iter().map(PlannedFb::shape).collect();
            check_constraints(&reqs, &shapes, self.array, self.options.balance).map_err(
                |source| PlanError::Floorplan {
                    ima: ima.ima,
                    source,
                },
            )?;
        }
        Ok(())
    }

    pub fn imas_of(&self, group: usize) -> impl Iterator<Item = &ImaMapping> {
        self.imas.iter().filter(move |i| i.group == group)
    }

    pub fn mapped_cells(&self) -> usize {
        self.imas.iter().map(ImaMapping::mapped_cells).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmarks;

    #[test]
    fn toy_plan_round_trips() {
        let g = benchmarks::load("toy-conv-relu-max").unwrap();
        let plan = build_plan(&g, (128, 128), PlanOptions::default()).unwrap();
        plan.validate().unwrap();
        let again = MappingPlan::parse(&plan.to_json(), &g).unwrap();
        assert_eq!(again, plan);
        assert_eq!(
            plan.to_json(),
            build_plan(&g, (128, 128), PlanOptions::default())
                .unwrap()
                .to_json()
        );
    }

    #[test]
    fn plan_for_other_model_is_rejected() {
        let g = benchmarks::load("toy-conv-relu-max").unwrap();
        let other = benchmarks::load("alexnet-cifar").unwrap();
        let plan = build_plan(&g, (128, 128), PlanOptions::default()).unwrap();
        assert!(matches!(
            MappingPlan::parse(&plan.to_json(), &other),
            Err(PlanError::WrongModel { .. })
        ));
    }

    #[test]
    fn overlapping_plan_fails_validation() {
        let g = benchmarks::load("toy-conv-relu-max").unwrap();
        let mut plan = build_plan(&g, (128, 128), PlanOptions::default()).unwrap();
        let ima = &mut plan.imas[0];
        assert!(ima.fbs.len() >= 2);
        ima.fbs[1].origin = ima.fbs[0].origin;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn benchmark_plans_are_valid() {
        for name in ["alexnet-cifar", "vgg16-cifar", "resnet18-cifar"] {
            let g = benchmarks::load(name).unwrap();
            for canonical in [false, true] {
                let opts = PlanOptions {
                    canonical,
                    ..Default::default()
                };
                let plan = build_plan(&g, (512, 512), opts).unwrap();
                plan.validate().unwrap();
            }
        }
    }
}
