//! JSON form of a chosen plan, also accepted as plan input.

use serde::{Deserialize, Serialize};

use crate::domain::{Constraint, Objective, Plan, Replica, StageAssignment};
use crate::simulator::SimReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaDoc {
    pub gpu_type: String,
    pub tp: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDoc {
    /// `[first layer, layer count]`.
    pub layers: [usize; 2],
    pub region: String,
    pub replicas: Vec<ReplicaDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    #[serde(default)]
    pub constraint: Option<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_iter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_iter: Option<f64>,
    pub mbs: u32,
    #[serde(rename = "D")]
    pub dp_degree: u32,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub num_stages: Option<usize>,
    pub stages: Vec<StageDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straggler_stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_time_seconds: Option<f64>,
}

impl PlanDocument {
    pub fn from_plan(plan: &Plan) -> Self {
        Self {
            objective: None,
            constraint: None,
            t_iter: None,
            c_iter: None,
            mbs: plan.mbs,
            dp_degree: plan.dp_degree,
            num_stages: Some(plan.num_stages()),
            stages: plan
                .stages
                .iter()
                .map(|s| StageDoc {
                    layers: [s.first_layer, s.layer_count],
                    region: s.region.clone(),
                    replicas: s
                        .replicas
                        .iter()
                        .map(|r| ReplicaDoc { gpu_type: r.gpu_type.clone(), tp: r.tp, zone: r.zone.clone() })
                        .collect(),
                })
                .collect(),
            straggler_stage: None,
            search_time_seconds: None,
        }
    }

    pub fn with_result(
        plan: &Plan,
        report: &SimReport,
        objective: Objective,
        constraint: Option<Constraint>,
        search_time_seconds: f64,
    ) -> Self {
        Self {
            objective: Some(objective),
            constraint,
            t_iter: Some(report.t_iter),
            c_iter: Some(report.c_iter),
            straggler_stage: Some(report.straggler_stage),
            search_time_seconds: Some(search_time_seconds),
            ..Self::from_plan(plan)
        }
    }

    pub fn to_plan(&self) -> Plan {
        Plan {
            stages: self
                .stages
                .iter()
                .map(|s| StageAssignment {
                    first_layer: s.layers[0],
                    layer_count: s.layers[1],
                    region: s.region.clone(),
                    replicas: s
                        .replicas
                        .iter()
                        .map(|r| Replica { gpu_type: r.gpu_type.clone(), tp: r.tp, zone: r.zone.clone() })
                        .collect(),
                })
                .collect(),
            mbs: self.mbs,
            dp_degree: self.dp_degree,
        }
    }
}
