//! Exhaustive reference search for small instances.
//!
//! Every structurally valid plan that fits the node pool is enumerated once
//! (all pipeline depths, all layer compositions, every multiset of replica
//! classes per stage, every region per stage) and scored with the same
//! simulator and ordering the planner uses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClusterSpec, JobSpec, Plan, Replica, ResourcePool, SearchRequest, StageAssignment, ValidateOptions};
use crate::planner::tables::for_each_split;
use crate::planner::{compare_reports, RankedPlan};
use crate::profiles::ProfileStore;
use crate::simulator::simulate_with;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCaps {
    pub max_nodes: u32,
    pub max_types: usize,
    pub max_regions: usize,
    pub max_layers: usize,
    pub max_mbs: usize,
}

impl Default for OracleCaps {
    fn default() -> Self {
        Self { max_nodes: 8, max_types: 2, max_regions: 2, max_layers: 4, max_mbs: 4 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),
}

fn check_caps(job: &JobSpec, cluster: &ClusterSpec, pool: &ResourcePool, caps: &OracleCaps) -> Result<(), OracleError> {
    let too_large = |m: String| Err(OracleError::InstanceTooLarge(m));
    if pool.total_nodes() > caps.max_nodes {
        return too_large(format!("{} nodes > {}", pool.total_nodes(), caps.max_nodes));
    }
    if cluster.gpu_types().len() > caps.max_types {
        return too_large(format!("{} gpu types > {}", cluster.gpu_types().len(), caps.max_types));
    }
    if cluster.regions().len() > caps.max_regions {
        return too_large(format!("{} regions > {}", cluster.regions().len(), caps.max_regions));
    }
    if job.num_layers() > caps.max_layers {
        return too_large(format!("{} layers > {}", job.num_layers(), caps.max_layers));
    }
    if job.allowed_microbatch_sizes().len() > caps.max_mbs {
        return too_large(format!("{} microbatch sizes > {}", job.allowed_microbatch_sizes().len(), caps.max_mbs));
    }
    Ok(())
}

/// Replica classes a stage may use: every profiled TP degree that fits
/// within one node, per GPU type, sorted.
fn replica_classes(cluster: &ClusterSpec, store: &ProfileStore) -> Vec<(String, u32)> {
    let mut out: Vec<(String, u32)> = cluster
        .gpu_types()
        .iter()
        .flat_map(|g| {
            store
                .tp_degrees(&g.name)
                .into_iter()
                .filter(|&tp| tp <= g.gpus_per_node)
                .map(|tp| (g.name.clone(), tp))
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort();
    out
}

fn compositions(n: usize, p: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if p == 0 {
        if n == 0 {
            f(cur);
        }
        return;
    }
    for len in 1..=n.saturating_sub(p - 1) {
        cur.push(len);
        compositions(n - len, p - 1, cur, f);
        cur.pop();
    }
}

/// Visits every plan that satisfies the structural invariants and fits
/// `pool`.
pub fn for_each_plan(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    pool: &ResourcePool,
    caps: &OracleCaps,
    mut f: impl FnMut(Plan),
) -> Result<(), OracleError> {
    check_caps(job, cluster, pool, caps)?;
    let classes = replica_classes(cluster, store);
    let n = job.num_layers();
    let total_gpus: u32 = pool
        .iter()
        .map(|(k, c)| c * cluster.gpu_type(&k.gpu_type).map_or(0, |g| g.gpus_per_node))
        .sum();

    // per D: every multiset of D replica classes with its node demand per type
    let mut stage_options: Vec<Vec<(Vec<Replica>, Vec<(String, u32)>)>> = vec![Vec::new(); total_gpus as usize + 1];
    for d in 1..=total_gpus {
        let mut opts = Vec::new();
        for_each_split(d, classes.len(), &mut |counts| {
            let mut replicas = Vec::with_capacity(d as usize);
            let mut demand: Vec<(String, u32)> = Vec::new();
            for ((gpu, tp), &c) in classes.iter().zip(counts) {
                if c == 0 {
                    continue;
                }
                replicas.extend((0..c).map(|_| Replica::new(gpu.clone(), *tp)));
                let nodes = cluster.gpu_type(gpu).expect("known type").nodes_for(c, *tp);
                match demand.iter_mut().find(|(g, _)| g == gpu) {
                    Some(e) => e.1 += nodes,
                    None => demand.push((gpu.clone(), nodes)),
                }
            }
            replicas.sort();
            opts.push((replicas, demand));
        });
        stage_options[d as usize] = opts;
    }

    for &mbs in job.allowed_microbatch_sizes() {
        for p in 1..=n {
            for d in 1..=total_gpus / p as u32 {
                if job.num_microbatches(d, mbs).is_none() {
                    continue;
                }
                let opts = &stage_options[d as usize];
                let mut cur = Vec::new();
                compositions(n, p, &mut cur, &mut |sizes| {
                    let mut stages = Vec::with_capacity(p);
                    assign(sizes, 0, 0, pool.clone(), opts, cluster, &mut stages, &mut |stages| {
                        f(Plan { stages: stages.to_vec(), mbs, dp_degree: d })
                    });
                });
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assign(
    sizes: &[usize],
    i: usize,
    l0: usize,
    pool: ResourcePool,
    opts: &[(Vec<Replica>, Vec<(String, u32)>)],
    cluster: &ClusterSpec,
    stages: &mut Vec<StageAssignment>,
    f: &mut impl FnMut(&[StageAssignment]),
) {
    if i == sizes.len() {
        f(stages);
        return;
    }
    for region in cluster.regions() {
        for (replicas, demand) in opts {
            if !demand.iter().all(|(g, n)| *n <= pool.get(g, region)) {
                continue;
            }
            let mut rest = pool.clone();
            for (g, n) in demand {
                rest.set(g, region, pool.get(g, region) - n);
            }
            stages.push(StageAssignment {
                first_layer: l0,
                layer_count: sizes[i],
                region: region.clone(),
                replicas: replicas.clone(),
            });
            assign(sizes, i + 1, l0 + sizes[i], rest, opts, cluster, stages, f);
            stages.pop();
        }
    }
}

/// All plans on the full availability of `cluster`.
pub fn enumerate_all_plans(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    caps: &OracleCaps,
) -> Result<Vec<Plan>, OracleError> {
    let mut out = Vec::new();
    for_each_plan(job, cluster, store, &cluster.region_pool(), caps, |p| out.push(p))?;
    Ok(out)
}

/// Every enumerated plan on `pool` that simulates without error, with its
/// report. OOM plans are kept; callers filter.
pub fn evaluate_all_plans(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    pool: &ResourcePool,
    caps: &OracleCaps,
) -> Result<Vec<RankedPlan>, OracleError> {
    let validate = ValidateOptions { pool: Some(pool), allow_cross_node_tp: false };
    let mut out = Vec::new();
    for_each_plan(job, cluster, store, pool, caps, |plan| {
        if let Ok(report) = simulate_with(&plan, job, cluster, store, &validate) {
            out.push(RankedPlan { plan, report });
        }
    })?;
    Ok(out)
}

/// Best of `candidates` under the request's objective and constraint,
/// skipping OOM plans.
pub fn best_of<'c>(request: &SearchRequest, candidates: &'c [RankedPlan]) -> Option<&'c RankedPlan> {
    candidates
        .iter()
        .filter(|c| !c.report.oom && request.constraint.is_none_or(|k| k.admits(c.report.t_iter, c.report.c_iter)))
        .min_by(|a, b| compare_reports(request.objective, a, b))
}

/// Best plan under the request, or `None` when no enumerated plan is
/// memory-feasible and within the constraint.
pub fn oracle_search(
    request: &SearchRequest,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    caps: &OracleCaps,
) -> Result<Option<RankedPlan>, OracleError> {
    let pool = request.effective_pool(cluster);
    let all = evaluate_all_plans(job, cluster, store, &pool, caps)?;
    Ok(best_of(request, &all).cloned())
}
