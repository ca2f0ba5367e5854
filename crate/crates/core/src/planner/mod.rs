//! Plan search: pipeline depth, microbatch size and data-parallel degree are
//! swept in an outer loop; a dynamic program assigns layers, GPU types, TP
//! degrees and regions to stages.
//!
//! Pruning heuristics:
//! * H1: a TP group never spans nodes.
//! * H2: per stage shape, TP degrees that run out of memory are dropped
//!   before the DP sees them (cached across searches).
//! * H3/H4: data-parallel degrees are swept downward for throughput and
//!   upward for cost, stopping once the objective stops improving. Each
//!   run also prunes partial plans whose lower bound cannot beat the plans
//!   found so far.
//! * H5: all replicas of a stage share one region.
//! * H6: zones are merged into regions.
//!
//! The DP is exact on small clusters. On large ones a run that grows past
//! [`StageSearch::Adaptive`]'s state budget is redone with one GPU type per
//! stage and first-fit regions; [`SearchStats::coarse_runs`] counts these.

mod dp;
pub mod report;
pub mod tables;

use std::cmp::Ordering;
use std::sync::atomic::AtomicBool;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClusterSpec, Constraint, JobSpec, Objective, Plan, SearchRequest, ValidateOptions};
use crate::profiles::ProfileStore;
use crate::simulator::{simulate_with, SimError, SimReport};

pub use tables::{
    compute_tp_entry, enumerate_partitions, find_region_fits, generate_combos, min_tp_table, region_order,
    stage_size_window, StageTpTable, TpCache, TpCacheStats, TpEntry, TpKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heuristics {
    /// TP groups stay within one node.
    pub h1_node_local_tp: bool,
    /// Drop out-of-memory TP degrees up front, with a reusable table.
    pub h2_min_tp: bool,
    /// Early stop of the data-parallel sweep, and pruning of every run
    /// against the best plans already found.
    pub h3_dp_sweep: bool,
}

impl Default for Heuristics {
    fn default() -> Self {
        Self { h1_node_local_tp: true, h2_min_tp: true, h3_dp_sweep: true }
    }
}

impl Heuristics {
    pub fn none() -> Self {
        Self { h1_node_local_tp: false, h2_min_tp: false, h3_dp_sweep: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub heuristics: Heuristics,
    /// Non-improving data-parallel degrees tolerated before the sweep stops.
    pub patience: u32,
    /// Stage sizes may deviate from the balanced split by this many layers.
    pub partition_slack: usize,
    /// Plans to return.
    pub top: usize,
    /// Abort the search after this long.
    pub deadline: Option<Duration>,
    pub stage_search: StageSearch,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            heuristics: Heuristics::default(),
            patience: 1,
            partition_slack: 1,
            top: 1,
            deadline: None,
            stage_search: StageSearch::default(),
        }
    }
}

/// Which stage assignments the dynamic program considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageSearch {
    /// Every mix of GPU types in every region that fits. Exact.
    Exhaustive,
    /// One GPU type per stage. A stage stays in the previous stage's
    /// region when it fits there, otherwise it goes to the fitting region
    /// with the most free nodes.
    Coarse,
    /// Exhaustive, but a (P, mbs, D) run that visits more than
    /// `state_budget` states is redone coarse.
    Adaptive { state_budget: u64 },
}

impl Default for StageSearch {
    fn default() -> Self {
        StageSearch::Adaptive { state_budget: 50_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    /// No TP degree of any GPU type fits some stage in memory.
    OutOfMemory,
    Budget,
    ThroughputFloor,
    MissingProfiles,
    /// Plans exist in principle but not with the available nodes.
    InsufficientResources,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rejection::OutOfMemory => "out of memory everywhere",
            Rejection::Budget => "budget",
            Rejection::ThroughputFloor => "throughput floor",
            Rejection::MissingProfiles => "missing profiles",
            Rejection::InsufficientResources => "insufficient resources",
        })
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no feasible plan ({reason})")]
    NoFeasiblePlan { reason: Rejection },
    #[error("search exceeded its deadline after {elapsed:?}")]
    DeadlineExceeded { elapsed: Duration },
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPlan {
    pub plan: Plan,
    pub report: SimReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub tasks: usize,
    pub dp_runs: usize,
    pub dp_states: u64,
    pub frontier_elements: u64,
    /// Runs that exceeded the state budget and were redone coarse; when
    /// nonzero the result may not be optimal.
    pub coarse_runs: u64,
    pub search_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub ranked: Vec<RankedPlan>,
    pub stats: SearchStats,
}

impl SearchOutcome {
    pub fn best(&self) -> &RankedPlan {
        &self.ranked[0]
    }
}

/// Objective value (lower is better) followed by tie-breakers.
pub fn compare_candidates(
    objective: Objective,
    a: (f64, f64, u32, &Plan),
    b: (f64, f64, u32, &Plan),
) -> Ordering {
    let primary = match objective {
        Objective::MaxThroughput => a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)),
        Objective::MinCostPerIteration => a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)),
    };
    primary.then(a.2.cmp(&b.2)).then_with(|| a.3.cmp(b.3))
}

pub fn compare_reports(objective: Objective, a: &RankedPlan, b: &RankedPlan) -> Ordering {
    compare_candidates(
        objective,
        (a.report.t_iter, a.report.c_iter, a.report.allocated_gpus, &a.plan),
        (b.report.t_iter, b.report.c_iter, b.report.allocated_gpus, &b.plan),
    )
}

/// The scalar the objective optimizes (lower is better).
pub fn objective_value(objective: Objective, report: &SimReport) -> f64 {
    match objective {
        Objective::MaxThroughput => report.t_iter,
        Objective::MinCostPerIteration => report.c_iter,
    }
}

pub fn plan_search(
    request: &SearchRequest,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
) -> Result<SearchOutcome, PlanError> {
    plan_search_with(request, job, cluster, store, &PlannerOptions::default(), &TpCache::new())
}

/// Largest data-parallel degree worth trying for `p` stages.
fn max_dp_degree(cluster: &ClusterSpec, pool: &crate::domain::ResourcePool, p: usize) -> u32 {
    let gpus_in = |region: &str| -> u32 {
        pool.iter()
            .filter(|(k, _)| k.region == region)
            .map(|(k, n)| n * cluster.gpu_type(&k.gpu_type).map_or(0, |g| g.gpus_per_node))
            .sum()
    };
    let per_region = cluster.regions().iter().map(|r| gpus_in(r)).max().unwrap_or(0);
    let total: u32 = cluster.regions().iter().map(|r| gpus_in(r)).sum();
    per_region.min(total / p as u32)
}

struct TaskResult {
    plans: Vec<RankedPlan>,
    stats: dp::TaskStats,
    runs: usize,
}

pub fn plan_search_with(
    request: &SearchRequest,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    opts: &PlannerOptions,
    tp_cache: &TpCache,
) -> Result<SearchOutcome, PlanError> {
    let started = Instant::now();
    let pool = request.effective_pool(cluster);

    let mut types: Vec<_> = cluster.gpu_types().iter().collect();
    types.sort_by(|a, b| a.name.cmp(&b.name));
    if types.len() > 16 {
        return Err(PlanError::Internal("at most 16 GPU types are supported".into()));
    }
    let type_tps: Vec<Vec<u32>> = types
        .iter()
        .map(|g| {
            store
                .tp_degrees(&g.name)
                .into_iter()
                .filter(|&tp| !opts.heuristics.h1_node_local_tp || tp <= g.gpus_per_node)
                .collect()
        })
        .collect();
    let regions = region_order(&pool, None, cluster);
    if regions.len() > 255 {
        return Err(PlanError::Internal("too many regions".into()));
    }
    let mut dense = Vec::with_capacity(types.len() * regions.len());
    for g in &types {
        for r in &regions {
            dense.push(u16::try_from(pool.get(&g.name, r)).unwrap_or(u16::MAX));
        }
    }
    let cancel = AtomicBool::new(false);
    let env = dp::Env {
        job,
        cluster,
        store,
        types,
        type_tps,
        regions: regions.iter().map(|s| s.as_str()).collect(),
        pool: dense,
        objective: request.objective,
        constraint: request.constraint,
        opts,
        tp_cache,
        cancel: &cancel,
        deadline: opts.deadline.map(|d| started + d),
    };

    let n = job.num_layers();
    let total_nodes = pool.total_nodes() as usize;
    let max_p = n.min(total_nodes);
    let keep = opts.top.max(1);

    // Tasks run in waves of growing pipeline depth: 1, 2, 3-4, 5-8, ...
    // Each wave prunes against the best values of the waves before it.
    // The bound is fixed within a wave, so output does not depend on
    // thread scheduling.
    let mut known: Vec<f64> = Vec::new();
    let mut results: Vec<TaskResult> = Vec::new();
    let mut tasks = 0;
    let mut lo = 1;
    while lo <= max_p {
        let hi = if lo < 2 { lo } else { (2 * lo - 1).min(max_p) };
        let wave: Vec<(usize, u32)> = (lo..=hi)
            .flat_map(|p| job.allowed_microbatch_sizes().iter().map(move |&m| (p, m)))
            .collect();
        tasks += wave.len();
        let done: Vec<Result<TaskResult, dp::Aborted>> =
            wave.par_iter().map(|&(p, mbs)| run_task(&env, &pool, p, mbs, request, opts, &known)).collect();
        for r in done {
            let r = r.map_err(|_| PlanError::DeadlineExceeded { elapsed: started.elapsed() })?;
            known.extend(r.plans.iter().map(|c| objective_value(request.objective, &c.report)));
            results.push(r);
        }
        known.sort_by(f64::total_cmp);
        known.truncate(keep);
        lo = hi + 1;
    }

    let mut ranked = Vec::new();
    let mut totals = dp::TaskStats::default();
    let mut runs = 0;
    for r in results {
        ranked.extend(r.plans);
        runs += r.runs;
        totals.states += r.stats.states;
        totals.elements += r.stats.elements;
        totals.classes_fit += r.stats.classes_fit;
        totals.classes_oom += r.stats.classes_oom;
        totals.classes_missing += r.stats.classes_missing;
        totals.constraint_rejects += r.stats.constraint_rejects;
        totals.coarse_runs += r.stats.coarse_runs;
    }
    ranked.sort_by(|a, b| compare_reports(request.objective, a, b));
    ranked.dedup_by(|a, b| a.plan == b.plan);
    ranked.truncate(opts.top.max(1));

    if ranked.is_empty() {
        if let Some(constraint) = request.constraint {
            // bounds prune constrained runs before they count rejections,
            // so ask directly whether anything exists without the constraint
            let open = SearchRequest { constraint: None, ..request.clone() };
            return match plan_search_with(&open, job, cluster, store, opts, tp_cache) {
                Ok(_) => Err(PlanError::NoFeasiblePlan {
                    reason: match constraint {
                        Constraint::Budget(_) => Rejection::Budget,
                        Constraint::MinThroughput(_) => Rejection::ThroughputFloor,
                    },
                }),
                Err(e) => Err(e),
            };
        }
        let reason = if totals.classes_fit == 0 && totals.classes_oom > 0 {
            Rejection::OutOfMemory
        } else if totals.classes_fit == 0 && totals.classes_missing > 0 {
            Rejection::MissingProfiles
        } else {
            Rejection::InsufficientResources
        };
        return Err(PlanError::NoFeasiblePlan { reason });
    }

    let stats = SearchStats {
        tasks,
        dp_runs: runs,
        dp_states: totals.states,
        frontier_elements: totals.elements,
        coarse_runs: totals.coarse_runs,
        search_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(SearchOutcome { ranked, stats })
}

fn run_task(
    env: &dp::Env<'_>,
    pool: &crate::domain::ResourcePool,
    p: usize,
    mbs: u32,
    request: &SearchRequest,
    opts: &PlannerOptions,
    known: &[f64],
) -> Result<TaskResult, dp::Aborted> {
    let job = env.job;
    let d_max = max_dp_degree(env.cluster, pool, p);
    let mut ds: Vec<u32> = (1..=d_max).filter(|&d| job.num_microbatches(d, mbs).is_some()).collect();
    let descending = request.objective == Objective::MaxThroughput;
    if descending {
        ds.reverse();
    }

    let mut task = dp::Task::new(env, p, mbs);
    let validate = ValidateOptions { pool: Some(pool), allow_cross_node_tp: !opts.heuristics.h1_node_local_tp };
    let mut plans = Vec::new();
    let mut best: Option<f64> = None;
    let mut stale = 0u32;
    let mut runs = 0;
    let keep = opts.top.max(1);
    let mut values: Vec<f64> = known.to_vec();
    for d in ds {
        runs += 1;
        // Anything worse than the keep-th known value cannot be emitted.
        // The task's own best stays reachable so the sweep sees the same
        // improvements it would without the bound.
        values.sort_by(f64::total_cmp);
        let kth = values.get(keep - 1).copied().unwrap_or(f64::INFINITY);
        let bound = if opts.heuristics.h3_dp_sweep { best.map_or(kth, |b| kth.max(b)) } else { f64::INFINITY };
        let rejects_before = task.stats.constraint_rejects;
        let cands = task.run(d, keep, bound)?;
        let mut found: Vec<RankedPlan> = Vec::new();
        for c in cands {
            match simulate_with(&c.plan, job, env.cluster, env.store, &validate) {
                Ok(report) => {
                    if report.t_iter != c.t_iter || report.c_iter != c.c_iter {
                        log::warn!(
                            "planner and simulator disagree on {:?}: ({}, {}) vs ({}, {})",
                            c.plan,
                            c.t_iter,
                            c.c_iter,
                            report.t_iter,
                            report.c_iter
                        );
                    }
                    let ok = !report.oom
                        && request.constraint.is_none_or(|con| con.admits(report.t_iter, report.c_iter));
                    if ok {
                        found.push(RankedPlan { plan: c.plan, report });
                    }
                }
                Err(SimError::InvalidPlan(v)) => log::warn!("planner produced an invalid plan: {v:?}"),
                Err(e) => log::warn!("simulation failed: {e}"),
            }
        }
        found.sort_by(|a, b| compare_reports(request.objective, a, b));
        found.truncate(opts.top.max(1));
        match found.first() {
            Some(top) => {
                let v = objective_value(request.objective, &top.report);
                if best.is_none_or(|b| v < b) {
                    best = Some(v);
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            // a degree whose plans the constraint cut says nothing about the
            // trend; only count it when the bound alone emptied it
            None if best.is_some() && task.stats.constraint_rejects == rejects_before => stale += 1,
            None => {}
        }
        values.extend(found.iter().map(|c| objective_value(request.objective, &c.report)));
        plans.extend(found);
        if opts.heuristics.h3_dp_sweep && stale >= opts.patience.max(1) {
            break;
        }
    }
    Ok(TaskResult { plans, stats: task.stats, runs })
}
