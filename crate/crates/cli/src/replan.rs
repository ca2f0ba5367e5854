//! Replays an availability trace and replans after every event.
//!
//! The minimum-TP cache is shared by all searches, so only stage shapes
//! never seen before are computed. The DP itself starts fresh each time
//! because its states are keyed by the node pool.

use hetplan_core::domain::{ClusterSpec, JobSpec, SearchRequest};
use hetplan_core::planner::report::PlanDocument;
use hetplan_core::planner::{objective_value, plan_search_with, PlanError, PlannerOptions, TpCache, TpCacheStats};
use hetplan_core::profiles::ProfileStore;
use serde::Serialize;

use crate::error::CliError;
use crate::trace::{AvailabilityTrace, TraceEvent};

// relative slack when comparing objective values across events
const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct ReplanEntry {
    /// Position in the trace; the initial plan has none.
    pub index: Option<usize>,
    pub event: Option<TraceEvent>,
    /// Node count before the event for the (gpu type, zone) it changed.
    pub previous_nodes: Option<u32>,
    pub plan: Option<PlanDocument>,
    pub t_iter: Option<f64>,
    pub c_iter: Option<f64>,
    pub objective_value: Option<f64>,
    /// Why no plan was found, when none was.
    pub error: Option<String>,
    pub search_time_seconds: f64,
    /// Set on events that only added nodes and did not keep the objective
    /// at least as good as before.
    pub monotone_violation: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplanLog {
    pub request: SearchRequest,
    pub entries: Vec<ReplanEntry>,
    pub tp_cache: TpCacheStats,
    pub max_search_time_seconds: f64,
    pub monotone_violations: usize,
}

pub fn replay(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    trace: &AvailabilityTrace,
    request: &SearchRequest,
    opts: &PlannerOptions,
) -> Result<ReplanLog, CliError> {
    trace.check(cluster)?;
    let cache = TpCache::new();
    let mut current = cluster.clone();
    let mut entries = Vec::with_capacity(trace.events.len() + 1);
    let mut prev_value = search(job, &current, store, request, opts, &cache, &mut entries, None, None)?;
    for (i, ev) in trace.events.iter().enumerate() {
        let key = (ev.gpu_type.clone(), ev.zone.clone());
        let before = current.availability().get(&key).copied().unwrap_or(0);
        current = current.with_availability(&ev.gpu_type, &ev.zone, ev.nodes)?;
        let value = search(job, &current, store, request, opts, &cache, &mut entries, Some((i, ev)), Some(before))?;
        let entry = entries.last_mut().expect("just pushed");
        if ev.nodes >= before {
            entry.monotone_violation = match (prev_value, value) {
                (Some(p), Some(v)) => v > p + MONOTONE_TOL * p.abs(),
                (Some(_), None) => true,
                (None, _) => false,
            };
        }
        prev_value = value;
    }
    let max_search_time_seconds = entries.iter().map(|e| e.search_time_seconds).fold(0.0, f64::max);
    let monotone_violations = entries.iter().filter(|e| e.monotone_violation).count();
    Ok(ReplanLog { request: request.clone(), entries, tp_cache: cache.stats(), max_search_time_seconds, monotone_violations })
}

#[allow(clippy::too_many_arguments)]
fn search(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    request: &SearchRequest,
    opts: &PlannerOptions,
    cache: &TpCache,
    entries: &mut Vec<ReplanEntry>,
    event: Option<(usize, &TraceEvent)>,
    previous_nodes: Option<u32>,
) -> Result<Option<f64>, CliError> {
    let started = std::time::Instant::now();
    let mut entry = ReplanEntry {
        index: event.map(|(i, _)| i),
        event: event.map(|(_, e)| e.clone()),
        previous_nodes,
        plan: None,
        t_iter: None,
        c_iter: None,
        objective_value: None,
        error: None,
        search_time_seconds: 0.0,
        monotone_violation: false,
    };
    let value = match plan_search_with(request, job, cluster, store, opts, cache) {
        Ok(out) => {
            let best = out.best();
            let v = objective_value(request.objective, &best.report);
            entry.plan = Some(PlanDocument::with_result(
                &best.plan,
                &best.report,
                request.objective,
                request.constraint,
                out.stats.search_time_seconds,
            ));
            entry.t_iter = Some(best.report.t_iter);
            entry.c_iter = Some(best.report.c_iter);
            entry.objective_value = Some(v);
            Some(v)
        }
        Err(e @ PlanError::NoFeasiblePlan { .. }) => {
            entry.error = Some(e.to_string());
            None
        }
        Err(e) => return Err(e.into()),
    };
    entry.search_time_seconds = started.elapsed().as_secs_f64();
    log::info!(
        "replan {}: {:?} in {:.3}s",
        entry.index.map_or("initial".to_string(), |i| format!("event {i}")),
        value,
        entry.search_time_seconds
    );
    entries.push(entry);
    Ok(value)
}
