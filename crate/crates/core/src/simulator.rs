//! Iteration time, memory footprint and cost estimation for a plan.
//!
//! A pipeline runs a 1F1B schedule: one warm-up/cool-down traversal of all
//! stages plus `N_b - 1` steady-state steps paced by the slowest stage. Every
//! per-stage quantity is computed by small free functions that the planner
//! reuses, so planner and simulator agree to the last bit.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_plan_with, ClusterSpec, GpuTypeSpec, JobSpec, Locality, Plan, ValidateOptions, Violation, WorkerId,
};
use crate::profiles::{ProfileError, ProfileStore};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid plan: {}", join_violations(.0))]
    InvalidPlan(Vec<Violation>),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Layer sums for one (layer range, gpu type, tp, mbs).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassProfile {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_update: f64,
    /// Parameters held by one TP rank.
    pub params: u64,
    /// Intermediate plus output activation bytes of one microbatch.
    pub act_bytes: u64,
    /// Output activation of the last layer (what crosses to the next stage).
    pub boundary_bytes: u64,
}

impl ClassProfile {
    /// Forward plus backward time per microbatch.
    pub fn compute_time(&self) -> f64 {
        self.t_fwd + self.t_bwd
    }
}

/// Sums profiled values over `layers`, in layer order.
pub fn class_profile(
    job: &JobSpec,
    store: &ProfileStore,
    layers: Range<usize>,
    gpu_type: &str,
    tp: u32,
    mbs: u32,
) -> Result<ClassProfile, ProfileError> {
    let mut acc = ClassProfile::default();
    for i in layers {
        let r = store.lookup(job.layer_id_at(i), gpu_type, tp, mbs)?;
        acc.t_fwd += r.t_fwd;
        acc.t_bwd += r.t_bwd;
        acc.t_update += r.t_update;
        acc.params += r.params;
        acc.act_bytes += r.act_intermediate_bytes + r.act_out_bytes;
        acc.boundary_bytes = r.act_out_bytes;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub m_model: u64,
    pub m_activation: u64,
    pub m_peak: u64,
    pub components: BTreeMap<String, u64>,
}

/// Model-state bytes: parameters times data type size times the optimizer
/// multiplier.
pub fn model_bytes(params: u64, job: &JobSpec) -> u64 {
    (params as f64 * job.data_type_size() as f64 * job.optimizer_mul_factor()).round() as u64
}

/// Activations in flight on stage `stage_idx` of `num_stages` under 1F1B.
pub fn in_flight(num_stages: usize, stage_idx: usize) -> u64 {
    (num_stages - stage_idx) as u64
}

pub fn memory_of(profile: &ClassProfile, in_flight: u64, job: &JobSpec) -> MemoryBreakdown {
    let m_model = model_bytes(profile.params, job);
    let m_activation = in_flight * profile.act_bytes;
    let copy = profile.params * job.data_type_size() as u64;
    let weights = copy.min(m_model);
    let gradients = copy.min(m_model - weights);
    let components = BTreeMap::from([
        ("activations".to_string(), m_activation),
        ("gradients".to_string(), gradients),
        ("optimizer_and_buffers".to_string(), m_model - weights - gradients),
        ("weights".to_string(), weights),
    ]);
    MemoryBreakdown { m_model, m_activation, m_peak: m_model + m_activation, components }
}

/// Peak memory of one worker of `plan`.
pub fn worker_memory(
    plan: &Plan,
    stage_idx: usize,
    replica: usize,
    job: &JobSpec,
    store: &ProfileStore,
) -> Result<MemoryBreakdown, SimError> {
    let stage = &plan.stages[stage_idx];
    let rep = &stage.replicas[replica];
    let prof = class_profile(job, store, stage.layer_range(), &rep.gpu_type, rep.tp, plan.mbs)?;
    Ok(memory_of(&prof, in_flight(plan.num_stages(), stage_idx), job))
}

/// Workers whose peak memory exceeds their GPU's capacity.
pub fn check_oom(
    plan: &Plan,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
) -> Result<(bool, Vec<WorkerId>), SimError> {
    let mut offenders = Vec::new();
    for (s, stage) in plan.stages.iter().enumerate() {
        for (r, rep) in stage.replicas.iter().enumerate() {
            let Some(gpu) = cluster.gpu_type(&rep.gpu_type) else { continue };
            let mem = worker_memory(plan, s, r, job, store)?;
            if mem.m_peak > gpu.mem_bytes {
                offenders.extend((0..rep.tp).map(|t| WorkerId { stage: s, replica: r, tp_rank: t }));
            }
        }
    }
    Ok((!offenders.is_empty(), offenders))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub t_fwd: f64,
    pub t_bwd: f64,
}

/// Per-microbatch forward and backward time of one replica of a stage.
pub fn stage_time(
    plan: &Plan,
    stage_idx: usize,
    replica: usize,
    job: &JobSpec,
    store: &ProfileStore,
) -> Result<StageTime, SimError> {
    let stage = &plan.stages[stage_idx];
    let rep = &stage.replicas[replica];
    let p = class_profile(job, store, stage.layer_range(), &rep.gpu_type, rep.tp, plan.mbs)?;
    Ok(StageTime { t_fwd: p.t_fwd, t_bwd: p.t_bwd })
}

/// Replicas of one (gpu type, tp) class inside a stage.
#[derive(Debug, Clone, Copy)]
pub struct ClassUse<'a> {
    pub gpu: &'a GpuTypeSpec,
    pub tp: u32,
    pub count: u32,
    pub profile: &'a ClassProfile,
}

/// Slowest replica's forward plus backward time.
pub fn stage_compute(classes: &[ClassUse<'_>]) -> f64 {
    classes.iter().map(|c| c.profile.compute_time()).fold(0.0, f64::max)
}

pub fn stage_update(classes: &[ClassUse<'_>]) -> f64 {
    classes.iter().map(|c| c.profile.t_update).fold(0.0, f64::max)
}

/// Rental rate in currency per second of the nodes a stage claims.
pub fn stage_rate(classes: &[ClassUse<'_>]) -> f64 {
    classes.iter().fold(0.0, |acc, c| {
        let gpus = c.gpu.nodes_for(c.count, c.tp) * c.gpu.gpus_per_node;
        acc + gpus as f64 * c.gpu.price_per_gpu_hour / 3600.0
    })
}

fn link_time(cluster: &ClusterSpec, a: &str, b: &str, loc: Locality, bytes: f64) -> f64 {
    cluster.link(a, b, loc).expect("validated cluster has links for every type pair").comm_time(bytes)
}

/// Time to ship one microbatch's boundary activation from a stage to the
/// next: the slowest (sender class, receiver type) pair.
pub fn p2p_between<'b>(
    senders: &[ClassUse<'_>],
    src_region: &str,
    receiver_types: impl IntoIterator<Item = &'b str> + Clone,
    dst_region: &str,
    cluster: &ClusterSpec,
) -> f64 {
    let loc = if src_region == dst_region { Locality::IntraZone } else { Locality::InterRegion };
    p2p_over(senders, receiver_types, loc, cluster)
}

/// [`p2p_between`] with the link locality already resolved.
pub fn p2p_over<'b>(
    senders: &[ClassUse<'_>],
    receiver_types: impl IntoIterator<Item = &'b str> + Clone,
    loc: Locality,
    cluster: &ClusterSpec,
) -> f64 {
    let mut worst = 0.0f64;
    for s in senders {
        for r in receiver_types.clone() {
            worst = worst.max(link_time(cluster, &s.gpu.name, r, loc, s.profile.boundary_bytes as f64));
        }
    }
    worst
}

/// Ring all-reduce of the stage gradients over its `D` replicas.
///
/// Bandwidth is the minimum over replica pairs; same-type pairs use the
/// intra-node link only when every replica sits on one node.
pub fn ring_sync(classes: &[ClassUse<'_>], job: &JobSpec, cluster: &ClusterSpec) -> f64 {
    let d: u32 = classes.iter().map(|c| c.count).sum();
    if d <= 1 {
        return 0.0;
    }
    let bytes = classes.iter().map(|c| c.profile.params).max().unwrap_or(0) as f64 * job.data_type_size() as f64;
    if bytes <= 0.0 {
        return 0.0;
    }
    let msg = bytes / d as f64;
    let one_node = classes.len() == 1 && classes[0].gpu.nodes_for(d, classes[0].tp) == 1;
    let mut bw = f64::INFINITY;
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i..] {
            let loc = if a.gpu.name != b.gpu.name {
                Locality::IntraZone
            } else if std::ptr::eq(a, b) && a.count < 2 {
                continue;
            } else if one_node {
                Locality::IntraNode
            } else {
                Locality::IntraZone
            };
            let m = cluster.link(&a.gpu.name, &b.gpu.name, loc).expect("validated cluster has links");
            bw = bw.min(m.bandwidth(msg));
        }
    }
    if !bw.is_finite() {
        return 0.0;
    }
    ring_allreduce_time(d, bytes, bw)
}

/// `2 (D-1)/D * bytes / bw`.
pub fn ring_allreduce_time(d: u32, bytes: f64, bw: f64) -> f64 {
    if d <= 1 {
        return 0.0;
    }
    let d = d as f64;
    2.0 * (d - 1.0) / d * bytes / bw
}

/// Total boundary bytes one microbatch step pushes out of a stage.
pub fn boundary_bytes(senders: &[ClassUse<'_>]) -> u64 {
    senders.iter().map(|c| c.count as u64 * c.profile.boundary_bytes).sum()
}

/// Egress cost of one pipeline boundary over an iteration: activations go
/// forward and gradients of the same size come back, once per microbatch.
pub fn boundary_cost(bytes: u64, num_microbatches: u32, src: &str, dst: &str, cluster: &ClusterSpec) -> f64 {
    if src == dst && cluster.egress_price(src, dst) == 0.0 {
        return 0.0;
    }
    let per_byte = cluster.egress_price(src, dst) + cluster.egress_price(dst, src);
    num_microbatches as f64 * bytes as f64 * per_byte
}

/// `T_pp + T_sync + T_update` from the aggregate terms.
pub fn iteration_time(sum_s: f64, max_s: f64, max_sync: f64, max_update: f64, num_microbatches: u32) -> f64 {
    ((sum_s + (num_microbatches - 1) as f64 * max_s) + max_sync) + max_update
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c_comp: f64,
    pub c_comm: f64,
    pub c_iter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub t_compute: f64,
    pub t_p2p: f64,
    pub t_sync: f64,
    pub t_update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub t_iter: f64,
    /// One traversal plus the steady phase of the slowest pipeline.
    pub t_pipeline: f64,
    pub t_sync: f64,
    pub t_update: f64,
    pub num_microbatches: u32,
    pub straggler_stage: usize,
    pub t_straggler: f64,
    pub stages: Vec<StageReport>,
    pub peak_mem: BTreeMap<WorkerId, u64>,
    pub oom: bool,
    pub offenders: Vec<WorkerId>,
    pub c_comp: f64,
    pub c_comm: f64,
    pub c_iter: f64,
    pub allocated_gpus: u32,
}

impl SimReport {
    pub fn throughput(&self) -> f64 {
        1.0 / self.t_iter
    }
}

struct StageEval<'a> {
    region: &'a str,
    profiles: Vec<(&'a GpuTypeSpec, u32, u32, ClassProfile)>,
}

impl StageEval<'_> {
    fn uses(&self) -> Vec<ClassUse<'_>> {
        self.profiles.iter().map(|(g, tp, n, p)| ClassUse { gpu: g, tp: *tp, count: *n, profile: p }).collect()
    }
}

fn evaluate_stages<'a>(
    plan: &'a Plan,
    job: &JobSpec,
    cluster: &'a ClusterSpec,
    store: &ProfileStore,
) -> Result<Vec<StageEval<'a>>, SimError> {
    plan.stages
        .iter()
        .map(|stage| {
            let profiles = stage
                .classes()
                .into_iter()
                .map(|((gpu, tp), n)| {
                    let spec = cluster.gpu_type(gpu).expect("validated gpu type");
                    let p = class_profile(job, store, stage.layer_range(), gpu, tp, plan.mbs)?;
                    Ok((spec, tp, n, p))
                })
                .collect::<Result<_, SimError>>()?;
            Ok(StageEval { region: &stage.region, profiles })
        })
        .collect()
}

fn p2p_of(evals: &[StageEval<'_>], j: usize, cluster: &ClusterSpec) -> f64 {
    match evals.get(j + 1) {
        None => 0.0,
        Some(next) => {
            let receivers: Vec<&str> = next.profiles.iter().map(|(g, ..)| g.name.as_str()).collect();
            p2p_between(&evals[j].uses(), evals[j].region, receivers.iter().copied(), next.region, cluster)
        }
    }
}

/// Pipeline communication time from stage `stage_idx` to the next.
pub fn p2p_time(
    plan: &Plan,
    stage_idx: usize,
    job: &JobSpec,
    store: &ProfileStore,
    cluster: &ClusterSpec,
) -> Result<f64, SimError> {
    let evals = evaluate_stages(plan, job, cluster, store)?;
    Ok(p2p_of(&evals, stage_idx, cluster))
}

/// Gradient synchronization time of one stage.
pub fn sync_time(
    plan: &Plan,
    stage_idx: usize,
    job: &JobSpec,
    store: &ProfileStore,
    cluster: &ClusterSpec,
) -> Result<f64, SimError> {
    let evals = evaluate_stages(plan, job, cluster, store)?;
    Ok(ring_sync(&evals[stage_idx].uses(), job, cluster))
}

fn costs(evals: &[StageEval<'_>], t_iter: f64, n_b: u32, cluster: &ClusterSpec) -> CostBreakdown {
    // right folds, matching the order in which the planner accumulates suffixes
    let mut rate = 0.0;
    let mut comm = 0.0;
    for j in (0..evals.len()).rev() {
        rate = stage_rate(&evals[j].uses()) + rate;
        if let Some(next) = evals.get(j + 1) {
            let bytes = boundary_bytes(&evals[j].uses());
            comm = boundary_cost(bytes, n_b, evals[j].region, next.region, cluster) + comm;
        }
    }
    let c_comp = rate * t_iter;
    CostBreakdown { c_comp, c_comm: comm, c_iter: c_comp + comm }
}

/// Compute and egress cost of one iteration lasting `t_iter` seconds.
pub fn cost_per_iteration(
    plan: &Plan,
    t_iter: f64,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
) -> Result<CostBreakdown, SimError> {
    let evals = evaluate_stages(plan, job, cluster, store)?;
    let n_b = job.num_microbatches(plan.dp_degree, plan.mbs).ok_or_else(|| {
        SimError::InvalidPlan(vec![Violation::BatchNotDivisible {
            gbs: job.global_batch_size(),
            dp: plan.dp_degree,
            mbs: plan.mbs,
        }])
    })?;
    Ok(costs(&evals, t_iter, n_b, cluster))
}

pub fn simulate(plan: &Plan, job: &JobSpec, cluster: &ClusterSpec, store: &ProfileStore) -> Result<SimReport, SimError> {
    simulate_with(plan, job, cluster, store, &ValidateOptions::default())
}

pub fn simulate_with(
    plan: &Plan,
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    opts: &ValidateOptions<'_>,
) -> Result<SimReport, SimError> {
    let violations = validate_plan_with(plan, job, cluster, opts);
    if !violations.is_empty() {
        return Err(SimError::InvalidPlan(violations));
    }
    let n_b = job.num_microbatches(plan.dp_degree, plan.mbs).expect("validated divisibility");
    let evals = evaluate_stages(plan, job, cluster, store)?;
    let p = evals.len();

    let mut stages = Vec::with_capacity(p);
    for (j, e) in evals.iter().enumerate() {
        let uses = e.uses();
        stages.push(StageReport {
            t_compute: stage_compute(&uses),
            t_p2p: p2p_of(&evals, j, cluster),
            t_sync: ring_sync(&uses, job, cluster),
            t_update: stage_update(&uses),
        });
    }
    let s: Vec<f64> = stages.iter().map(|st| st.t_compute + st.t_p2p).collect();
    let mut sum_s = 0.0;
    for &x in s.iter().rev() {
        sum_s = x + sum_s;
    }
    let (straggler_stage, t_straggler) =
        s.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, x)| if x > best.1 { (j, x) } else { best });
    let t_sync = stages.iter().map(|st| st.t_sync).fold(0.0, f64::max);
    let t_update = stages.iter().map(|st| st.t_update).fold(0.0, f64::max);
    let t_pipeline = sum_s + (n_b - 1) as f64 * t_straggler;
    let t_iter = iteration_time(sum_s, t_straggler, t_sync, t_update, n_b);

    let mut peak_mem = BTreeMap::new();
    let mut offenders = Vec::new();
    for (j, (stage, e)) in plan.stages.iter().zip(&evals).enumerate() {
        let flight = in_flight(p, j);
        for (r, rep) in stage.replicas.iter().enumerate() {
            let (gpu, _, _, prof) = e
                .profiles
                .iter()
                .find(|(g, tp, ..)| g.name == rep.gpu_type && *tp == rep.tp)
                .expect("class of every replica was profiled");
            let mem = memory_of(prof, flight, job).m_peak;
            for t in 0..rep.tp {
                let w = WorkerId { stage: j, replica: r, tp_rank: t };
                peak_mem.insert(w, mem);
                if mem > gpu.mem_bytes {
                    offenders.push(w);
                }
            }
        }
    }

    let cost = costs(&evals, t_iter, n_b, cluster);
    Ok(SimReport {
        t_iter,
        t_pipeline,
        t_sync,
        t_update,
        num_microbatches: n_b,
        straggler_stage,
        t_straggler,
        stages,
        peak_mem,
        oom: !offenders.is_empty(),
        offenders,
        c_comp: cost.c_comp,
        c_comm: cost.c_comm,
        c_iter: cost.c_iter,
        allocated_gpus: plan.allocated_gpus(cluster),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::toy_cluster;
    use crate::domain::{LayerRef, Replica, StageAssignment};
    use crate::profiles::ProfileRecord;

    fn rec(t_fwd: f64, t_bwd: f64, t_update: f64, params: u64, act: u64) -> ProfileRecord {
        ProfileRecord { t_fwd, t_bwd, t_update, params, act_out_bytes: 0, act_intermediate_bytes: act }
    }

    fn one_layer_job(repeat: u32, gbs: u32) -> JobSpec {
        JobSpec::new("t", vec![LayerRef { id: "l".into(), repeat }], gbs, 1, 2, 8.0, vec![1]).unwrap()
    }

    fn stage(l0: usize, n: usize, region: &str, reps: &[(&str, u32)]) -> StageAssignment {
        StageAssignment {
            first_layer: l0,
            layer_count: n,
            region: region.into(),
            replicas: reps.iter().map(|&(g, tp)| Replica::new(g, tp)).collect(),
        }
    }

    #[test]
    fn hand_computed_memory() {
        let job = one_layer_job(1, 8);
        let mut store = ProfileStore::new();
        store.insert("l", "A", 1, 1, rec(0.002, 0.004, 0.001, 1_000_000, 10_000_000)).unwrap();
        store.insert("l", "A", 2, 1, rec(0.001, 0.002, 0.001, 500_000, 6_000_000)).unwrap();
        let plan = Plan { stages: vec![stage(0, 1, "us", &[("A", 1)])], mbs: 1, dp_degree: 1 };
        let m = worker_memory(&plan, 0, 0, &job, &store).unwrap();
        assert_eq!((m.m_model, m.m_activation, m.m_peak), (16_000_000, 10_000_000, 26_000_000));
        assert_eq!(m.components.values().sum::<u64>(), m.m_peak);

        let plan2 = Plan { stages: vec![stage(0, 1, "us", &[("A", 2)])], mbs: 1, dp_degree: 1 };
        let m2 = worker_memory(&plan2, 0, 0, &job, &store).unwrap();
        assert_eq!((m2.m_model, m2.m_activation), (8_000_000, 6_000_000));
    }

    #[test]
    fn empty_range_uses_no_memory() {
        let job = one_layer_job(1, 8);
        let store = ProfileStore::new();
        let plan = Plan { stages: vec![stage(0, 0, "us", &[("A", 1)])], mbs: 1, dp_degree: 1 };
        assert_eq!(worker_memory(&plan, 0, 0, &job, &store).unwrap().m_peak, 0);
    }

    #[test]
    fn single_stage_closed_form() {
        let cluster = toy_cluster(&[("A", 1)], &[("z", "us")], &[("A", "z", 1)]);
        let job = one_layer_job(1, 8);
        let mut store = ProfileStore::new();
        store.insert("l", "A", 1, 1, rec(0.002, 0.004, 0.001, 1000, 1000)).unwrap();
        let plan = Plan { stages: vec![stage(0, 1, "us", &[("A", 1)])], mbs: 1, dp_degree: 1 };
        let r = simulate(&plan, &job, &cluster, &store).unwrap();
        assert!((r.t_iter - 0.049).abs() < 1e-15, "{}", r.t_iter);
        assert_eq!(r.c_comm, 0.0);
        assert_eq!(r.c_iter, r.c_comp + r.c_comm);
    }

    #[test]
    fn ring_examples() {
        assert_eq!(ring_allreduce_time(1, 1e9, 1e9), 0.0);
        assert_eq!(ring_allreduce_time(2, 1e9, 1e9), 1.0);
        assert!(ring_allreduce_time(4, 1e9, 1e9) > ring_allreduce_time(2, 1e9, 1e9));
    }

    #[test]
    fn straggler_is_the_slow_stage() {
        let cluster = toy_cluster(&[("A", 1)], &[("z", "us")], &[("A", "z", 2)]);
        let job = JobSpec::new(
            "t",
            vec![LayerRef { id: "fast".into(), repeat: 1 }, LayerRef { id: "slow".into(), repeat: 1 }],
            4,
            1,
            2,
            8.0,
            vec![1],
        )
        .unwrap();
        let mut store = ProfileStore::new();
        store.insert("fast", "A", 1, 1, rec(0.001, 0.002, 0.0, 10, 10)).unwrap();
        store.insert("slow", "A", 1, 1, rec(0.010, 0.020, 0.0, 10, 10)).unwrap();
        let plan = Plan {
            stages: vec![stage(0, 1, "us", &[("A", 1)]), stage(1, 1, "us", &[("A", 1)])],
            mbs: 1,
            dp_degree: 1,
        };
        let r = simulate(&plan, &job, &cluster, &store).unwrap();
        assert_eq!(r.straggler_stage, 1);
    }
}
