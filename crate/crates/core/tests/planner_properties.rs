mod common;

use common::*;
use hetplan_core::domain::{validate_plan, ClusterSpec, Constraint, JobSpec, Objective, Plan, SearchRequest};
use hetplan_core::fixtures::{random_instance, Instance};
use hetplan_core::oracle::{best_of, evaluate_all_plans, OracleCaps};
use hetplan_core::planner::{objective_value, plan_search, plan_search_with, PlanError, PlannerOptions, Rejection, TpCache};
use hetplan_core::profiles::ProfileStore;
use hetplan_core::simulator::worker_memory;
use hetplan_core::simulate;

fn top(n: usize) -> PlannerOptions {
    PlannerOptions { top: n, ..Default::default() }
}

/// Egress cost recomputed from the plan: every boundary between regions
/// moves each sender's last-layer activation forward and the gradient back,
/// once per microbatch.
fn expected_c_comm(plan: &Plan, job: &JobSpec, cluster: &ClusterSpec, store: &ProfileStore) -> f64 {
    let n_b = job.global_batch_size() / (plan.dp_degree * plan.mbs);
    let mut total = 0.0;
    for w in plan.stages.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.region == b.region {
            continue;
        }
        let last = job.layer_id_at(a.first_layer + a.layer_count - 1);
        let bytes: u64 = a
            .replicas
            .iter()
            .map(|r| store.lookup(last, &r.gpu_type, r.tp, plan.mbs).unwrap().act_out_bytes)
            .sum();
        let price = cluster.egress_price(&a.region, &b.region) + cluster.egress_price(&b.region, &a.region);
        total += n_b as f64 * bytes as f64 * price;
    }
    total
}

#[test]
fn geo_invariants_on_two_region_instances() {
    let (mut two_region, mut crossing, mut single) = (0, 0, 0);
    for seed in 0..400 {
        let inst = random_instance(seed);
        if inst.cluster.regions().len() != 2 {
            continue;
        }
        two_region += 1;
        for objective in [Objective::MaxThroughput, Objective::MinCostPerIteration] {
            let req = SearchRequest::new(objective);
            let Ok(out) = plan_search_with(&req, &inst.job, &inst.cluster, &inst.store, &top(8), &TpCache::new()) else {
                continue;
            };
            for r in &out.ranked {
                assert!(validate_plan(&r.plan, &inst.job, &inst.cluster).is_empty(), "seed {seed}");
                // each stage's nodes come from its own region's pool
                let pool = inst.cluster.region_pool();
                for s in &r.plan.stages {
                    for rep in &s.replicas {
                        assert!(pool.get(&rep.gpu_type, &s.region) > 0, "seed {seed}: stage placed where {} is absent", rep.gpu_type);
                    }
                }
                if r.plan.regions().len() == 1 {
                    single += 1;
                    assert_eq!(r.report.c_comm, 0.0, "seed {seed}");
                } else {
                    crossing += 1;
                }
                let want = expected_c_comm(&r.plan, &inst.job, &inst.cluster, &inst.store);
                assert!(rel(r.report.c_comm, want) <= 1e-12, "seed {seed}: {} vs {want}", r.report.c_comm);
                assert_eq!(r.report.c_iter, r.report.c_comp + r.report.c_comm);
            }
        }
    }
    assert!(two_region >= 100 && crossing >= 20 && single >= 20, "{two_region} {crossing} {single}");
}

#[test]
fn split_across_regions_pays_both_directions() {
    // one GPU per region; the model only fits when split in two
    let price = 2.5e-10;
    let cluster = ToyCluster {
        types: &[("A", 1, 40_000, 1.0)],
        zones: &[("e1", "east"), ("w1", "west")],
        avail: &[("A", "e1", 1), ("A", "w1", 1)],
        intra_bw: 1e10,
        inter_bw: 1e8,
        egress: price,
    }
    .build();
    let job = uniform_job(2, 8, vec![2]);
    let mut store = ProfileStore::new();
    // 1000 params -> 16000 model bytes per layer; 2 layers with 2 in flight do not fit
    store.insert("l", "A", 1, 2, rec(0.01, 0.02, 0.001, 1_000, 2_000, 3_000)).unwrap();
    let out = plan_search(&SearchRequest::new(Objective::MaxThroughput), &job, &cluster, &store).unwrap();
    let best = out.best();
    assert_eq!(best.plan.num_stages(), 2);
    assert_eq!(best.plan.regions().len(), 2);
    let (b, n_b) = (3_000.0, 4.0);
    let want = 2.0 * b * n_b * price;
    assert!(rel(best.report.c_comm, want) <= 1e-12, "{} vs {want}", best.report.c_comm);
    assert!(best.report.stages[0].t_p2p > 0.0);
}

fn oracle_all(inst: &Instance) -> Vec<hetplan_core::planner::RankedPlan> {
    evaluate_all_plans(&inst.job, &inst.cluster, &inst.store, &inst.cluster.region_pool(), &OracleCaps::default()).unwrap()
}

#[test]
fn budget_at_and_just_below_the_optimum() {
    let mut checked = 0;
    for seed in 0..200 {
        let inst = random_instance(seed);
        let all = oracle_all(&inst);
        let Some(opt) = best_of(&SearchRequest::new(Objective::MaxThroughput), &all) else { continue };
        let c = opt.report.c_iter;

        let at = SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::Budget(c));
        let got = plan_search(&at, &inst.job, &inst.cluster, &inst.store).unwrap();
        assert!(rel(got.best().report.t_iter, opt.report.t_iter) <= 1e-9, "seed {seed}");
        assert!(got.ranked.iter().all(|r| r.report.c_iter <= c));

        let eps = c * 1e-9;
        let below = SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::Budget(c - eps));
        let want = best_of(&below, &all);
        match (plan_search(&below, &inst.job, &inst.cluster, &inst.store), want) {
            (Ok(o), Some(w)) => {
                assert!(o.ranked.iter().all(|r| r.report.c_iter <= c - eps), "seed {seed}");
                assert!(rel(o.best().report.t_iter, w.report.t_iter) <= 1e-9, "seed {seed}");
            }
            (Err(PlanError::NoFeasiblePlan { reason }), None) => assert_eq!(reason, Rejection::Budget, "seed {seed}"),
            (got, want) => panic!("seed {seed}: planner {:?} vs oracle {:?}", got.map(|o| o.best().report.t_iter), want.map(|w| w.report.t_iter)),
        }
        checked += 1;
    }
    assert!(checked >= 100, "{checked}");
}

#[test]
fn unreachable_constraints_name_their_reason() {
    for seed in 0..100 {
        let inst = random_instance(seed);
        let Ok(fast) = plan_search(&SearchRequest::new(Objective::MaxThroughput), &inst.job, &inst.cluster, &inst.store) else {
            continue;
        };
        let floor = 2.0 / fast.best().report.t_iter;
        let req = SearchRequest::new(Objective::MinCostPerIteration).with_constraint(Constraint::MinThroughput(floor));
        match plan_search(&req, &inst.job, &inst.cluster, &inst.store) {
            Err(PlanError::NoFeasiblePlan { reason }) => assert_eq!(reason, Rejection::ThroughputFloor),
            other => panic!("seed {seed}: {:?}", other.map(|o| o.best().report.t_iter)),
        }
        let broke = SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::Budget(0.0));
        match plan_search(&broke, &inst.job, &inst.cluster, &inst.store) {
            Err(PlanError::NoFeasiblePlan { reason }) => assert_eq!(reason, Rejection::Budget),
            other => panic!("seed {seed}: {:?}", other.map(|o| o.best().report.c_iter)),
        }
    }
}

#[test]
fn more_nodes_never_hurt() {
    let mut compared = 0;
    for seed in 0..200 {
        let inst = random_instance(seed);
        let cache = TpCache::new();
        for ((gpu, zone), n) in inst.cluster.availability().clone() {
            let grown = inst.cluster.with_availability(&gpu, &zone, n + 1 + (seed % 2) as u32).unwrap();
            for objective in [Objective::MaxThroughput, Objective::MinCostPerIteration] {
                let req = SearchRequest::new(objective);
                let opts = PlannerOptions::default();
                let Ok(before) = plan_search_with(&req, &inst.job, &inst.cluster, &inst.store, &opts, &cache) else { continue };
                let after = plan_search_with(&req, &inst.job, &grown, &inst.store, &opts, &cache).unwrap();
                let (b, a) = (objective_value(objective, &before.best().report), objective_value(objective, &after.best().report));
                assert!(a <= b * (1.0 + 1e-9), "seed {seed} +{gpu}@{zone}: {a} > {b}");
                compared += 1;
            }
        }
        assert_eq!(cache.stats().recomputed, 0);
    }
    assert!(compared >= 200, "{compared}");
}

/// Capacity set to the exact peak of the only fitting layout, then one byte
/// less.
#[test]
fn memory_capacity_boundary_is_respected() {
    let job = uniform_job(2, 4, vec![1]);
    let mut store = ProfileStore::new();
    store.insert("l", "A", 1, 1, rec(0.01, 0.02, 0.001, 4_000, 10_000, 1_000)).unwrap();
    store.insert("l", "A", 2, 1, rec(0.006, 0.012, 0.001, 2_000, 5_000, 1_000)).unwrap();
    let probe = Plan { stages: vec![stage(0, 2, "us", &[("A", 2)])], mbs: 1, dp_degree: 1 };
    let exact = worker_memory(&probe, 0, 0, &job, &store).unwrap().m_peak;
    for (mem, fits) in [(exact, true), (exact - 1, false)] {
        let cluster = ToyCluster {
            types: &[("A", 2, mem, 1.0)],
            zones: &[("z", "us")],
            avail: &[("A", "z", 1)],
            intra_bw: 1e10,
            inter_bw: 1e9,
            egress: 0.0,
        }
        .build();
        let res = plan_search_with(&SearchRequest::new(Objective::MaxThroughput), &job, &cluster, &store, &top(20), &TpCache::new());
        match (res, fits) {
            (Ok(out), true) => {
                for r in &out.ranked {
                    let sim = simulate(&r.plan, &job, &cluster, &store).unwrap();
                    assert!(!sim.oom);
                    assert!(sim.peak_mem.values().all(|&m| m <= mem));
                }
                assert!(out.ranked.iter().any(|r| r.plan.num_stages() == 1 && r.plan.stages[0].replicas[0].tp == 2));
            }
            // a one-node cluster cannot host a split, so nothing is left
            (Err(PlanError::NoFeasiblePlan { .. }), false) => {}
            (Ok(out), false) => panic!("plan emitted over capacity: {:?}", out.best().plan),
            (Err(e), _) => panic!("{e}"),
        }
    }
}

/// Constraints placed on and just past the values of many feasible plans,
/// where the per-degree optimum under the constraint is least regular.
#[test]
fn constraints_near_feasible_plans_match_the_oracle() {
    let mut compared = 0;
    for seed in 0..150 {
        let inst = random_instance(seed);
        let all = oracle_all(&inst);
        let feasible: Vec<_> = all.iter().filter(|r| !r.report.oom).collect();
        for r in feasible.iter().step_by((feasible.len() / 5).max(1)) {
            for e in [0.0, 1e-9, 1e-3, 0.1] {
                let rate = 1.0 / r.report.t_iter * (1.0 + e);
                let budget = r.report.c_iter * (1.0 - e);
                for req in [
                    SearchRequest::new(Objective::MinCostPerIteration).with_constraint(Constraint::MinThroughput(rate)),
                    SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::MinThroughput(rate)),
                    SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::Budget(budget)),
                    SearchRequest::new(Objective::MinCostPerIteration).with_constraint(Constraint::Budget(budget)),
                ] {
                    let want = best_of(&req, &all).map(|w| objective_value(req.objective, &w.report));
                    let got = plan_search(&req, &inst.job, &inst.cluster, &inst.store)
                        .ok()
                        .map(|o| objective_value(req.objective, &o.best().report));
                    match (want, got) {
                        (Some(w), Some(g)) => assert!(rel(g, w) <= 1e-9, "seed {seed} {req:?}: {g} vs {w}"),
                        (None, None) => {}
                        other => panic!("seed {seed} {req:?}: oracle/planner {other:?}"),
                    }
                    compared += 1;
                }
            }
        }
    }
    assert!(compared >= 5000, "{compared}");
}
