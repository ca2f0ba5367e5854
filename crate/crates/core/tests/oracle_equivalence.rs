use hetplan_core::domain::{validate_plan, Constraint, Objective, SearchRequest};
use hetplan_core::fixtures::{random_instance, random_instance_with, Instance, InstanceShape};
use hetplan_core::oracle::{best_of, evaluate_all_plans, OracleCaps};
use hetplan_core::planner::{objective_value, plan_search, PlanError, RankedPlan};
use hetplan_core::simulate;

const SEEDS: u64 = 250;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn requests(feasible: &[&RankedPlan]) -> Vec<SearchRequest> {
    let mut out = vec![
        SearchRequest::new(Objective::MaxThroughput),
        SearchRequest::new(Objective::MinCostPerIteration),
    ];
    if !feasible.is_empty() {
        let c = median(feasible.iter().map(|r| r.report.c_iter).collect());
        let f = median(feasible.iter().map(|r| 1.0 / r.report.t_iter).collect());
        out.push(SearchRequest::new(Objective::MaxThroughput).with_constraint(Constraint::Budget(c)));
        out.push(SearchRequest::new(Objective::MinCostPerIteration).with_constraint(Constraint::MinThroughput(f)));
    }
    out
}

fn check(inst: &Instance, req: &SearchRequest, all: &[RankedPlan]) -> Result<(), String> {
    let want = best_of(req, all);
    let got = plan_search(req, &inst.job, &inst.cluster, &inst.store);
    match (want, got) {
        (None, Err(PlanError::NoFeasiblePlan { .. })) => Ok(()),
        (None, Ok(o)) => Err(format!("planner found {:?}, oracle found nothing", o.best().report.t_iter)),
        (None, Err(e)) => Err(format!("unexpected planner error {e}")),
        (Some(w), Err(e)) => Err(format!("planner failed ({e}), oracle has {}", w.report.t_iter)),
        (Some(w), Ok(o)) => {
            let (pv, ov) = (objective_value(req.objective, &o.best().report), objective_value(req.objective, &w.report));
            if rel(pv, ov) > 1e-9 {
                return Err(format!("planner {pv} vs oracle {ov}\nplanner {:?}\noracle {:?}", o.best().plan, w.plan));
            }
            for r in &o.ranked {
                let sim = simulate(&r.plan, &inst.job, &inst.cluster, &inst.store).map_err(|e| e.to_string())?;
                if sim.oom || !validate_plan(&r.plan, &inst.job, &inst.cluster).is_empty() {
                    return Err("emitted plan is invalid or OOM".into());
                }
                if req.constraint.is_some_and(|c| !c.admits(sim.t_iter, sim.c_iter)) {
                    return Err("emitted plan violates the constraint".into());
                }
            }
            Ok(())
        }
    }
}

fn run_suite(seeds: std::ops::Range<u64>, make: impl Fn(u64) -> Instance) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut compared = 0;
    for seed in seeds {
        let inst = make(seed);
        let pool = inst.cluster.region_pool();
        let all = evaluate_all_plans(&inst.job, &inst.cluster, &inst.store, &pool, &OracleCaps::default()).unwrap();
        let feasible: Vec<&RankedPlan> = all.iter().filter(|r| !r.report.oom).collect();
        for req in requests(&feasible) {
            compared += 1;
            if let Err(e) = check(&inst, &req, &all) {
                failures.push(format!("seed {seed} {:?} {:?}: {e}", req.objective, req.constraint));
            }
        }
    }
    (compared, failures)
}

fn seeds() -> u64 {
    std::env::var("EQ_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(SEEDS)
}

#[test]
fn planner_matches_exhaustive_search_on_random_instances() {
    let (compared, failures) = run_suite(0..seeds(), random_instance);
    assert!(compared >= 800, "too few comparisons: {compared}");
    assert!(failures.is_empty(), "{} mismatches:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn tight_memory_instances_match_and_never_oom() {
    let shape = InstanceShape { mem_fraction: (0.05, 0.6), missing_rate: 0.0, ..Default::default() };
    let (_, failures) = run_suite(10_000..10_000 + seeds(), |s| random_instance_with(s, &shape));
    assert!(failures.is_empty(), "{} mismatches:\n{}", failures.len(), failures.join("\n"));
}
