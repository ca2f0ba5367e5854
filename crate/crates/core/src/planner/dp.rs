//! Dynamic program over pipeline stages.
//!
//! A state is (stage index, first layer, remaining node pool). Its value is a
//! Pareto frontier of suffix solutions over the quantities that determine
//! iteration time (sum and max of per-stage times, max sync, max update) and,
//! when cost matters, rental rate and egress cost. Elements are grouped by the
//! region and GPU types of their first stage, since those decide the
//! communication time of the boundary into them. The frontier makes the
//! recursion exact: the straggler of a suffix can change with the prefix,
//! and a single scalar per state cannot capture that.

use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use super::tables::{compute_tp_entry, for_each_split, stage_size_window, TpCache, TpKey};
use super::{Heuristics, PlannerOptions, StageSearch};
use crate::domain::{ClusterSpec, Constraint, GpuTypeSpec, JobSpec, Locality, Objective, Plan, Replica, StageAssignment};
use crate::profiles::ProfileStore;
use crate::simulator::{
    boundary_bytes, boundary_cost, class_profile, in_flight, iteration_time, memory_of, p2p_over, ring_sync,
    stage_compute, stage_rate, stage_update, ClassProfile, ClassUse,
};

/// Read-only search inputs shared by all tasks.
pub(crate) struct Env<'a> {
    pub job: &'a JobSpec,
    pub cluster: &'a ClusterSpec,
    pub store: &'a ProfileStore,
    /// GPU types sorted by name, so per-stage class lists come out in the
    /// same order the simulator uses.
    pub types: Vec<&'a GpuTypeSpec>,
    /// Profiled TP degrees per type, restricted to node width under H1.
    pub type_tps: Vec<Vec<u32>>,
    pub regions: Vec<&'a str>,
    /// Nodes per (type, region), laid out as `type * regions + region`.
    pub pool: Vec<u16>,
    pub objective: Objective,
    pub constraint: Option<Constraint>,
    pub opts: &'a PlannerOptions,
    pub tp_cache: &'a TpCache,
    pub cancel: &'a AtomicBool,
    pub deadline: Option<Instant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Aborted;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Halt {
    Aborted,
    /// The exhaustive search visited too many states.
    StateBudget,
}

impl From<Aborted> for Halt {
    fn from(_: Aborted) -> Self {
        Halt::Aborted
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TaskStats {
    pub states: u64,
    pub elements: u64,
    pub classes_fit: u64,
    pub classes_oom: u64,
    pub classes_missing: u64,
    pub constraint_rejects: u64,
    pub bound_prunes: u64,
    pub coarse_runs: u64,
}

#[derive(Debug, Clone, Copy)]
struct ClassOpt {
    tp: u32,
    profile: ClassProfile,
    oom: bool,
}

type ComboKey = SmallVec<[(u32, u32); 4]>;

#[derive(Debug, Clone)]
struct StageVals {
    compute: f64,
    update: f64,
    sync: f64,
    rate: f64,
    boundary_total: u64,
    gpus: u32,
    demand: SmallVec<[u16; 4]>,
    mask: u16,
    // (type index, tp, count, profile), in type order
    classes: SmallVec<[(usize, u32, u32, ClassProfile); 4]>,
}

#[derive(Debug)]
struct Link {
    len: u16,
    region: u8,
    sv: u32,
    next: Option<Rc<Link>>,
}

#[derive(Debug, Clone)]
struct Elem {
    region: u8,
    mask: u16,
    sum: f64,
    max: f64,
    sync: f64,
    upd: f64,
    rate: f64,
    comm: f64,
    gpus: u32,
    chain: Rc<Link>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Only time matters; cost breaks ties.
    Time,
    /// Time and cost both matter.
    Full,
}

impl Elem {
    fn partial(&self) -> Partial {
        Partial { sum: self.sum, max: self.max, sync: self.sync, upd: self.upd, rate: self.rate, comm: self.comm }
    }
}

fn dominates(a: &Elem, b: &Elem, mode: Mode) -> bool {
    let time_le = a.sum <= b.sum && a.max <= b.max && a.sync <= b.sync && a.upd <= b.upd;
    if !time_le {
        return false;
    }
    let time_lt = a.sum < b.sum || a.max < b.max || a.sync < b.sync || a.upd < b.upd;
    match mode {
        Mode::Time => time_lt || (a.rate <= b.rate && a.comm <= b.comm && a.gpus <= b.gpus),
        Mode::Full => {
            if !(a.rate <= b.rate && a.comm <= b.comm) {
                return false;
            }
            time_lt || a.rate < b.rate || a.comm < b.comm || a.gpus <= b.gpus
        }
    }
}

fn insert(front: &mut Vec<Elem>, cand: Elem, mode: Mode) {
    let same = |e: &Elem| e.region == cand.region && e.mask == cand.mask;
    if front.iter().any(|e| same(e) && dominates(e, &cand, mode)) {
        return;
    }
    front.retain(|e| !(same(e) && dominates(&cand, e, mode)));
    front.push(cand);
}

/// One finished candidate at the root of the DP.
#[derive(Debug, Clone)]
pub(crate) struct RootCandidate {
    pub t_iter: f64,
    pub c_iter: f64,
    pub plan: Plan,
}

// (stage, first layer, previous stage's region or NO_REGION, pool)
type MemoKey = (u16, u16, u8, SmallVec<[u16; 8]>);

const NO_REGION: u8 = u8::MAX;

/// Search over one (pipeline depth, microbatch size).
pub(crate) struct Task<'e, 'a> {
    env: &'e Env<'a>,
    p: usize,
    mbs: u32,
    window: (usize, usize),
    mode: Mode,
    options: FxHashMap<(usize, usize, usize), Rc<Vec<Vec<ClassOpt>>>>,
    sv_index: FxHashMap<(usize, usize, ComboKey), u32>,
    svs: Vec<StageVals>,
    p2p_cache: FxHashMap<(u32, bool, u16), f64>,
    pub stats: TaskStats,
    calls: u64,
    // objective values above this cannot make the result list
    bound: f64,
    // prefix sums of the fastest per-layer compute time at this mbs
    fastest: Vec<f64>,
    // cheapest rental rate of one replica, per second
    min_replica_rate: f64,
    // per type, per entry of `type_tps`: fastest single-layer compute time
    layer_min: Vec<Vec<f64>>,
    // per type: least ratio of its per-layer time to the fastest one
    slowdown: Vec<f64>,
    // prefix sums of the least GPU-seconds (tp * time) any type spends per layer
    work: Vec<f64>,
    // per type: least ratio of its per-layer GPU-seconds to `work`
    work_ratio: Vec<f64>,
}

struct Run {
    d: u32,
    n_b: u32,
    // no stage of an admissible plan can compute longer than this
    tau: f64,
    // per type: smallest TP degree that can meet `tau` on a shortest stage
    usable_tp: Vec<Option<u32>>,
    // one GPU type per stage, placed in the first region that fits
    coarse: bool,
    states: u64,
    state_budget: Option<u64>,
    combos: FxHashMap<(usize, usize, usize), Rc<Vec<u32>>>,
    memo: FxHashMap<MemoKey, Rc<Vec<Elem>>>,
}

/// Quantities of a partial plan covering a contiguous run of stages.
#[derive(Debug, Clone, Copy)]
struct Partial {
    sum: f64,
    max: f64,
    sync: f64,
    upd: f64,
    rate: f64,
    comm: f64,
}

fn fastest_prefix(env: &Env<'_>, mbs: u32) -> Vec<f64> {
    let n = env.job.num_layers();
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for l in 0..n {
        let mut best = f64::INFINITY;
        for (t, gpu) in env.types.iter().enumerate() {
            for &tp in &env.type_tps[t] {
                if let Ok(r) = env.store.lookup(env.job.layer_id_at(l), &gpu.name, tp, mbs) {
                    best = best.min(r.t_fwd + r.t_bwd);
                }
            }
        }
        // an unprofiled layer makes every plan infeasible; 0 keeps the
        // bound valid
        acc += if best.is_finite() { best } else { 0.0 };
        out.push(acc);
    }
    out
}

fn layer_min(env: &Env<'_>, mbs: u32) -> Vec<Vec<f64>> {
    let n = env.job.num_layers();
    env.types
        .iter()
        .zip(&env.type_tps)
        .map(|(gpu, tps)| {
            tps.iter()
                .map(|&tp| {
                    (0..n)
                        .filter_map(|l| env.store.lookup(env.job.layer_id_at(l), &gpu.name, tp, mbs).ok())
                        .map(|r| r.t_fwd + r.t_bwd)
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect()
}

fn slowdown(env: &Env<'_>, mbs: u32) -> Vec<f64> {
    let fastest = fastest_prefix(env, mbs);
    env.types
        .iter()
        .zip(&env.type_tps)
        .map(|(gpu, tps)| {
            let mut ratio = f64::INFINITY;
            for l in 0..env.job.num_layers() {
                let w = fastest[l + 1] - fastest[l];
                for &tp in tps {
                    if let Ok(r) = env.store.lookup(env.job.layer_id_at(l), &gpu.name, tp, mbs) {
                        ratio = ratio.min(if w > 0.0 { (r.t_fwd + r.t_bwd) / w } else { 1.0 });
                    }
                }
            }
            ratio.max(1.0)
        })
        .collect()
}

// per type and layer: least tp * (t_fwd + t_bwd) over the type's tp degrees
fn gpu_work(env: &Env<'_>, mbs: u32) -> Vec<Vec<f64>> {
    env.types
        .iter()
        .zip(&env.type_tps)
        .map(|(gpu, tps)| {
            (0..env.job.num_layers())
                .map(|l| {
                    tps.iter()
                        .filter_map(|&tp| {
                            let r = env.store.lookup(env.job.layer_id_at(l), &gpu.name, tp, mbs).ok()?;
                            Some(tp as f64 * (r.t_fwd + r.t_bwd))
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect()
}

fn min_replica_rate(env: &Env<'_>) -> f64 {
    env.types
        .iter()
        .zip(&env.type_tps)
        .filter_map(|(g, tps)| tps.first().map(|&tp| tp as f64 * g.price_per_gpu_second()))
        .fold(f64::INFINITY, f64::min)
}

/// Region indices to try for the next stage: the previous stage's region,
/// then the rest by descending free nodes. `pool` is laid out type-major
/// and region indices follow the root order, which breaks ties by name.
fn first_fit_order(pool: &[u16], nreg: usize, prev: u8) -> SmallVec<[usize; 4]> {
    let free = |r: usize| -> u32 { pool.iter().skip(r).step_by(nreg).map(|&n| n as u32).sum() };
    let mut rest: SmallVec<[usize; 4]> = (0..nreg).filter(|&r| r as u8 != prev).collect();
    rest.sort_by(|&a, &b| free(b).cmp(&free(a)).then(a.cmp(&b)));
    let mut out = SmallVec::new();
    if (prev as usize) < nreg {
        out.push(prev as usize);
    }
    out.extend(rest);
    out
}

impl<'e, 'a> Task<'e, 'a> {
    fn with_work(mut self) -> Self {
        let per_type = gpu_work(self.env, self.mbs);
        let n = self.env.job.num_layers();
        let least: Vec<f64> = (0..n).map(|l| per_type.iter().map(|w| w[l]).fold(f64::INFINITY, f64::min)).collect();
        self.work = std::iter::once(0.0)
            .chain(least.iter().scan(0.0, |acc, &w| {
                *acc += if w.is_finite() { w } else { 0.0 };
                Some(*acc)
            }))
            .collect();
        self.work_ratio = per_type
            .iter()
            .map(|w| {
                let r = (0..n)
                    .filter(|&l| least[l].is_finite())
                    .map(|l| if least[l] > 0.0 { w[l] / least[l] } else { 1.0 })
                    .fold(f64::INFINITY, f64::min);
                r.max(1.0)
            })
            .collect();
        self
    }

    pub fn new(env: &'e Env<'a>, p: usize, mbs: u32) -> Self {
        let n = env.job.num_layers();
        let mode = match (env.objective, env.constraint) {
            (Objective::MaxThroughput, None) => Mode::Time,
            _ => Mode::Full,
        };
        Self {
            env,
            p,
            mbs,
            window: stage_size_window(n, p, env.opts.partition_slack),
            mode,
            options: FxHashMap::default(),
            sv_index: FxHashMap::default(),
            svs: Vec::new(),
            p2p_cache: FxHashMap::default(),
            stats: TaskStats::default(),
            calls: 0,
            bound: f64::INFINITY,
            fastest: fastest_prefix(env, mbs),
            min_replica_rate: min_replica_rate(env),
            layer_min: layer_min(env, mbs),
            slowdown: slowdown(env, mbs),
            work: Vec::new(),
            work_ratio: Vec::new(),
        }
        .with_work()
    }

    fn heur(&self) -> &Heuristics {
        &self.env.opts.heuristics
    }

    fn check_abort(&mut self) -> Result<(), Aborted> {
        self.calls += 1;
        if self.env.cancel.load(Ordering::Relaxed) {
            return Err(Aborted);
        }
        if self.calls % 64 == 0 {
            if let Some(dl) = self.env.deadline {
                if Instant::now() > dl {
                    self.env.cancel.store(true, Ordering::Relaxed);
                    return Err(Aborted);
                }
            }
        }
        Ok(())
    }

    /// TP options per type for stage `i` covering `len` layers from `l0`.
    fn class_options(&mut self, i: usize, l0: usize, len: usize) -> Rc<Vec<Vec<ClassOpt>>> {
        if let Some(o) = self.options.get(&(i, l0, len)) {
            return o.clone();
        }
        let env = self.env;
        let flight = in_flight(self.p, i);
        let mut out = Vec::with_capacity(env.types.len());
        for (t, gpu) in env.types.iter().enumerate() {
            let key = TpKey {
                first_layer: l0,
                layer_count: len,
                mbs: self.mbs,
                gpu_type: gpu.name.clone(),
                in_flight: flight,
            };
            let mut opts = Vec::new();
            if self.heur().h2_min_tp {
                let entry = env.tp_cache.get_or_compute(key, |k| compute_tp_entry(env.job, env.store, gpu, k));
                self.stats.classes_oom += entry.any_oom as u64;
                self.stats.classes_missing += entry.any_missing as u64;
                for &tp in &env.type_tps[t] {
                    if entry.fitting.contains(&tp) {
                        let profile = class_profile(env.job, env.store, l0..l0 + len, &gpu.name, tp, self.mbs)
                            .expect("fitting degrees are profiled");
                        opts.push(ClassOpt { tp, profile, oom: false });
                    }
                }
            } else {
                // without early pruning every profiled degree is a candidate;
                // memory is checked when a combo is evaluated
                for &tp in &env.type_tps[t] {
                    match class_profile(env.job, env.store, l0..l0 + len, &gpu.name, tp, self.mbs) {
                        Ok(profile) => opts.push(ClassOpt { tp, profile, oom: false }),
                        Err(_) => self.stats.classes_missing += 1,
                    }
                }
            }
            self.stats.classes_fit += !opts.is_empty() as u64;
            out.push(opts);
        }
        let rc = Rc::new(out);
        self.options.insert((i, l0, len), rc.clone());
        rc
    }

    fn stage_vals(&mut self, l0: usize, len: usize, combo: &ComboKey, opts: &[Vec<ClassOpt>]) -> Option<u32> {
        let key = (l0, len, combo.clone());
        if let Some(&id) = self.sv_index.get(&key) {
            return Some(id);
        }
        let env = self.env;
        let mut classes: SmallVec<[(usize, u32, u32, ClassProfile); 4]> = SmallVec::new();
        let mut demand = SmallVec::new();
        let mut mask = 0u16;
        let mut gpus = 0;
        for (t, &(count, tp)) in combo.iter().enumerate() {
            if count == 0 {
                demand.push(0);
                continue;
            }
            let opt = opts[t].iter().find(|o| o.tp == tp).expect("combo built from options");
            let gpu = env.types[t];
            let nodes = gpu.nodes_for(count, tp);
            demand.push(u16::try_from(nodes).unwrap_or(u16::MAX));
            gpus += nodes * gpu.gpus_per_node;
            mask |= 1 << t;
            classes.push((t, tp, count, opt.profile));
            debug_assert!(!opt.oom);
        }
        let uses: SmallVec<[ClassUse<'_>; 4]> = classes
            .iter()
            .map(|(t, tp, count, p)| ClassUse { gpu: env.types[*t], tp: *tp, count: *count, profile: p })
            .collect();
        let sv = StageVals {
            compute: stage_compute(&uses),
            update: stage_update(&uses),
            sync: ring_sync(&uses, env.job, env.cluster),
            rate: stage_rate(&uses),
            boundary_total: boundary_bytes(&uses),
            gpus,
            demand,
            mask,
            classes: classes.clone(),
        };
        let id = self.svs.len() as u32;
        self.svs.push(sv);
        self.sv_index.insert(key, id);
        Some(id)
    }

    fn p2p(&mut self, sv: u32, same_region: bool, recv_mask: u16) -> f64 {
        if let Some(&v) = self.p2p_cache.get(&(sv, same_region, recv_mask)) {
            return v;
        }
        let env = self.env;
        let s = &self.svs[sv as usize];
        let uses: SmallVec<[ClassUse<'_>; 4]> = s
            .classes
            .iter()
            .map(|(t, tp, count, p)| ClassUse { gpu: env.types[*t], tp: *tp, count: *count, profile: p })
            .collect();
        let receivers: SmallVec<[&str; 4]> = (0..env.types.len())
            .filter(|t| recv_mask & (1 << t) != 0)
            .map(|t| env.types[t].name.as_str())
            .collect();
        let loc = if same_region { Locality::IntraZone } else { Locality::InterRegion };
        let v = p2p_over(&uses, receivers.iter().copied(), loc, env.cluster);
        self.p2p_cache.insert((sv, same_region, recv_mask), v);
        v
    }

    /// Non-dominated stage combos for stage `i` at the run's D.
    fn combos(&mut self, run: &mut Run, i: usize, l0: usize, len: usize) -> Rc<Vec<u32>> {
        if let Some(c) = run.combos.get(&(i, l0, len)) {
            return c.clone();
        }
        let env = self.env;
        let opts = self.class_options(i, l0, len);
        let ntypes = env.types.len();
        let nreg = env.regions.len();
        let max_nodes: Vec<u16> =
            (0..ntypes).map(|t| (0..nreg).map(|r| env.pool[t * nreg + r]).max().unwrap_or(0)).collect();
        let flight = in_flight(self.p, i);
        let check_mem = !self.heur().h2_min_tp;

        let mut raw: Vec<ComboKey> = Vec::new();
        for_each_split(run.d, ntypes, &mut |counts| {
            // cartesian product over tp choices of the used types
            let mut partial: Vec<ComboKey> = vec![SmallVec::new()];
            for (t, &c) in counts.iter().enumerate() {
                let mut next = Vec::new();
                if c == 0 {
                    for mut k in partial {
                        k.push((0, 0));
                        next.push(k);
                    }
                } else {
                    for k in &partial {
                        for o in &opts[t] {
                            if o.profile.compute_time() > run.tau {
                                continue;
                            }
                            let gpu = env.types[t];
                            if gpu.nodes_for(c, o.tp) > max_nodes[t] as u32 {
                                continue;
                            }
                            let mut k2 = k.clone();
                            k2.push((c, o.tp));
                            next.push(k2);
                        }
                    }
                }
                partial = next;
                if partial.is_empty() {
                    return;
                }
            }
            raw.extend(partial);
        });

        let mut ids: Vec<u32> = Vec::new();
        for combo in &raw {
            if check_mem {
                let oom = combo.iter().enumerate().any(|(t, &(c, tp))| {
                    c > 0 && {
                        let o = opts[t].iter().find(|o| o.tp == tp).expect("option");
                        memory_of(&o.profile, flight, env.job).m_peak > env.types[t].mem_bytes
                    }
                });
                if oom {
                    self.stats.classes_oom += 1;
                    continue;
                }
            }
            if let Some(id) = self.stage_vals(l0, len, combo, &opts) {
                ids.push(id);
            }
        }

        // drop combos another combo beats on every stage-level quantity
        let svs = &self.svs;
        let stage_dominates = |a: &StageVals, b: &StageVals| {
            a.mask == b.mask
                && a.classes.iter().zip(&b.classes).all(|(x, y)| x.3.boundary_bytes == y.3.boundary_bytes)
                && a.compute <= b.compute
                && a.update <= b.update
                && a.sync <= b.sync
                && a.rate <= b.rate
                && a.boundary_total <= b.boundary_total
                && a.gpus <= b.gpus
                && a.demand.iter().zip(&b.demand).all(|(x, y)| x <= y)
        };
        let mut kept: Vec<u32> = Vec::with_capacity(ids.len());
        for &id in &ids {
            let s = &svs[id as usize];
            if kept.iter().any(|&k| stage_dominates(&svs[k as usize], s)) {
                continue;
            }
            kept.retain(|&k| !stage_dominates(s, &svs[k as usize]));
            kept.push(id);
        }
        if run.coarse {
            kept.retain(|&k| svs[k as usize].mask.count_ones() == 1);
        }
        let rc = Rc::new(kept);
        run.combos.insert((i, l0, len), rc.clone());
        rc
    }

    /// Longest stage compute time any plan at degree `d` can have while
    /// staying within the constraint and the bound. The iteration time is
    /// at least the fastest possible layer sum plus `n_b - 1` times the
    /// slowest stage, and the cost at least the cheapest possible rental
    /// rate times the iteration time.
    fn stage_cap(&self, d: u32, n_b: u32, bound: f64) -> (f64, Vec<Option<u32>>) {
        let slack = 1.0 + 1e-9;
        let min_rate = self.p as f64 * d as f64 * self.min_replica_rate;
        let mut t_cap = f64::INFINITY;
        let mut cost_cap = f64::INFINITY;
        match self.env.objective {
            Objective::MaxThroughput => t_cap = t_cap.min(bound),
            Objective::MinCostPerIteration => cost_cap = cost_cap.min(bound),
        }
        match self.env.constraint {
            Some(Constraint::Budget(b)) => cost_cap = cost_cap.min(b),
            Some(Constraint::MinThroughput(f)) => t_cap = t_cap.min(1.0 / f),
            None => {}
        }
        if cost_cap.is_finite() && min_rate > 0.0 {
            t_cap = t_cap.min(cost_cap * slack / (min_rate / slack));
        }
        let tau = if t_cap.is_finite() && n_b > 1 {
            let total = self.fastest[self.env.job.num_layers()];
            ((t_cap * slack - total / slack).max(0.0) / (n_b - 1) as f64) * slack
        } else {
            f64::INFINITY
        };
        let lo = self.window.0 as f64;
        let usable = self
            .env
            .type_tps
            .iter()
            .zip(&self.layer_min)
            .map(|(tps, mins)| tps.iter().zip(mins).find(|&(_, &m)| lo * m <= tau).map(|(&tp, _)| tp))
            .collect();
        (tau, usable)
    }

    /// False when the pool cannot host `stages` more stages of `d`
    /// replicas each, even with every replica at its smallest usable degree.
    // most replicas of type `t` that `nodes` nodes can host
    fn replicas(&self, run: &Run, t: usize, nodes: u16) -> u64 {
        let Some(tp) = run.usable_tp[t] else { return 0 };
        let gpu = &self.env.types[t];
        let per_node = gpu.replicas_per_node(tp) as u64;
        if per_node > 0 {
            nodes as u64 * per_node
        } else {
            nodes as u64 / tp.div_ceil(gpu.gpus_per_node) as u64
        }
    }

    fn can_host(&self, run: &Run, pool: &[u16], stages: usize) -> bool {
        let nreg = self.env.regions.len();
        let mut hosted = 0usize;
        for r in 0..nreg {
            let replicas: u64 = (0..self.env.types.len()).map(|t| self.replicas(run, t, pool[t * nreg + r])).sum();
            hosted += (replicas / run.d as u64) as usize;
        }
        hosted >= stages
    }

    /// Lower bound on the longest of `stages` stages sharing `work` (in
    /// fastest-type seconds) when they must be built from `pool`. A stage is
    /// as slow as its slowest type, and only so many stages fit on the
    /// faster types.
    fn tier_max(&self, run: &Run, pool: &[u16], stages: usize, work: f64) -> f64 {
        if stages == 0 {
            return 0.0;
        }
        let tiers = self.tier_speed(run, pool, stages);
        if tiers <= 0.0 {
            return f64::INFINITY;
        }
        work / tiers
    }

    /// Lower bound on the longest stage from GPU-seconds: every replica of a
    /// stage runs its layers, so `D` times the stage's work must fit in the
    /// GPUs of `pool` within the longest stage time.
    fn work_max(&self, run: &Run, pool: &[u16], l0: usize, l1: usize) -> f64 {
        let need = run.d as f64 * (self.work[l1] - self.work[l0]);
        if need <= 0.0 {
            return 0.0;
        }
        let nreg = self.env.regions.len();
        let mut cap = 0.0;
        for (t, gpu) in self.env.types.iter().enumerate() {
            if !self.work_ratio[t].is_finite() {
                continue;
            }
            let nodes: u64 = (0..nreg).map(|r| pool[t * nreg + r] as u64).sum();
            cap += (nodes * gpu.gpus_per_node as u64) as f64 / self.work_ratio[t];
        }
        if cap <= 0.0 {
            return f64::INFINITY;
        }
        need / cap
    }

    // sum over the best `stages` stages of 1 / slowdown, or 0 if they do not fit
    fn tier_speed(&self, run: &Run, pool: &[u16], stages: usize) -> f64 {
        let nreg = self.env.regions.len();
        let ntypes = self.env.types.len();
        let mut order: SmallVec<[usize; 4]> = (0..ntypes).filter(|&t| self.slowdown[t].is_finite()).collect();
        order.sort_by(|&a, &b| self.slowdown[a].total_cmp(&self.slowdown[b]));
        let mut per_region = vec![0u64; nreg];
        let (mut placed, mut speed) = (0usize, 0.0);
        for &t in &order {
            let mut cap = 0usize;
            for (r, acc) in per_region.iter_mut().enumerate() {
                *acc += self.replicas(run, t, pool[t * nreg + r]);
                cap += (*acc / run.d as u64) as usize;
            }
            let cap = cap.min(stages);
            if cap > placed {
                speed += (cap - placed) as f64 / self.slowdown[t];
                placed = cap;
            }
        }
        if placed < stages {
            return 0.0;
        }
        speed
    }

    /// True when no plan containing `part` can be admitted or can beat the
    /// current bound. `part` covers stages `first..end` and layers
    /// `l_first..l_end`; the other stages are filled in optimistically with
    /// the fastest per-layer times and the cheapest replicas. Every term of
    /// the iteration time and the cost only grows as stages are added, so
    /// this is a lower bound.
    /// When `rest` is given it is the pool left for the stages after `end`.
    #[allow(clippy::too_many_arguments)]
    fn prune(
        &mut self,
        run: &Run,
        part: Partial,
        first: usize,
        end: usize,
        l_first: usize,
        l_end: usize,
        rest: Option<&[u16]>,
    ) -> bool {
        let n = self.env.job.num_layers();
        let pre = self.fastest[l_first];
        let post = self.fastest[n] - self.fastest[l_end];
        let mut max = part.max;
        if first > 0 {
            max = max.max(pre / first as f64);
        }
        if end < self.p {
            let after = self.p - end;
            max = max.max(match rest {
                Some(pool) => self.tier_max(run, pool, after, post).max(self.work_max(run, pool, l_end, n)),
                None => post / after as f64,
            });
        }
        if let (Some(pool), true) = (rest, first > 0) {
            let used: SmallVec<[u16; 8]> = self.env.pool.iter().zip(pool).map(|(a, b)| a - b).collect();
            max = max.max(self.work_max(run, &used, 0, l_first));
        }
        let others = (first + self.p - end) as f64;
        let t = iteration_time(pre + part.sum + post, max, part.sync, part.upd, run.n_b);
        let rate = part.rate + others * run.d as f64 * self.min_replica_rate;
        let c = rate * t + part.comm;
        let rejected = match self.env.constraint {
            None => false,
            Some(Constraint::Budget(b)) => c > b * (1.0 + 1e-9) + f64::EPSILON,
            Some(Constraint::MinThroughput(floor)) => t > (1.0 / floor) * (1.0 + 1e-9),
        };
        if rejected {
            self.stats.constraint_rejects += 1;
            return true;
        }
        let v = match self.env.objective {
            Objective::MaxThroughput => t,
            Objective::MinCostPerIteration => c,
        };
        if v > self.bound * (1.0 + 1e-9) {
            self.stats.bound_prunes += 1;
            return true;
        }
        false
    }

    fn solve(&mut self, run: &mut Run, i: usize, l0: usize, pool: &[u16], prev: u8) -> Result<Rc<Vec<Elem>>, Halt> {
        let key: MemoKey = (i as u16, l0 as u16, prev, SmallVec::from_slice(pool));
        if let Some(v) = run.memo.get(&key) {
            return Ok(v.clone());
        }
        self.check_abort()?;
        self.stats.states += 1;
        run.states += 1;
        if run.state_budget.is_some_and(|b| run.states > b) {
            return Err(Halt::StateBudget);
        }

        let env = self.env;
        let n = env.job.num_layers();
        let (lo, hi) = self.window;
        let rest_stages = self.p - i - 1;
        let nreg = env.regions.len();
        let ntypes = env.types.len();
        let last = rest_stages == 0;
        let mut front: Vec<Elem> = Vec::new();

        let empty = Partial { sum: 0.0, max: 0.0, sync: 0.0, upd: 0.0, rate: 0.0, comm: 0.0 };
        if !self.can_host(run, pool, self.p - i) || self.prune(run, empty, i, i, l0, l0, Some(pool)) {
            let rc = Rc::new(front);
            run.memo.insert(key, rc.clone());
            return Ok(rc);
        }
        let order: SmallVec<[usize; 4]> = if run.coarse { first_fit_order(pool, nreg, prev) } else { (0..nreg).collect() };

        for len in lo..=hi {
            if l0 + len > n {
                break;
            }
            let left = n - l0 - len;
            if left < rest_stages * lo || left > rest_stages * hi {
                continue;
            }
            let combos = self.combos(run, i, l0, len);
            for &sv_id in combos.iter() {
                let alone = {
                    let sv = &self.svs[sv_id as usize];
                    Partial {
                        sum: sv.compute,
                        max: sv.compute,
                        sync: sv.sync,
                        upd: sv.update,
                        rate: sv.rate,
                        comm: 0.0,
                    }
                };
                if self.prune(run, alone, i, i + 1, l0, l0 + len, None) {
                    continue;
                }
                let mut placed = false;
                for &r in &order {
                    if placed && run.coarse {
                        break;
                    }
                    let fits = {
                        let sv = &self.svs[sv_id as usize];
                        (0..ntypes).all(|t| sv.demand[t] <= pool[t * nreg + r])
                    };
                    if !fits {
                        continue;
                    }
                    placed = true;
                    let (compute, update, sync, rate, btotal, gpus, mask) = {
                        let sv = &self.svs[sv_id as usize];
                        (sv.compute, sv.update, sv.sync, sv.rate, sv.boundary_total, sv.gpus, sv.mask)
                    };
                    if last {
                        let s = compute + 0.0;
                        let e = Elem {
                            region: r as u8,
                            mask,
                            sum: s + 0.0,
                            max: s,
                            sync,
                            upd: update,
                            rate: rate + 0.0,
                            comm: 0.0,
                            gpus,
                            chain: Rc::new(Link { len: len as u16, region: r as u8, sv: sv_id, next: None }),
                        };
                        self.stats.elements += 1;
                        if self.prune(run, e.partial(), i, self.p, l0, n, None) {
                            continue;
                        }
                        insert(&mut front, e, self.mode);
                        continue;
                    }
                    let mut next_pool: SmallVec<[u16; 8]> = SmallVec::from_slice(pool);
                    {
                        let sv = &self.svs[sv_id as usize];
                        for t in 0..ntypes {
                            next_pool[t * nreg + r] -= sv.demand[t];
                        }
                    }
                    let next_prev = if run.coarse { r as u8 } else { NO_REGION };
                    let child = self.solve(run, i + 1, l0 + len, &next_pool, next_prev)?;
                    for e in child.iter() {
                        let p2p = self.p2p(sv_id, e.region as usize == r, e.mask);
                        let s = compute + p2p;
                        let bc = boundary_cost(btotal, run.n_b, env.regions[r], env.regions[e.region as usize], env.cluster);
                        let cand = Elem {
                            region: r as u8,
                            mask,
                            sum: s + e.sum,
                            max: s.max(e.max),
                            sync: sync.max(e.sync),
                            upd: update.max(e.upd),
                            rate: rate + e.rate,
                            comm: bc + e.comm,
                            gpus: gpus + e.gpus,
                            chain: Rc::new(Link {
                                len: len as u16,
                                region: r as u8,
                                sv: sv_id,
                                next: Some(e.chain.clone()),
                            }),
                        };
                        self.stats.elements += 1;
                        if self.prune(run, cand.partial(), i, self.p, l0, n, None) {
                            continue;
                        }
                        insert(&mut front, cand, self.mode);
                    }
                }
            }
        }
        let rc = Rc::new(front);
        run.memo.insert(key, rc.clone());
        Ok(rc)
    }

    fn plan_of(&self, chain: &Rc<Link>, d: u32) -> Plan {
        let mut stages = Vec::with_capacity(self.p);
        let mut l0 = 0usize;
        let mut cur = Some(chain.clone());
        while let Some(link) = cur {
            let sv = &self.svs[link.sv as usize];
            let mut replicas = Vec::with_capacity(d as usize);
            for &(t, tp, count, _) in &sv.classes {
                for _ in 0..count {
                    replicas.push(Replica::new(self.env.types[t].name.clone(), tp));
                }
            }
            stages.push(StageAssignment {
                first_layer: l0,
                layer_count: link.len as usize,
                region: self.env.regions[link.region as usize].to_string(),
                replicas,
            });
            l0 += link.len as usize;
            cur = link.next.clone();
        }
        let mut plan = Plan { stages, mbs: self.mbs, dp_degree: d };
        plan.canonicalize();
        plan
    }

    /// Best candidates at data-parallel degree `d` admitted by the
    /// constraint and not worse than `bound`, ordered by the objective.
    pub fn run(&mut self, d: u32, keep: usize, bound: f64) -> Result<Vec<RootCandidate>, Aborted> {
        self.bound = bound;
        let Some(n_b) = self.env.job.num_microbatches(d, self.mbs) else {
            return Ok(Vec::new());
        };
        let (tau, usable_tp) = self.stage_cap(d, n_b, bound);
        let (coarse, state_budget) = match self.env.opts.stage_search {
            StageSearch::Exhaustive => (false, None),
            StageSearch::Coarse => (true, None),
            StageSearch::Adaptive { state_budget } => (false, Some(state_budget)),
        };
        let mut run = Run {
            d,
            n_b,
            tau,
            usable_tp,
            coarse,
            states: 0,
            state_budget,
            combos: FxHashMap::default(),
            memo: FxHashMap::default(),
        };
        let pool = self.env.pool.clone();
        let root = match self.solve(&mut run, 0, 0, &pool, NO_REGION) {
            Ok(root) => root,
            Err(Halt::Aborted) => return Err(Aborted),
            Err(Halt::StateBudget) => {
                log::debug!("P={} mbs={} D={d}: state budget exceeded, retrying coarse", self.p, self.mbs);
                self.stats.coarse_runs += 1;
                run.coarse = true;
                run.state_budget = None;
                run.memo.clear();
                run.combos.clear();
                match self.solve(&mut run, 0, 0, &pool, NO_REGION) {
                    Ok(root) => root,
                    Err(_) => return Err(Aborted),
                }
            }
        };
        let mut cands: Vec<(f64, f64, u32, &Elem)> = Vec::with_capacity(root.len());
        for e in root.iter() {
            let t = iteration_time(e.sum, e.max, e.sync, e.upd, n_b);
            let c_comp = e.rate * t;
            let c = c_comp + e.comm;
            if let Some(con) = self.env.constraint {
                if !con.admits(t, c) {
                    self.stats.constraint_rejects += 1;
                    continue;
                }
            }
            cands.push((t, c, e.gpus, e));
        }
        let objective = self.env.objective;
        cands.sort_by(|a, b| match objective {
            Objective::MaxThroughput => a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)),
            Objective::MinCostPerIteration => a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)).then(a.2.cmp(&b.2)),
        });
        // materialize a few extra so plan ordering can break exact ties
        let take = keep.saturating_mul(2).max(keep + 4);
        let out = cands
            .iter()
            .take(take)
            .map(|&(t, c, _, e)| RootCandidate { t_iter: t, c_iter: c, plan: self.plan_of(&e.chain, d) })
            .collect();
        Ok(out)
    }
}
