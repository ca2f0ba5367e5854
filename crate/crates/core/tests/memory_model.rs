mod common;

use common::*;
use hetplan_core::domain::{JobSpec, LayerRef, Plan};
use hetplan_core::fixtures::random_instance;
use hetplan_core::planner::{enumerate_partitions, min_tp_table};
use hetplan_core::profiles::ProfileStore;
use hetplan_core::simulator::worker_memory;
use proptest::prelude::*;

#[test]
fn hand_computed_pipeline_memory() {
    // 2 bytes per value, optimizer multiplier 8: 16 bytes per parameter
    let job = uniform_job(4, 8, vec![1]);
    let mut store = ProfileStore::new();
    store.insert("l", "A", 1, 1, rec(0.1, 0.2, 0.01, 1_000, 300, 100)).unwrap();
    let plan = Plan {
        stages: vec![stage(0, 3, "us", &[("A", 1)]), stage(3, 1, "us", &[("A", 1)])],
        mbs: 1,
        dp_degree: 1,
    };
    let first = worker_memory(&plan, 0, 0, &job, &store).unwrap();
    // 3 layers: 3000 params, 1200 activation bytes per microbatch, 2 in flight
    assert_eq!(first.m_model, 48_000);
    assert_eq!(first.m_activation, 2_400);
    assert_eq!(first.m_peak, 50_400);
    let last = worker_memory(&plan, 1, 0, &job, &store).unwrap();
    assert_eq!((last.m_model, last.m_activation, last.m_peak), (16_000, 400, 16_400));
    assert_eq!(first.components.values().sum::<u64>(), first.m_peak);
    assert_eq!(first.components["weights"], 6_000);
    assert_eq!(first.components["gradients"], 6_000);
    assert_eq!(first.components["optimizer_and_buffers"], 36_000);
    assert_eq!(first.components["activations"], 2_400);
}

#[derive(Debug, Clone)]
struct Fixture {
    // per layer id: params and activation bytes at tp=1
    a: (u64, u64, u64),
    b: (u64, u64, u64),
    head: u32,
    tail: u32,
    mul: f64,
    tps: Vec<u32>,
}

fn fixture() -> impl Strategy<Value = Fixture> {
    let layer = || (1u64..1 << 24, 0u64..1 << 20, 0u64..1 << 20);
    (layer(), layer(), 1u32..6, 1u32..6, prop::sample::select(vec![1.0, 2.0, 4.0, 8.0, 16.0]))
        .prop_map(|(a, b, head, tail, mul)| Fixture { a, b, head, tail, mul, tps: vec![1, 2, 4, 8] })
}

impl Fixture {
    fn job(&self) -> JobSpec {
        JobSpec::new(
            "p",
            vec![LayerRef { id: "a".into(), repeat: self.head }, LayerRef { id: "b".into(), repeat: self.tail }],
            8,
            16,
            2,
            self.mul,
            vec![1],
        )
        .unwrap()
    }

    /// Records sharded evenly: tp ranks hold 1/tp of params and activations.
    fn store(&self) -> ProfileStore {
        let mut s = ProfileStore::new();
        for &tp in &self.tps {
            let t = tp as u64;
            for (id, (p, mid, out)) in [("a", self.a), ("b", self.b)] {
                s.insert(id, "G", tp, 1, rec(0.1, 0.1, 0.1, p * 8 / t, mid * 8 / t, out * 8 / t)).unwrap();
            }
        }
        s
    }

    fn layers(&self) -> usize {
        (self.head + self.tail) as usize
    }
}

fn split_plan(cuts: &[usize], total: usize, tp: u32) -> Plan {
    let mut bounds = vec![0];
    bounds.extend_from_slice(cuts);
    bounds.push(total);
    let stages = bounds.windows(2).map(|w| stage(w[0], w[1] - w[0], "us", &[("G", tp)])).collect();
    Plan { stages, mbs: 1, dp_degree: 1 }
}

fn cut_of(f: &Fixture, r: usize) -> usize {
    1 + r % (f.layers() - 1).max(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn memory_is_additive_over_layers(f in fixture(), r in 0usize..64) {
        prop_assume!(f.layers() >= 2);
        let (job, store) = (f.job(), f.store());
        let n = f.layers();
        let cut = cut_of(&f, r);
        // the same in-flight count for all three ranges: each range is the
        // first stage of a two-stage pipeline
        let whole = worker_memory(&split_plan(&[n], n, 1), 0, 0, &job, &store).unwrap();
        let left = worker_memory(&split_plan(&[cut], n, 1), 0, 0, &job, &store).unwrap();
        let right_plan = Plan {
            stages: vec![stage(cut, n - cut, "us", &[("G", 1)]), stage(n, 0, "us", &[("G", 1)])],
            mbs: 1,
            dp_degree: 1,
        };
        let right = worker_memory(&right_plan, 0, 0, &job, &store).unwrap();
        prop_assert_eq!(whole.m_model, left.m_model + right.m_model);
        prop_assert_eq!(whole.m_activation, left.m_activation + right.m_activation);
        prop_assert_eq!(whole.m_peak, left.m_peak + right.m_peak);
        for m in [&whole, &left, &right] {
            prop_assert_eq!(m.components.values().sum::<u64>(), m.m_peak);
            prop_assert_eq!(m.m_peak, m.m_model + m.m_activation);
        }
    }

    #[test]
    fn tensor_parallel_sharding_divides_memory(f in fixture(), r in 0usize..64) {
        let (job, store) = (f.job(), f.store());
        let n = f.layers();
        let cuts: Vec<usize> = if n >= 2 { vec![cut_of(&f, r)] } else { vec![] };
        let p = cuts.len() + 1;
        for s in 0..p {
            let base = worker_memory(&split_plan(&cuts, n, 1), s, 0, &job, &store).unwrap();
            let mut prev = base.m_peak;
            for &tp in &f.tps[1..] {
                let m = worker_memory(&split_plan(&cuts, n, tp), s, 0, &job, &store).unwrap();
                prop_assert_eq!(m.m_model * tp as u64, base.m_model);
                prop_assert_eq!(m.m_activation * tp as u64, base.m_activation);
                prop_assert!(m.m_peak <= prev);
                prev = m.m_peak;
            }
        }
    }

    #[test]
    fn activations_scale_with_in_flight_depth(f in fixture(), extra in 0usize..4) {
        let (job, store) = (f.job(), f.store());
        let n = f.layers();
        prop_assume!(n > extra);
        // stage 0 of a pipeline with `extra` single-layer stages after it
        let head = n - extra;
        let cuts: Vec<usize> = (head..n).collect();
        let deep = worker_memory(&split_plan(&cuts, n, 1), 0, 0, &job, &store).unwrap();
        let alone = worker_memory(&split_plan(&[], head, 1), 0, 0, &job, &store).unwrap();
        prop_assert_eq!(deep.m_model, alone.m_model);
        prop_assert_eq!(deep.m_activation, alone.m_activation * (1 + extra as u64));
    }
}

/// Smallest node-local tp whose worker fits, found by simulating memory for
/// every candidate degree.
fn brute_min_tp(job: &JobSpec, store: &ProfileStore, part: &[usize], s: usize, gpu: &str, mem: u64, gpn: u32, mbs: u32) -> Option<u32> {
    let mut l0 = 0;
    let stages: Vec<_> = part
        .iter()
        .map(|&len| {
            let st = stage(l0, len, "r", &[(gpu, 1)]);
            l0 += len;
            st
        })
        .collect();
    (1..=gpn).find(|&tp| {
        let mut plan = Plan { stages: stages.clone(), mbs, dp_degree: 1 };
        plan.stages[s].replicas[0].tp = tp;
        matches!(worker_memory(&plan, s, 0, job, store), Ok(m) if m.m_peak <= mem)
    })
}

#[test]
fn min_tp_table_matches_brute_force() {
    let mut entries = 0;
    for seed in 0..150 {
        let inst = random_instance(seed);
        let mbs_set = inst.job.allowed_microbatch_sizes().to_vec();
        for p in 1..=inst.job.num_layers() {
            let parts = enumerate_partitions(&inst.job, p, 1);
            let table = min_tp_table(&inst.job, &inst.cluster, &inst.store, &parts, &mbs_set);
            for part in &parts {
                let mut l0 = 0;
                for (s, &len) in part.iter().enumerate() {
                    for &mbs in &mbs_set {
                        for gpu in inst.cluster.gpu_types() {
                            let want = brute_min_tp(&inst.job, &inst.store, part, s, &gpu.name, gpu.mem_bytes, gpu.gpus_per_node, mbs);
                            let key = table
                                .keys()
                                .find(|k| {
                                    k.first_layer == l0
                                        && k.layer_count == len
                                        && k.mbs == mbs
                                        && k.gpu_type == gpu.name
                                        && k.in_flight == (p - s) as u64
                                })
                                .expect("table covers every stage shape");
                            assert_eq!(table[key], want, "seed {seed} partition {part:?} stage {s} {} mbs {mbs}", gpu.name);
                            entries += 1;
                        }
                    }
                    l0 += len;
                }
            }
        }
    }
    assert!(entries >= 1000, "{entries}");
}
