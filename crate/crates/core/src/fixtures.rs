//! Seeded random instances small enough for exhaustive search.
//!
//! Used by the equivalence and safety suites. Every instance stays within
//! the default oracle caps: at most 8 nodes, 2 GPU types, 2 regions, 4
//! layers and 2 microbatch sizes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{ClusterSpec, GpuTypeSpec, JobSpec, LayerRef, LinkKey, Locality, Zone};
use crate::profiles::{BandwidthModel, ProfileRecord, ProfileStore};

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub job: JobSpec,
    pub store: ProfileStore,
    pub cluster: ClusterSpec,
}

/// Knobs for [`random_instance_with`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub max_nodes: u32,
    pub max_layers: u32,
    /// Probability that a (type, tp, mbs) profile row is left out.
    pub missing_rate: f64,
    /// Memory per GPU as a fraction of the whole model's tp=1 footprint is
    /// drawn from this range; low values force OOM pruning.
    pub mem_fraction: (f64, f64),
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self { max_nodes: 8, max_layers: 4, missing_rate: 0.1, mem_fraction: (0.25, 1.5) }
    }
}

pub fn random_instance(seed: u64) -> Instance {
    random_instance_with(seed, &InstanceShape::default())
}

pub fn random_instance_with(seed: u64, shape: &InstanceShape) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ntypes = rng.gen_range(1..=2usize);
    let type_names = ["A", "B"];
    let nregions = rng.gen_range(1..=2usize);
    let region_names = ["east", "west"];

    // layers: one id, or two ids as consecutive runs
    let num_layers = rng.gen_range(1..=shape.max_layers);
    let distinct = if num_layers > 1 { rng.gen_range(1..=2usize) } else { 1 };
    let ids = ["attn", "mlp"];
    let layers: Vec<LayerRef> = if distinct == 1 {
        vec![LayerRef { id: ids[0].into(), repeat: num_layers }]
    } else {
        let head = rng.gen_range(1..num_layers);
        vec![
            LayerRef { id: ids[0].into(), repeat: head },
            LayerRef { id: ids[1].into(), repeat: num_layers - head },
        ]
    };

    let mbs_set: Vec<u32> = match rng.gen_range(0..3) {
        0 => vec![1],
        1 => vec![2],
        _ => vec![1, 2],
    };
    let gbs = *[4u32, 8, 16].choose(&mut rng).unwrap();
    let dts = 2u32;
    let mul = *[4.0f64, 8.0, 16.0].choose(&mut rng).unwrap();

    struct LayerShape {
        fwd: f64,
        params: u64,
        act_out: u64,
        act_inter: u64,
    }
    let shapes: BTreeMap<&str, LayerShape> = ids[..distinct]
        .iter()
        .map(|&id| {
            let s = LayerShape {
                fwd: rng.gen_range(1e-3..1e-2),
                params: rng.gen_range(100_000..2_000_000),
                act_out: rng.gen_range(100_000..4_000_000),
                act_inter: rng.gen_range(1_000_000..20_000_000),
            };
            (id, s)
        })
        .collect();

    let mut gpu_types = Vec::new();
    let mut tps: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    let mut speed: BTreeMap<&str, f64> = BTreeMap::new();
    let full_model: u64 = layers
        .iter()
        .map(|l| {
            let s = &shapes[l.id.as_str()];
            l.repeat as u64 * ((s.params as f64 * mul * dts as f64) as u64 + s.act_out + s.act_inter)
        })
        .sum();
    for &name in &type_names[..ntypes] {
        let gpus_per_node = rng.gen_range(1..=2u32);
        let frac = rng.gen_range(shape.mem_fraction.0..shape.mem_fraction.1);
        gpu_types.push(GpuTypeSpec {
            name: name.into(),
            mem_bytes: ((full_model as f64 * frac) as u64).max(1),
            gpus_per_node,
            price_per_gpu_hour: rng.gen_range(0.5..4.0),
        });
        let t = if gpus_per_node == 2 && rng.gen_bool(0.7) { vec![1, 2] } else { vec![1] };
        tps.insert(name, t);
        speed.insert(name, rng.gen_range(1.0..3.0));
    }

    let mut store = ProfileStore::new();
    for g in &gpu_types {
        let name = g.name.as_str();
        for &tp in &tps[name] {
            for &m in &mbs_set {
                if rng.gen_bool(shape.missing_rate) {
                    continue;
                }
                for (&id, s) in &shapes {
                    let t_fwd = s.fwd * m as f64 / tp as f64 * (1.0 + 0.1 * (tp - 1) as f64) * speed[name];
                    let rec = ProfileRecord {
                        t_fwd,
                        t_bwd: 2.0 * t_fwd,
                        t_update: s.params as f64 * 1e-9 * speed[name],
                        params: s.params.div_ceil(tp as u64),
                        act_out_bytes: s.act_out * m as u64,
                        act_intermediate_bytes: (s.act_inter * m as u64).div_ceil(tp as u64),
                    };
                    store.insert(id, name, tp, m, rec).expect("fresh key");
                }
            }
        }
    }

    // one zone per region, sometimes two in the first region
    let mut zones = Vec::new();
    for &r in &region_names[..nregions] {
        zones.push(Zone { name: format!("{r}-1"), region: r.into() });
    }
    if rng.gen_bool(0.3) {
        zones.push(Zone { name: format!("{}-2", region_names[0]), region: region_names[0].into() });
    }
    let mut availability = BTreeMap::new();
    let mut budget = rng.gen_range(1..=shape.max_nodes);
    let mut slots: Vec<(String, String)> = Vec::new();
    for g in &gpu_types {
        for z in &zones {
            slots.push((g.name.clone(), z.name.clone()));
        }
    }
    slots.shuffle(&mut rng);
    for (i, slot) in slots.iter().enumerate() {
        let n = if i + 1 == slots.len() { budget.min(3) } else { rng.gen_range(0..=budget.min(3)) };
        budget -= n;
        availability.insert(slot.clone(), n);
    }

    let mut links = BTreeMap::new();
    let nic: BTreeMap<&str, f64> = gpu_types.iter().map(|g| (g.name.as_str(), rng.gen_range(1e9..2e10))).collect();
    let wan = rng.gen_range(1e8..2e9);
    for a in &gpu_types {
        let intra_node = nic[a.name.as_str()] * rng.gen_range(1.0..10.0);
        links.insert(
            LinkKey { src: a.name.clone(), dst: a.name.clone(), locality: Locality::IntraNode },
            BandwidthModel::constant(intra_node),
        );
        for b in &gpu_types {
            let lan = nic[a.name.as_str()].min(nic[b.name.as_str()]);
            links.insert(
                LinkKey { src: a.name.clone(), dst: b.name.clone(), locality: Locality::IntraZone },
                BandwidthModel::constant(lan),
            );
            links.insert(
                LinkKey { src: a.name.clone(), dst: b.name.clone(), locality: Locality::InterRegion },
                BandwidthModel::constant(lan.min(wan)),
            );
        }
    }
    let mut egress = BTreeMap::new();
    if nregions == 2 {
        let p = rng.gen_range(1e-11..1e-9);
        egress.insert((region_names[0].to_string(), region_names[1].to_string()), p);
        if rng.gen_bool(0.5) {
            egress.insert((region_names[1].to_string(), region_names[0].to_string()), p * rng.gen_range(0.5..2.0));
        }
    }

    let job = JobSpec::new("random", layers, gbs, 128, dts, mul, mbs_set).expect("valid job");
    let cluster = ClusterSpec::new(gpu_types, zones, availability, links, egress).expect("valid cluster");
    Instance { seed, job, store, cluster }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_respect_caps() {
        for seed in 0..200 {
            let inst = random_instance(seed);
            assert!(inst.cluster.region_pool().total_nodes() <= 8);
            assert!(inst.job.num_layers() <= 4);
            assert!(inst.cluster.gpu_types().len() <= 2);
            assert!(inst.cluster.regions().len() <= 2);
            inst.store.check_consistency().unwrap();
        }
    }

    #[test]
    fn same_seed_same_instance() {
        let (a, b) = (random_instance(9), random_instance(9));
        assert_eq!(a.job, b.job);
        assert_eq!(a.store, b.store);
        assert_eq!(a.cluster, b.cluster);
    }
}
