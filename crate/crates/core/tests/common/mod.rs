#![allow(dead_code)]

use std::collections::BTreeMap;

use hetplan_core::domain::{ClusterSpec, GpuTypeSpec, JobSpec, LayerRef, LinkKey, Locality, Replica, StageAssignment, Zone};
use hetplan_core::profiles::{BandwidthModel, ProfileRecord};

pub const GIB: u64 = 1 << 30;

pub struct ToyCluster<'a> {
    /// (name, gpus per node, memory bytes, price per gpu hour)
    pub types: &'a [(&'a str, u32, u64, f64)],
    /// (zone, region)
    pub zones: &'a [(&'a str, &'a str)],
    /// (gpu type, zone, nodes)
    pub avail: &'a [(&'a str, &'a str, u32)],
    pub intra_bw: f64,
    pub inter_bw: f64,
    /// Price per byte between distinct regions, both directions.
    pub egress: f64,
}

impl ToyCluster<'_> {
    pub fn build(&self) -> ClusterSpec {
        let gpu_types = self
            .types
            .iter()
            .map(|&(n, g, mem, price)| GpuTypeSpec {
                name: n.into(),
                mem_bytes: mem,
                gpus_per_node: g,
                price_per_gpu_hour: price,
            })
            .collect();
        let zones = self.zones.iter().map(|&(z, r)| Zone { name: z.into(), region: r.into() }).collect();
        let availability = self.avail.iter().map(|&(g, z, n)| ((g.to_string(), z.to_string()), n)).collect();
        let mut links = BTreeMap::new();
        for &(a, ..) in self.types {
            for &(b, ..) in self.types {
                for (loc, bw) in [
                    (Locality::IntraNode, self.intra_bw),
                    (Locality::IntraZone, self.intra_bw),
                    (Locality::InterRegion, self.inter_bw),
                ] {
                    links.insert(LinkKey { src: a.into(), dst: b.into(), locality: loc }, BandwidthModel::constant(bw));
                }
            }
        }
        let mut regions: Vec<&str> = self.zones.iter().map(|z| z.1).collect();
        regions.sort();
        regions.dedup();
        let mut egress = BTreeMap::new();
        for &a in &regions {
            for &b in &regions {
                if a != b {
                    egress.insert((a.to_string(), b.to_string()), self.egress);
                }
            }
        }
        ClusterSpec::new(gpu_types, zones, availability, links, egress).unwrap()
    }
}

pub fn rec(t_fwd: f64, t_bwd: f64, t_update: f64, params: u64, act_mid: u64, act_out: u64) -> ProfileRecord {
    ProfileRecord { t_fwd, t_bwd, t_update, params, act_out_bytes: act_out, act_intermediate_bytes: act_mid }
}

pub fn uniform_job(layers: u32, gbs: u32, mbs: Vec<u32>) -> JobSpec {
    JobSpec::new("toy", vec![LayerRef { id: "l".into(), repeat: layers }], gbs, 16, 2, 8.0, mbs).unwrap()
}

pub fn stage(l0: usize, n: usize, region: &str, reps: &[(&str, u32)]) -> StageAssignment {
    StageAssignment {
        first_layer: l0,
        layer_count: n,
        region: region.into(),
        replicas: reps.iter().map(|&(g, tp)| Replica::new(g, tp)).collect(),
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}
