//! Synthetic transformer profiles and clusters for tests and demos.
//!
//! Costs follow simple analytic curves: forward time grows with `mbs / tp`
//! plus a per-rank TP overhead and is scaled by a per-GPU-class speed factor.
//! The shapes are plausible, not calibrated against real hardware.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_bandwidth, BandwidthSample, ProfileError, ProfileRecord, ProfileStore, DEFAULT_DEGREE};
use crate::domain::{ClusterSpec, GpuTypeSpec, JobSpec, LayerRef, LinkKey, Locality, Zone};

const GIB: u64 = 1 << 30;
const LAYER_ID: &str = "transformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuClass {
    pub name: String,
    pub mem_bytes: u64,
    pub gpus_per_node: u32,
    pub price_per_gpu_hour: f64,
    /// Multiplier on compute time; 2.0 means twice as slow as the reference.
    pub speed_factor: f64,
    /// Per-node network bandwidth inside a zone, bytes/s.
    pub nic_bytes_per_sec: f64,
    /// Intra-node (GPU to GPU) bandwidth, bytes/s.
    pub intra_node_bytes_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub name: String,
    pub region: String,
    /// Nodes available per GPU class.
    pub nodes: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model_name: String,
    pub hidden: u64,
    pub heads: u64,
    pub num_layers: u32,
    pub seq_len: u32,
    pub global_batch_size: u32,
    pub data_type_size: u32,
    pub mul_factor: f64,
    pub mbs: Vec<u32>,
    pub tp: Vec<u32>,
    /// Relative extra time per additional TP rank.
    pub tp_overhead: f64,
    /// Half-width of the multiplicative jitter applied per (tp, mbs).
    pub jitter: f64,
    pub seed: u64,
    pub classes: Vec<GpuClass>,
    pub zones: Vec<ZoneSpec>,
    pub inter_region_bytes_per_sec: f64,
    pub inter_region_latency: f64,
    pub intra_zone_latency: f64,
    pub egress_price_per_byte: f64,
}

fn a100() -> GpuClass {
    GpuClass {
        name: "A100-40".into(),
        mem_bytes: 40 * GIB,
        gpus_per_node: 4,
        price_per_gpu_hour: 3.67,
        speed_factor: 1.0,
        nic_bytes_per_sec: 12.5e9,
        intra_node_bytes_per_sec: 150e9,
    }
}

fn v100() -> GpuClass {
    GpuClass {
        name: "V100-16".into(),
        mem_bytes: 16 * GIB,
        gpus_per_node: 4,
        price_per_gpu_hour: 2.48,
        speed_factor: 2.5,
        nic_bytes_per_sec: 4e9,
        intra_node_bytes_per_sec: 50e9,
    }
}

fn zone(name: &str, region: &str, nodes: &[(&str, u32)]) -> ZoneSpec {
    ZoneSpec {
        name: name.into(),
        region: region.into(),
        nodes: nodes.iter().map(|&(g, n)| (g.to_string(), n)).collect(),
    }
}

impl SyntheticSpec {
    /// Named presets: `opt350-like` (24 layers) and `gptneo-like` (32 layers).
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let (hidden, heads, layers) = match name {
            "opt350-like" => (1024, 16, 24),
            "gptneo-like" => (2560, 20, 32),
            _ => return None,
        };
        Some(Self {
            model_name: name.to_string(),
            hidden,
            heads,
            num_layers: layers,
            seq_len: 2048,
            global_batch_size: 2048,
            data_type_size: 2,
            mul_factor: 8.0,
            mbs: vec![1, 2, 4, 8],
            tp: vec![1, 2, 4, 8],
            tp_overhead: 0.08,
            jitter: 0.03,
            seed,
            classes: vec![a100(), v100()],
            zones: vec![
                zone("us-central-a", "us-central", &[("A100-40", 8), ("V100-16", 4)]),
                zone("us-central-b", "us-central", &[("A100-40", 4), ("V100-16", 8)]),
                zone("us-west-a", "us-west", &[("A100-40", 4), ("V100-16", 4)]),
            ],
            inter_region_bytes_per_sec: 1.25e9,
            inter_region_latency: 5e-3,
            intra_zone_latency: 20e-6,
            egress_price_per_byte: 2e-11,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["opt350-like", "gptneo-like"]
    }

    fn check(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Consistency(format!("synthetic spec: {m}")));
        if self.hidden == 0 || self.heads == 0 || self.num_layers == 0 || self.seq_len == 0 {
            return bad("model dimensions must be positive");
        }
        if self.mbs.is_empty() || self.tp.is_empty() || self.mbs.contains(&0) || self.tp.contains(&0) {
            return bad("mbs and tp grids must be non-empty and positive");
        }
        if self.classes.is_empty() {
            return bad("at least one GPU class is required");
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !self.classes.iter().all(|c| {
            positive(c.speed_factor) && positive(c.nic_bytes_per_sec) && positive(c.intra_node_bytes_per_sec)
        }) {
            return bad("speed factors and bandwidths must be positive");
        }
        if !positive(self.inter_region_bytes_per_sec) || !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return bad("inter-region bandwidth must be positive and jitter in [0, 1)");
        }
        Ok(())
    }
}

fn link_samples(bytes_per_sec: f64, latency: f64) -> Vec<BandwidthSample> {
    (22..=34)
        .map(|e| {
            let b = 1u64 << e;
            BandwidthSample { bytes: b, seconds: latency + b as f64 / bytes_per_sec }
        })
        .collect()
}

/// Deterministic (job, profiles, cluster) triple for a spec.
pub fn gen_synthetic_profile(spec: &SyntheticSpec) -> Result<(JobSpec, ProfileStore, ClusterSpec), ProfileError> {
    spec.check()?;
    let h = spec.hidden;
    let seq = spec.seq_len as u64;
    let dts = spec.data_type_size as u64;
    let params1 = 12 * h * h + 13 * h;

    // jitter is drawn per (tp, mbs) and shared by all classes so that
    // time ratios between classes equal their speed-factor ratios
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = BTreeMap::new();
    for &tp in &spec.tp {
        for &mbs in &spec.mbs {
            let j = if spec.jitter > 0.0 { rng.gen_range(1.0 - spec.jitter..=1.0 + spec.jitter) } else { 1.0 };
            jitter.insert((tp, mbs), j);
        }
    }

    let mut store = ProfileStore::new();
    for class in &spec.classes {
        for &tp in &spec.tp {
            let params = params1.div_ceil(tp as u64);
            let base = (2.0 * params1 as f64 * seq as f64 + 4.0 * (seq * seq * h) as f64) / 1e14;
            for &mbs in &spec.mbs {
                let m = mbs as u64;
                let t_fwd = base * mbs as f64 / tp as f64
                    * (1.0 + spec.tp_overhead * (tp - 1) as f64)
                    * jitter[&(tp, mbs)]
                    * class.speed_factor;
                let act_inter = m * seq * h * (10 + 24 / tp as u64) + 5 * spec.heads * seq * seq * m / tp as u64;
                let rec = ProfileRecord {
                    t_fwd,
                    t_bwd: 2.0 * t_fwd,
                    t_update: params as f64 * 1.2e-11 * class.speed_factor,
                    params,
                    act_out_bytes: m * seq * h * dts,
                    act_intermediate_bytes: act_inter,
                };
                store.insert(LAYER_ID, &class.name, tp, mbs, rec)?;
            }
        }
    }
    store.check_consistency()?;

    let job = JobSpec::new(
        spec.model_name.clone(),
        vec![LayerRef { id: LAYER_ID.into(), repeat: spec.num_layers }],
        spec.global_batch_size,
        spec.seq_len,
        spec.data_type_size,
        spec.mul_factor,
        spec.mbs.clone(),
    )?;

    let gpu_types = spec
        .classes
        .iter()
        .map(|c| GpuTypeSpec {
            name: c.name.clone(),
            mem_bytes: c.mem_bytes,
            gpus_per_node: c.gpus_per_node,
            price_per_gpu_hour: c.price_per_gpu_hour,
        })
        .collect();
    let zones: Vec<Zone> =
        spec.zones.iter().map(|z| Zone { name: z.name.clone(), region: z.region.clone() }).collect();
    let mut availability = BTreeMap::new();
    for z in &spec.zones {
        for (g, &n) in &z.nodes {
            availability.insert((g.clone(), z.name.clone()), n);
        }
    }

    let mut links = BTreeMap::new();
    let mut fit = |src: &str, dst: &str, locality: Locality, bw: f64, latency: f64| -> Result<(), ProfileError> {
        let model = fit_bandwidth(&link_samples(bw, latency), DEFAULT_DEGREE)?.model;
        links.insert(LinkKey { src: src.into(), dst: dst.into(), locality }, model);
        Ok(())
    };
    for (i, a) in spec.classes.iter().enumerate() {
        fit(&a.name, &a.name, Locality::IntraNode, a.intra_node_bytes_per_sec, 5e-6)?;
        for b in &spec.classes[i..] {
            let nic = a.nic_bytes_per_sec.min(b.nic_bytes_per_sec);
            fit(&a.name, &b.name, Locality::IntraZone, nic, spec.intra_zone_latency)?;
            let wan = nic.min(spec.inter_region_bytes_per_sec);
            fit(&a.name, &b.name, Locality::InterRegion, wan, spec.inter_region_latency)?;
        }
    }

    let regions: Vec<&str> = {
        let mut r: Vec<&str> = spec.zones.iter().map(|z| z.region.as_str()).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let mut egress = BTreeMap::new();
    for a in &regions {
        for b in &regions {
            let p = if a == b { 0.0 } else { spec.egress_price_per_byte };
            egress.insert((a.to_string(), b.to_string()), p);
        }
    }

    let cluster = ClusterSpec::new(gpu_types, zones, availability, links, egress)?;
    Ok((job, store, cluster))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{load_cluster, load_job_profile, save_cluster, save_job_profile};

    #[test]
    fn speed_factor_ratio_is_exact() {
        let mut spec = SyntheticSpec::preset("opt350-like", 7).unwrap();
        spec.classes[1].speed_factor = 2.0;
        let (_, store, _) = gen_synthetic_profile(&spec).unwrap();
        for &tp in &spec.tp {
            for &mbs in &spec.mbs {
                let a = store.lookup(LAYER_ID, "A100-40", tp, mbs).unwrap();
                let v = store.lookup(LAYER_ID, "V100-16", tp, mbs).unwrap();
                assert_eq!(v.t_fwd / a.t_fwd, 2.0);
            }
        }
    }

    #[test]
    fn params_constant_across_mbs() {
        let spec = SyntheticSpec::preset("gptneo-like", 1).unwrap();
        let (_, store, _) = gen_synthetic_profile(&spec).unwrap();
        for &tp in &spec.tp {
            let p: Vec<u64> = spec.mbs.iter().map(|&m| store.lookup(LAYER_ID, "A100-40", tp, m).unwrap().params).collect();
            assert!(p.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec::preset("opt350-like", 42).unwrap();
        let a = gen_synthetic_profile(&spec).unwrap();
        let b = gen_synthetic_profile(&spec).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let other = gen_synthetic_profile(&SyntheticSpec::preset("opt350-like", 43).unwrap()).unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn emitted_files_reload_identically() {
        let spec = SyntheticSpec::preset("opt350-like", 3).unwrap();
        let (job, store, cluster) = gen_synthetic_profile(&spec).unwrap();
        assert_eq!(job.num_layers(), 24);
        let job_json = save_job_profile(&job, &store).to_string();
        let (job2, store2) = load_job_profile(&job_json).unwrap();
        assert_eq!((&job, &store), (&job2, &store2));
        let cluster2 = load_cluster(&save_cluster(&cluster).to_string()).unwrap();
        assert_eq!(cluster, cluster2);
    }

    #[test]
    fn fitted_links_are_monotone_in_time() {
        let spec = SyntheticSpec::preset("opt350-like", 0).unwrap();
        let (_, _, cluster) = gen_synthetic_profile(&spec).unwrap();
        for model in cluster.links().values() {
            let times: Vec<f64> = (0..64).map(|i| model.comm_time(2f64.powf(12.0 + 22.0 * i as f64 / 63.0))).collect();
            assert!(times.windows(2).all(|w| w[1] >= w[0]), "{times:?}");
        }
    }
}
