//! Core vocabulary shared by every module: jobs, GPU types, clusters,
//! resource pools, parallelization plans and search requests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::profiles::BandwidthModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("insufficient resources for {gpu_type}@{region}: have {available}, need {requested}")]
    InsufficientResources {
        gpu_type: String,
        region: String,
        available: u32,
        requested: u32,
    },
}

/// A layer of the model together with how many times it repeats back to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRef {
    pub id: String,
    pub repeat: u32,
}

/// Model and training description. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    model_name: String,
    layers: Vec<LayerRef>,
    global_batch_size: u32,
    sequence_length: u32,
    data_type_size: u32,
    optimizer_mul_factor: f64,
    allowed_microbatch_sizes: Vec<u32>,
    // flattened layer index -> position in `layers`
    flat: Vec<usize>,
}

impl JobSpec {
    pub fn new(
        model_name: impl Into<String>,
        layers: Vec<LayerRef>,
        global_batch_size: u32,
        sequence_length: u32,
        data_type_size: u32,
        optimizer_mul_factor: f64,
        mut allowed_microbatch_sizes: Vec<u32>,
    ) -> Result<Self, DomainError> {
        if global_batch_size == 0 {
            return Err(DomainError::InvalidJob("global batch size must be >= 1".into()));
        }
        if sequence_length == 0 {
            return Err(DomainError::InvalidJob("sequence length must be >= 1".into()));
        }
        if data_type_size == 0 {
            return Err(DomainError::InvalidJob("data type size must be >= 1".into()));
        }
        if !(optimizer_mul_factor.is_finite() && optimizer_mul_factor > 0.0) {
            return Err(DomainError::InvalidJob("mul_factor must be a positive number".into()));
        }
        if allowed_microbatch_sizes.iter().any(|&m| m == 0) {
            return Err(DomainError::InvalidJob("microbatch sizes must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &layers {
            if !seen.insert(l.id.as_str()) {
                return Err(DomainError::InvalidJob(format!("duplicate layer id {:?}", l.id)));
            }
            if l.repeat == 0 {
                return Err(DomainError::InvalidJob(format!("layer {:?} has repeat 0", l.id)));
            }
        }
        let flat: Vec<usize> = layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat(i).take(l.repeat as usize))
            .collect();
        if flat.is_empty() {
            return Err(DomainError::InvalidJob("model has no layers".into()));
        }
        allowed_microbatch_sizes.sort_unstable();
        allowed_microbatch_sizes.dedup();
        Ok(Self {
            model_name: model_name.into(),
            layers,
            global_batch_size,
            sequence_length,
            data_type_size,
            optimizer_mul_factor,
            allowed_microbatch_sizes,
            flat,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn layers(&self) -> &[LayerRef] {
        &self.layers
    }

    pub fn global_batch_size(&self) -> u32 {
        self.global_batch_size
    }

    pub fn sequence_length(&self) -> u32 {
        self.sequence_length
    }

    pub fn data_type_size(&self) -> u32 {
        self.data_type_size
    }

    pub fn optimizer_mul_factor(&self) -> f64 {
        self.optimizer_mul_factor
    }

    pub fn allowed_microbatch_sizes(&self) -> &[u32] {
        &self.allowed_microbatch_sizes
    }

    /// Total number of layers once repeats are expanded.
    pub fn num_layers(&self) -> usize {
        self.flat.len()
    }

    /// Layer id at a flattened position.
    pub fn layer_id_at(&self, index: usize) -> &str {
        &self.layers[self.flat[index]].id
    }

    /// Microbatches per pipeline, if `D * mbs` divides the global batch.
    pub fn num_microbatches(&self, dp_degree: u32, mbs: u32) -> Option<u32> {
        let per_step = dp_degree.checked_mul(mbs)?;
        if per_step == 0 || self.global_batch_size % per_step != 0 {
            return None;
        }
        Some(self.global_batch_size / per_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuTypeSpec {
    pub name: String,
    pub mem_bytes: u64,
    pub gpus_per_node: u32,
    pub price_per_gpu_hour: f64,
}

impl GpuTypeSpec {
    /// Replicas of tensor-parallel degree `tp` one node can host (0 when the
    /// TP group is wider than the node).
    pub fn replicas_per_node(&self, tp: u32) -> u32 {
        if tp == 0 {
            0
        } else {
            self.gpus_per_node / tp
        }
    }

    /// Nodes needed to host `count` replicas of degree `tp` for one stage.
    /// Replicas of different stages never share a node.
    pub fn nodes_for(&self, count: u32, tp: u32) -> u32 {
        if count == 0 {
            return 0;
        }
        let per_node = self.replicas_per_node(tp);
        if per_node > 0 {
            count.div_ceil(per_node)
        } else {
            // cross-node TP group (only reachable with H1 disabled)
            count * tp.div_ceil(self.gpus_per_node)
        }
    }

    pub fn price_per_gpu_second(&self) -> f64 {
        self.price_per_gpu_hour / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub region: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Locality {
    IntraNode,
    IntraZone,
    IntraRegion,
    InterRegion,
}

impl Locality {
    fn fallbacks(self) -> &'static [Locality] {
        use Locality::*;
        match self {
            IntraNode => &[IntraNode, IntraZone, IntraRegion],
            IntraZone => &[IntraZone, IntraRegion],
            IntraRegion => &[IntraRegion, IntraZone],
            InterRegion => &[InterRegion],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkKey {
    pub src: String,
    pub dst: String,
    pub locality: Locality,
}

/// GPU types, zones, availability, link bandwidths and egress prices.
///
/// Zones are kept for reporting; all planning happens at region granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    gpu_types: Vec<GpuTypeSpec>,
    zones: Vec<Zone>,
    regions: Vec<String>,
    availability: BTreeMap<(String, String), u32>,
    links: BTreeMap<LinkKey, BandwidthModel>,
    egress: BTreeMap<(String, String), f64>,
}

impl ClusterSpec {
    pub fn new(
        gpu_types: Vec<GpuTypeSpec>,
        zones: Vec<Zone>,
        availability: BTreeMap<(String, String), u32>,
        links: BTreeMap<LinkKey, BandwidthModel>,
        egress: BTreeMap<(String, String), f64>,
    ) -> Result<Self, DomainError> {
        let bad = |msg: String| Err(DomainError::InvalidCluster(msg));
        let mut names = BTreeSet::new();
        for g in &gpu_types {
            if g.name.is_empty() || !names.insert(g.name.as_str()) {
                return bad(format!("gpu type name {:?} is empty or duplicated", g.name));
            }
            if g.mem_bytes == 0 {
                return bad(format!("gpu type {} has zero memory", g.name));
            }
            if g.gpus_per_node == 0 {
                return bad(format!("gpu type {} has zero gpus per node", g.name));
            }
            if !(g.price_per_gpu_hour.is_finite() && g.price_per_gpu_hour >= 0.0) {
                return bad(format!("gpu type {} has an invalid price", g.name));
            }
        }
        let mut zone_names = BTreeSet::new();
        for z in &zones {
            if !zone_names.insert(z.name.as_str()) {
                return bad(format!("duplicate zone {:?}", z.name));
            }
        }
        let regions: Vec<String> = zones
            .iter()
            .map(|z| z.region.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for (gpu, zone) in availability.keys() {
            if !names.contains(gpu.as_str()) {
                return bad(format!("availability references unknown gpu type {gpu:?}"));
            }
            if !zone_names.contains(zone.as_str()) {
                return bad(format!("availability references unknown zone {zone:?}"));
            }
        }
        for key in links.keys() {
            if !names.contains(key.src.as_str()) || !names.contains(key.dst.as_str()) {
                return bad(format!("link {}->{} references an unknown gpu type", key.src, key.dst));
            }
        }
        for ((src, dst), price) in &egress {
            if !regions.contains(src) || !regions.contains(dst) {
                return bad(format!("egress price {src}->{dst} references an unknown region"));
            }
            if !(price.is_finite() && *price >= 0.0) {
                return bad(format!("egress price {src}->{dst} is invalid"));
            }
        }
        let spec = Self { gpu_types, zones, regions, availability, links, egress };
        for a in &spec.gpu_types {
            for b in &spec.gpu_types {
                if spec.link(&a.name, &b.name, Locality::IntraZone).is_none() {
                    return bad(format!("no intra-zone link between {} and {}", a.name, b.name));
                }
                if spec.regions.len() > 1
                    && spec.link(&a.name, &b.name, Locality::InterRegion).is_none()
                {
                    return bad(format!("no inter-region link between {} and {}", a.name, b.name));
                }
            }
        }
        Ok(spec)
    }

    pub fn gpu_types(&self) -> &[GpuTypeSpec] {
        &self.gpu_types
    }

    pub fn gpu_type(&self, name: &str) -> Option<&GpuTypeSpec> {
        self.gpu_types.iter().find(|g| g.name == name)
    }

    pub fn gpu_index(&self, name: &str) -> Option<usize> {
        self.gpu_types.iter().position(|g| g.name == name)
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    /// Region names, sorted.
    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    pub fn region_of_zone(&self, zone: &str) -> Option<&str> {
        self.zones.iter().find(|z| z.name == zone).map(|z| z.region.as_str())
    }

    /// Zone-level availability, keyed by (gpu type, zone).
    pub fn availability(&self) -> &BTreeMap<(String, String), u32> {
        &self.availability
    }

    pub fn links(&self) -> &BTreeMap<LinkKey, BandwidthModel> {
        &self.links
    }

    /// Explicitly configured egress prices.
    pub fn egress_entries(&self) -> &BTreeMap<(String, String), f64> {
        &self.egress
    }

    /// Copy of this cluster with one zone-level availability count replaced.
    pub fn with_availability(
        &self,
        gpu_type: &str,
        zone: &str,
        nodes: u32,
    ) -> Result<Self, DomainError> {
        if self.gpu_type(gpu_type).is_none() {
            return Err(DomainError::InvalidCluster(format!("unknown gpu type {gpu_type:?}")));
        }
        if self.region_of_zone(zone).is_none() {
            return Err(DomainError::InvalidCluster(format!("unknown zone {zone:?}")));
        }
        let mut next = self.clone();
        next.availability.insert((gpu_type.to_string(), zone.to_string()), nodes);
        Ok(next)
    }

    /// Bandwidth model for a link, falling back to the reverse direction and
    /// to equivalent localities (intra-zone and intra-region are treated alike).
    pub fn link(&self, src: &str, dst: &str, locality: Locality) -> Option<&BandwidthModel> {
        // linear scans: the link table is tiny and this avoids allocating keys
        for &loc in locality.fallbacks() {
            for (a, b) in [(src, dst), (dst, src)] {
                let hit = self.links.iter().find(|(k, _)| k.locality == loc && k.src == a && k.dst == b);
                if let Some((_, m)) = hit {
                    return Some(m);
                }
            }
        }
        None
    }

    /// Price per byte sent from `src` to `dst`. Symmetric unless both
    /// directions are configured; zero when unconfigured.
    pub fn egress_price(&self, src: &str, dst: &str) -> f64 {
        let find = |a: &str, b: &str| self.egress.iter().find(|((s, d), _)| s == a && d == b).map(|(_, &p)| p);
        find(src, dst).or_else(|| find(dst, src)).unwrap_or(0.0)
    }

    /// Node counts per (gpu type, region) with all zones of a region merged.
    pub fn region_pool(&self) -> ResourcePool {
        let mut pool = ResourcePool::default();
        for g in &self.gpu_types {
            for r in &self.regions {
                pool.set(&g.name, r, 0);
            }
        }
        for ((gpu, zone), &nodes) in &self.availability {
            let region = self.region_of_zone(zone).expect("validated zone");
            let cur = pool.get(gpu, region);
            pool.set(gpu, region, cur + nodes);
        }
        pool
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolKey {
    pub gpu_type: String,
    pub region: String,
}

/// Node counts per (gpu type, region).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResourcePool {
    counts: BTreeMap<PoolKey, u32>,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    gpu_type: String,
    region: String,
    nodes: u32,
}

impl Serialize for ResourcePool {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<PoolEntry> = self
            .counts
            .iter()
            .map(|(k, &n)| PoolEntry { gpu_type: k.gpu_type.clone(), region: k.region.clone(), nodes: n })
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResourcePool {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<PoolEntry>::deserialize(d)?;
        let mut pool = ResourcePool::default();
        for e in entries {
            pool.set(&e.gpu_type, &e.region, e.nodes);
        }
        Ok(pool)
    }
}

impl FromIterator<(PoolKey, u32)> for ResourcePool {
    fn from_iter<I: IntoIterator<Item = (PoolKey, u32)>>(iter: I) -> Self {
        Self { counts: iter.into_iter().collect() }
    }
}

impl ResourcePool {
    pub fn get(&self, gpu_type: &str, region: &str) -> u32 {
        self.counts
            .get(&PoolKey { gpu_type: gpu_type.to_string(), region: region.to_string() })
            .copied()
            .unwrap_or(0)
    }

    pub fn set(&mut self, gpu_type: &str, region: &str, nodes: u32) {
        self.counts
            .insert(PoolKey { gpu_type: gpu_type.to_string(), region: region.to_string() }, nodes);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PoolKey, u32)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    pub fn total_nodes(&self) -> u32 {
        self.counts.values().sum()
    }

    /// Componentwise `demand <= self`.
    pub fn covers(&self, demand: &ResourcePool) -> bool {
        demand.iter().all(|(k, n)| n <= self.get(&k.gpu_type, &k.region))
    }

    /// Componentwise difference; errors instead of going negative.
    pub fn subtract(&self, demand: &ResourcePool) -> Result<ResourcePool, DomainError> {
        let mut out = self.clone();
        for (k, n) in demand.iter() {
            let have = self.get(&k.gpu_type, &k.region);
            if n > have {
                return Err(DomainError::InsufficientResources {
                    gpu_type: k.gpu_type.clone(),
                    region: k.region.clone(),
                    available: have,
                    requested: n,
                });
            }
            if n > 0 || self.counts.contains_key(k) {
                out.counts.insert(k.clone(), have - n);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ResourcePool) -> ResourcePool {
        let mut out = self.clone();
        for (k, n) in other.iter() {
            *out.counts.entry(k.clone()).or_insert(0) += n;
        }
        out
    }

    /// Componentwise minimum with `cap`; keys absent from `cap` drop to zero.
    /// The flag reports whether anything was reduced.
    pub fn clip_to(&self, cap: &ResourcePool) -> (ResourcePool, bool) {
        let mut clipped = false;
        let counts = self
            .counts
            .iter()
            .map(|(k, &n)| {
                let limit = cap.get(&k.gpu_type, &k.region);
                if n > limit {
                    clipped = true;
                }
                (k.clone(), n.min(limit))
            })
            .collect();
        (ResourcePool { counts }, clipped)
    }
}

/// `pool - demand`, failing with `InsufficientResources` on any shortfall.
pub fn pool_subtract(pool: &ResourcePool, demand: &ResourcePool) -> Result<ResourcePool, DomainError> {
    pool.subtract(demand)
}

/// One data-parallel replica of a stage: a TP group on a single node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Replica {
    pub gpu_type: String,
    pub tp: u32,
    /// Optional zone pin; must lie in the stage's region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<String>,
}

impl Replica {
    pub fn new(gpu_type: impl Into<String>, tp: u32) -> Self {
        Self { gpu_type: gpu_type.into(), tp, zone: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageAssignment {
    pub first_layer: usize,
    pub layer_count: usize,
    pub region: String,
    pub replicas: Vec<Replica>,
}

impl StageAssignment {
    pub fn layer_range(&self) -> std::ops::Range<usize> {
        self.first_layer..self.first_layer + self.layer_count
    }

    /// Replica counts grouped by (gpu type, tp), in sorted order.
    pub fn classes(&self) -> BTreeMap<(&str, u32), u32> {
        let mut out = BTreeMap::new();
        for r in &self.replicas {
            *out.entry((r.gpu_type.as_str(), r.tp)).or_insert(0) += 1;
        }
        out
    }
}

/// Pipeline stages with their replica assignments and the microbatch size.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Plan {
    pub stages: Vec<StageAssignment>,
    pub mbs: u32,
    pub dp_degree: u32,
}

impl Plan {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Nodes claimed per (gpu type, region). Unknown gpu types are skipped.
    pub fn node_demand(&self, cluster: &ClusterSpec) -> ResourcePool {
        let mut pool = ResourcePool::default();
        for stage in &self.stages {
            for ((gpu, tp), count) in stage.classes() {
                let Some(spec) = cluster.gpu_type(gpu) else { continue };
                let cur = pool.get(gpu, &stage.region);
                pool.set(gpu, &stage.region, cur + spec.nodes_for(count, tp));
            }
        }
        pool
    }

    /// GPUs on the nodes the plan claims.
    pub fn allocated_gpus(&self, cluster: &ClusterSpec) -> u32 {
        self.node_demand(cluster)
            .iter()
            .map(|(k, n)| n * cluster.gpu_type(&k.gpu_type).map_or(0, |g| g.gpus_per_node))
            .sum()
    }

    pub fn regions(&self) -> BTreeSet<&str> {
        self.stages.iter().map(|s| s.region.as_str()).collect()
    }

    /// Sorts replicas inside each stage so equal plans compare equal.
    pub fn canonicalize(&mut self) {
        for s in &mut self.stages {
            s.replicas.sort();
        }
    }
}

/// Worker identity: (stage, replica, tp rank), ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId {
    pub stage: usize,
    pub replica: usize,
    pub tp_rank: u32,
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.stage, self.replica, self.tp_rank)
    }
}

impl FromStr for WorkerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let [stage, replica, rank] = parts.as_slice() else {
            return Err(format!("worker id {s:?} is not stage/replica/rank"));
        };
        let num = |p: &str| p.parse::<usize>().map_err(|e| format!("worker id {s:?}: {e}"));
        Ok(WorkerId { stage: num(stage)?, replica: num(replica)?, tp_rank: num(rank)? as u32 })
    }
}

impl Serialize for WorkerId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WorkerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    MaxThroughput,
    #[serde(alias = "min-cost")]
    MinCostPerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Constraint {
    /// Maximum cost per iteration.
    Budget(f64),
    /// Minimum iterations per second.
    MinThroughput(f64),
}

impl Constraint {
    pub fn admits(&self, t_iter: f64, c_iter: f64) -> bool {
        match *self {
            Constraint::Budget(c) => c_iter <= c,
            Constraint::MinThroughput(floor) => 1.0 / t_iter >= floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub objective: Objective,
    #[serde(default)]
    pub constraint: Option<Constraint>,
    /// Maximum claimable nodes; defaults to everything available.
    #[serde(default)]
    pub quotas: Option<ResourcePool>,
}

impl SearchRequest {
    pub fn new(objective: Objective) -> Self {
        Self { objective, constraint: None, quotas: None }
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = Some(constraint);
        self
    }

    pub fn with_quotas(mut self, quotas: ResourcePool) -> Self {
        self.quotas = Some(quotas);
        self
    }

    /// Quotas clipped to the cluster's region-level availability.
    pub fn effective_pool(&self, cluster: &ClusterSpec) -> ResourcePool {
        let available = cluster.region_pool();
        match &self.quotas {
            None => available,
            Some(q) => {
                let (pool, clipped) = q.clip_to(&available);
                if clipped {
                    log::warn!("quotas exceed cluster availability; clipping");
                }
                pool
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("plan has no stages")]
    NoStages,
    #[error("data parallel degree must be >= 1")]
    ZeroDpDegree,
    #[error("microbatch size must be >= 1")]
    ZeroMicrobatch,
    #[error("stage {stage} has no layers")]
    EmptyStage { stage: usize },
    #[error("stage {stage} starts at layer {found}, expected {expected} (layer ranges not contiguous)")]
    LayerGap { stage: usize, expected: usize, found: usize },
    #[error("stages cover {covered} of {total} layers")]
    LayerCoverage { covered: usize, total: usize },
    #[error("stage {stage} has {found} replicas, expected {expected}")]
    ReplicaCount { stage: usize, expected: u32, found: usize },
    #[error("stage {stage} replica {replica}: tensor parallel degree 0")]
    ZeroTp { stage: usize, replica: usize },
    #[error("stage {stage} replica {replica}: TP exceeds node width (tp {tp} > {gpus_per_node} gpus per node)")]
    TpExceedsNodeWidth { stage: usize, replica: usize, tp: u32, gpus_per_node: u32 },
    #[error("stage {stage} replica {replica}: unknown gpu type {name:?}")]
    UnknownGpuType { stage: usize, replica: usize, name: String },
    #[error("stage {stage}: unknown region {region:?}")]
    UnknownRegion { stage: usize, region: String },
    #[error("stage {stage} replica {replica}: unknown zone {zone:?}")]
    UnknownZone { stage: usize, replica: usize, zone: String },
    #[error("stage crosses region: stage {stage} is in {stage_region} but replica {replica} is pinned to zone {zone} in {zone_region}")]
    StageCrossesRegion {
        stage: usize,
        replica: usize,
        zone: String,
        zone_region: String,
        stage_region: String,
    },
    #[error("global batch {gbs} is not divisible by D*mbs = {dp}*{mbs}")]
    BatchNotDivisible { gbs: u32, dp: u32, mbs: u32 },
    #[error("plan needs {demand} {gpu_type} nodes in {region}, only {available} available")]
    InsufficientNodes { gpu_type: String, region: String, demand: u32, available: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct ValidateOptions<'a> {
    /// Check node demand against this pool instead of full availability.
    pub pool: Option<&'a ResourcePool>,
    /// Accept TP groups wider than a node (heuristic ablations only).
    pub allow_cross_node_tp: bool,
}

/// Structural checks of a plan against a job and cluster. An empty result
/// means the plan is well formed and fits the available nodes.
pub fn validate_plan(plan: &Plan, job: &JobSpec, cluster: &ClusterSpec) -> Vec<Violation> {
    validate_plan_with(plan, job, cluster, &ValidateOptions::default())
}

pub fn validate_plan_with(
    plan: &Plan,
    job: &JobSpec,
    cluster: &ClusterSpec,
    opts: &ValidateOptions<'_>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if plan.stages.is_empty() {
        out.push(Violation::NoStages);
    }
    if plan.dp_degree == 0 {
        out.push(Violation::ZeroDpDegree);
    }
    if plan.mbs == 0 {
        out.push(Violation::ZeroMicrobatch);
    }
    if plan.dp_degree > 0 && plan.mbs > 0 && job.num_microbatches(plan.dp_degree, plan.mbs).is_none() {
        out.push(Violation::BatchNotDivisible {
            gbs: job.global_batch_size(),
            dp: plan.dp_degree,
            mbs: plan.mbs,
        });
    }

    let mut next_layer = 0;
    for (i, stage) in plan.stages.iter().enumerate() {
        if stage.layer_count == 0 {
            out.push(Violation::EmptyStage { stage: i });
        }
        if stage.first_layer != next_layer {
            out.push(Violation::LayerGap { stage: i, expected: next_layer, found: stage.first_layer });
        }
        next_layer = stage.first_layer + stage.layer_count;

        if stage.replicas.len() != plan.dp_degree as usize {
            out.push(Violation::ReplicaCount {
                stage: i,
                expected: plan.dp_degree,
                found: stage.replicas.len(),
            });
        }
        let region_known = cluster.region_index(&stage.region).is_some();
        if !region_known {
            out.push(Violation::UnknownRegion { stage: i, region: stage.region.clone() });
        }
        for (j, rep) in stage.replicas.iter().enumerate() {
            match cluster.gpu_type(&rep.gpu_type) {
                None => out.push(Violation::UnknownGpuType {
                    stage: i,
                    replica: j,
                    name: rep.gpu_type.clone(),
                }),
                Some(g) => {
                    if rep.tp == 0 {
                        out.push(Violation::ZeroTp { stage: i, replica: j });
                    } else if rep.tp > g.gpus_per_node && !opts.allow_cross_node_tp {
                        out.push(Violation::TpExceedsNodeWidth {
                            stage: i,
                            replica: j,
                            tp: rep.tp,
                            gpus_per_node: g.gpus_per_node,
                        });
                    }
                }
            }
            if let Some(zone) = &rep.zone {
                match cluster.region_of_zone(zone) {
                    None => out.push(Violation::UnknownZone { stage: i, replica: j, zone: zone.clone() }),
                    Some(zr) if region_known && zr != stage.region => {
                        out.push(Violation::StageCrossesRegion {
                            stage: i,
                            replica: j,
                            zone: zone.clone(),
                            zone_region: zr.to_string(),
                            stage_region: stage.region.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
    }
    if next_layer != job.num_layers() {
        out.push(Violation::LayerCoverage { covered: next_layer, total: job.num_layers() });
    }

    let available;
    let pool = match opts.pool {
        Some(p) => p,
        None => {
            available = cluster.region_pool();
            &available
        }
    };
    for (k, demand) in plan.node_demand(cluster).iter() {
        let have = pool.get(&k.gpu_type, &k.region);
        if demand > have {
            out.push(Violation::InsufficientNodes {
                gpu_type: k.gpu_type.clone(),
                region: k.region.clone(),
                demand,
                available: have,
            });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn pool(entries: &[(&str, &str, u32)]) -> ResourcePool {
        entries
            .iter()
            .map(|&(g, r, n)| (PoolKey { gpu_type: g.into(), region: r.into() }, n))
            .collect()
    }

    pub(crate) fn toy_cluster(types: &[(&str, u32)], zones: &[(&str, &str)], avail: &[(&str, &str, u32)]) -> ClusterSpec {
        let gpu_types = types
            .iter()
            .map(|&(n, g)| GpuTypeSpec {
                name: n.into(),
                mem_bytes: 16 << 30,
                gpus_per_node: g,
                price_per_gpu_hour: 1.0,
            })
            .collect();
        let zones = zones.iter().map(|&(z, r)| Zone { name: z.into(), region: r.into() }).collect();
        let availability = avail.iter().map(|&(g, z, n)| ((g.to_string(), z.to_string()), n)).collect();
        let mut links = BTreeMap::new();
        for &(a, _) in types {
            for &(b, _) in types {
                for loc in [Locality::IntraZone, Locality::InterRegion] {
                    links.insert(
                        LinkKey { src: a.into(), dst: b.into(), locality: loc },
                        BandwidthModel::constant(1e9),
                    );
                }
            }
        }
        ClusterSpec::new(gpu_types, zones, availability, links, BTreeMap::new()).unwrap()
    }

    fn job(layers: u32) -> JobSpec {
        JobSpec::new("toy", vec![LayerRef { id: "l".into(), repeat: layers }], 8, 16, 2, 8.0, vec![1])
            .unwrap()
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
    fn pool_subtract_examples() {
        let p = pool(&[("A", "us", 4)]);
        assert_eq!(pool_subtract(&p, &pool(&[("A", "us", 4)])).unwrap(), pool(&[("A", "us", 0)]));

        let p = pool(&[("A", "us", 4), ("V", "us", 2)]);
        assert_eq!(
            pool_subtract(&p, &pool(&[("V", "us", 1)])).unwrap(),
            pool(&[("A", "us", 4), ("V", "us", 1)])
        );

        let err = pool_subtract(&pool(&[("A", "us", 1)]), &pool(&[("A", "us", 2)])).unwrap_err();
        assert!(matches!(err, DomainError::InsufficientResources { available: 1, requested: 2, .. }));
    }

    #[test]
    fn tp_wider_than_node_is_flagged() {
        let cluster = toy_cluster(&[("A", 4)], &[("z", "us")], &[("A", "z", 4)]);
        let plan = Plan { stages: vec![stage(0, 2, "us", &[("A", 8)])], mbs: 1, dp_degree: 1 };
        let v = validate_plan(&plan, &job(2), &cluster);
        assert!(v.iter().any(|v| matches!(v, Violation::TpExceedsNodeWidth { tp: 8, .. })));
        assert!(v.iter().any(|v| v.to_string().contains("TP exceeds node width")));
    }

    #[test]
    fn replica_in_another_region_is_flagged() {
        let cluster = toy_cluster(
            &[("A", 1)],
            &[("us-a", "us"), ("eu-a", "eu")],
            &[("A", "us-a", 2), ("A", "eu-a", 2)],
        );
        let mut st = stage(0, 2, "us", &[("A", 1), ("A", 1)]);
        st.replicas[0].zone = Some("us-a".into());
        st.replicas[1].zone = Some("eu-a".into());
        let plan = Plan { stages: vec![st], mbs: 1, dp_degree: 2 };
        let v = validate_plan(&plan, &job(2), &cluster);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].to_string().contains("stage crosses region"));
    }

    #[test]
    fn minimal_two_stage_plan_is_valid() {
        let cluster = toy_cluster(&[("A", 1)], &[("z", "us")], &[("A", "z", 2)]);
        let plan = Plan {
            stages: vec![stage(0, 1, "us", &[("A", 1)]), stage(1, 1, "us", &[("A", 1)])],
            mbs: 1,
            dp_degree: 1,
        };
        assert!(validate_plan(&plan, &job(2), &cluster).is_empty());
    }

    #[test]
    fn structural_violations() {
        let cluster = toy_cluster(&[("A", 2)], &[("z", "us")], &[("A", "z", 1)]);
        let plan = Plan {
            stages: vec![stage(0, 1, "us", &[("A", 1)]), stage(2, 1, "mars", &[("A", 1), ("B", 1)])],
            mbs: 3,
            dp_degree: 1,
        };
        let v = validate_plan(&plan, &job(4), &cluster);
        assert!(v.iter().any(|v| matches!(v, Violation::BatchNotDivisible { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::LayerGap { stage: 1, .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::ReplicaCount { stage: 1, .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::UnknownRegion { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::UnknownGpuType { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::LayerCoverage { covered: 3, total: 4 })));
    }

    #[test]
    fn node_packing_per_stage() {
        // 4-GPU nodes, tp=2: two replicas per node; stages never share nodes.
        let cluster = toy_cluster(&[("A", 4)], &[("z", "us")], &[("A", "z", 2)]);
        let plan = Plan {
            stages: vec![stage(0, 1, "us", &[("A", 2), ("A", 2)]), stage(1, 1, "us", &[("A", 2), ("A", 2)])],
            mbs: 1,
            dp_degree: 2,
        };
        assert_eq!(plan.node_demand(&cluster).get("A", "us"), 2);
        assert!(validate_plan(&plan, &JobSpec::new("t", vec![LayerRef { id: "x".into(), repeat: 2 }], 8, 1, 2, 1.0, vec![1]).unwrap(), &cluster).is_empty());

        let tight = toy_cluster(&[("A", 4)], &[("z", "us")], &[("A", "z", 1)]);
        let v = validate_plan(&plan, &job(2), &tight);
        assert!(v.iter().any(|v| matches!(v, Violation::InsufficientNodes { demand: 2, available: 1, .. })));
    }

    #[test]
    fn zones_collapse_into_regions() {
        let cluster = toy_cluster(
            &[("A", 1)],
            &[("us-a", "us"), ("us-b", "us"), ("eu-a", "eu")],
            &[("A", "us-a", 2), ("A", "us-b", 3), ("A", "eu-a", 1)],
        );
        let p = cluster.region_pool();
        assert_eq!(p.get("A", "us"), 5);
        assert_eq!(p.get("A", "eu"), 1);
    }

    #[test]
    fn egress_is_symmetric_unless_overridden() {
        let mut egress = BTreeMap::new();
        egress.insert(("us".to_string(), "eu".to_string()), 2.0);
        let base = toy_cluster(&[("A", 1)], &[("a", "us"), ("b", "eu")], &[]);
        let c = ClusterSpec::new(
            base.gpu_types().to_vec(),
            base.zones().to_vec(),
            BTreeMap::new(),
            base.links().clone(),
            egress.clone(),
        )
        .unwrap();
        assert_eq!(c.egress_price("eu", "us"), 2.0);
        assert_eq!(c.egress_price("us", "us"), 0.0);
        egress.insert(("eu".to_string(), "us".to_string()), 5.0);
        let c = ClusterSpec::new(base.gpu_types().to_vec(), base.zones().to_vec(), BTreeMap::new(), base.links().clone(), egress)
            .unwrap();
        assert_eq!(c.egress_price("eu", "us"), 5.0);
        assert_eq!(c.egress_price("us", "eu"), 2.0);
    }

    #[test]
    fn worker_id_round_trips_as_string() {
        let w = WorkerId { stage: 3, replica: 1, tp_rank: 2 };
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, "\"3/1/2\"");
        assert_eq!(serde_json::from_str::<WorkerId>(&s).unwrap(), w);
    }

    proptest! {
        #[test]
        fn subtract_then_add_is_identity(
            a in 0u32..50, b in 0u32..50, da in 0u32..50, db in 0u32..50,
        ) {
            let p = pool(&[("A", "us", a), ("V", "eu", b)]);
            let d = pool(&[("A", "us", da.min(a)), ("V", "eu", db.min(b))]);
            let rest = p.subtract(&d).unwrap();
            prop_assert_eq!(rest.add(&d), p);
        }
    }
}
