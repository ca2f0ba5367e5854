//! Job and cluster profiles: the per-layer compute/memory measurements and
//! link bandwidth curves everything else is computed from.

pub mod bandwidth;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClusterSpec, DomainError, GpuTypeSpec, JobSpec, LayerRef, LinkKey, Locality, Zone};

pub use bandwidth::{comm_time, fit_bandwidth, BandwidthFit, BandwidthModel, BandwidthSample, DEFAULT_DEGREE};
pub use synth::{gen_synthetic_profile, GpuClass, SyntheticSpec, ZoneSpec};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("inconsistent profile: {0}")]
    Consistency(String),
    #[error("no profile for layer {layer:?} on {gpu_type} at tp={tp}, mbs={mbs}")]
    MissingProfile { layer: String, gpu_type: String, tp: u32, mbs: u32 },
    #[error("degenerate bandwidth fit: {0}")]
    DegenerateFit(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Measurements for one layer at one (gpu type, tp, mbs) point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_update: f64,
    /// Parameters held by one TP rank.
    pub params: u64,
    /// Output activation per microbatch (one full tensor).
    pub act_out_bytes: u64,
    /// Stored intermediate activations per microbatch.
    pub act_intermediate_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerProfile {
    pub layer_id: String,
    // gpu type -> (tp, mbs) -> record
    records: BTreeMap<String, BTreeMap<(u32, u32), ProfileRecord>>,
}

impl LayerProfile {
    pub fn new(layer_id: impl Into<String>) -> Self {
        Self { layer_id: layer_id.into(), records: BTreeMap::new() }
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, u32, u32, &ProfileRecord)> {
        self.records
            .iter()
            .flat_map(|(g, m)| m.iter().map(move |(&(tp, mbs), r)| (g.as_str(), tp, mbs, r)))
    }
}

/// Per-layer profiles keyed by layer id. Identical repeated layers share one
/// entry. Immutable after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileStore {
    layers: BTreeMap<String, LayerProfile>,
}

impl ProfileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        layer: &str,
        gpu_type: &str,
        tp: u32,
        mbs: u32,
        record: ProfileRecord,
    ) -> Result<(), ProfileError> {
        let lp = self.layers.entry(layer.to_string()).or_insert_with(|| LayerProfile::new(layer));
        let slot = lp.records.entry(gpu_type.to_string()).or_default();
        if slot.insert((tp, mbs), record).is_some() {
            return Err(ProfileError::Consistency(format!(
                "duplicate record for layer {layer:?} on {gpu_type} tp={tp} mbs={mbs}"
            )));
        }
        Ok(())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerProfile> {
        self.layers.get(id)
    }

    pub fn record_count(&self) -> usize {
        self.layers.values().map(|l| l.records().count()).sum()
    }

    /// Exact-match lookup; never interpolates.
    pub fn lookup(&self, layer: &str, gpu_type: &str, tp: u32, mbs: u32) -> Result<&ProfileRecord, ProfileError> {
        self.layers
            .get(layer)
            .and_then(|l| l.records.get(gpu_type))
            .and_then(|m| m.get(&(tp, mbs)))
            .ok_or_else(|| ProfileError::MissingProfile {
                layer: layer.to_string(),
                gpu_type: gpu_type.to_string(),
                tp,
                mbs,
            })
    }

    /// Every tp degree profiled for `gpu_type` on any layer.
    pub fn tp_degrees(&self, gpu_type: &str) -> BTreeSet<u32> {
        self.layers
            .values()
            .filter_map(|l| l.records.get(gpu_type))
            .flat_map(|m| m.keys().map(|&(tp, _)| tp))
            .collect()
    }

    pub fn microbatch_sizes(&self) -> BTreeSet<u32> {
        self.layers.values().flat_map(|l| l.records().map(|(_, _, mbs, _)| mbs)).collect()
    }

    /// Non-negative times, and parameter counts consistent with TP sharding.
    pub fn check_consistency(&self) -> Result<(), ProfileError> {
        for lp in self.layers.values() {
            let mut full_params: Option<u64> = None;
            for (gpu, tp, mbs, r) in lp.records() {
                if tp == 0 || mbs == 0 {
                    return Err(ProfileError::Consistency(format!(
                        "layer {:?} on {gpu}: tp and mbs must be >= 1",
                        lp.layer_id
                    )));
                }
                for (name, t) in [("t_fwd", r.t_fwd), ("t_bwd", r.t_bwd), ("t_update", r.t_update)] {
                    if !(t.is_finite() && t >= 0.0) {
                        return Err(ProfileError::Consistency(format!(
                            "layer {:?} on {gpu} tp={tp} mbs={mbs}: {name} = {t} must be >= 0",
                            lp.layer_id
                        )));
                    }
                }
                if tp == 1 {
                    match full_params {
                        None => full_params = Some(r.params),
                        Some(p) if p != r.params => {
                            return Err(ProfileError::Consistency(format!(
                                "layer {:?}: tp=1 records disagree on params ({p} vs {})",
                                lp.layer_id, r.params
                            )))
                        }
                        Some(_) => {}
                    }
                }
            }
            if let Some(p) = full_params {
                for (gpu, tp, mbs, r) in lp.records() {
                    let want = p.div_ceil(tp as u64);
                    if r.params != want {
                        return Err(ProfileError::Consistency(format!(
                            "layer {:?} on {gpu} tp={tp} mbs={mbs}: params {} but sharding gives {want}",
                            lp.layer_id, r.params
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exact-match record lookup; absence is an error, never a default.
pub fn lookup_layer<'a>(
    store: &'a ProfileStore,
    layer: &str,
    gpu_type: &str,
    tp: u32,
    mbs: u32,
) -> Result<&'a ProfileRecord, ProfileError> {
    store.lookup(layer, gpu_type, tp, mbs)
}

// ---- file formats ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JobFile {
    model: String,
    gbs: u32,
    seq_len: u32,
    data_type_size: u32,
    mul_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    allowed_mbs: Option<Vec<u32>>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerFile {
    id: String,
    repeat: u32,
    records: Vec<RecordFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordFile {
    gpu_type: String,
    tp: u32,
    mbs: u32,
    #[serde(flatten)]
    record: ProfileRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterFile {
    gpu_types: Vec<GpuTypeSpec>,
    zones: Vec<Zone>,
    #[serde(default)]
    availability: Vec<AvailabilityEntry>,
    #[serde(default)]
    links: Vec<LinkFile>,
    #[serde(default)]
    egress: Vec<EgressEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AvailabilityEntry {
    gpu_type: String,
    zone: String,
    nodes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LinkFile {
    src: String,
    dst: String,
    locality: Locality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<Vec<BandwidthSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coefficients: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    valid_range: Option<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EgressEntry {
    src_region: String,
    dst_region: String,
    price_per_byte: f64,
}

/// Deserializes with JSON-path aware errors: syntax problems become
/// `Parse`, shape problems become `Schema` with the offending field path.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, ProfileError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => {
                ProfileError::Schema { path, message: inner.to_string() }
            }
            _ => ProfileError::Parse {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            },
        }
    })?;
    de.end().map_err(|e| ProfileError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    Ok(value)
}

pub fn read_file(path: &Path) -> Result<String, ProfileError> {
    std::fs::read_to_string(path)
        .map_err(|source| ProfileError::Io { path: path.display().to_string(), source })
}

/// Parses a job profile document into the job description and its store.
pub fn load_job_profile(text: &str) -> Result<(JobSpec, ProfileStore), ProfileError> {
    let file: JobFile = parse_json(text)?;
    let mut store = ProfileStore::new();
    let mut layers = Vec::with_capacity(file.layers.len());
    for lf in &file.layers {
        layers.push(LayerRef { id: lf.id.clone(), repeat: lf.repeat });
        store.layers.entry(lf.id.clone()).or_insert_with(|| LayerProfile::new(lf.id.clone()));
        for r in &lf.records {
            store.insert(&lf.id, &r.gpu_type, r.tp, r.mbs, r.record)?;
        }
    }
    store.check_consistency()?;
    let mbs = match &file.allowed_mbs {
        Some(m) => m.clone(),
        None => store.microbatch_sizes().into_iter().collect(),
    };
    let job = JobSpec::new(
        file.model.clone(),
        layers,
        file.gbs,
        file.seq_len,
        file.data_type_size,
        file.mul_factor,
        mbs,
    )
    .map_err(|e| ProfileError::Consistency(e.to_string()))?;
    Ok((job, store))
}

pub fn load_job_profile_file(path: &Path) -> Result<(JobSpec, ProfileStore), ProfileError> {
    load_job_profile(&read_file(path)?)
}

pub fn save_job_profile(job: &JobSpec, store: &ProfileStore) -> serde_json::Value {
    let layers = job
        .layers()
        .iter()
        .map(|l| LayerFile {
            id: l.id.clone(),
            repeat: l.repeat,
            records: store
                .layer(&l.id)
                .map(|lp| {
                    lp.records()
                        .map(|(g, tp, mbs, r)| RecordFile { gpu_type: g.to_string(), tp, mbs, record: *r })
                        .collect()
                })
                .unwrap_or_default(),
        })
        .collect();
    let file = JobFile {
        model: job.model_name().to_string(),
        gbs: job.global_batch_size(),
        seq_len: job.sequence_length(),
        data_type_size: job.data_type_size(),
        mul_factor: job.optimizer_mul_factor(),
        allowed_mbs: Some(job.allowed_microbatch_sizes().to_vec()),
        layers,
    };
    serde_json::to_value(file).expect("job profile serializes")
}

/// Parses a cluster description. Links given as samples are fitted with
/// their `degree` (default [`DEFAULT_DEGREE`]).
pub fn load_cluster(text: &str) -> Result<ClusterSpec, ProfileError> {
    let file: ClusterFile = parse_json(text)?;
    let availability = file.availability.iter().map(|a| ((a.gpu_type.clone(), a.zone.clone()), a.nodes)).collect();
    let mut links = BTreeMap::new();
    for (i, l) in file.links.iter().enumerate() {
        let model = match (&l.samples, &l.coefficients) {
            (Some(samples), None) => fit_bandwidth(samples, l.degree.unwrap_or(DEFAULT_DEGREE))?.model,
            (None, Some(coeffs)) => {
                let range = l.valid_range.ok_or_else(|| ProfileError::Schema {
                    path: format!("links[{i}].valid_range"),
                    message: "required with coefficients".into(),
                })?;
                BandwidthModel::new(coeffs.clone(), range)?
            }
            _ => {
                return Err(ProfileError::Schema {
                    path: format!("links[{i}]"),
                    message: "exactly one of samples or coefficients is required".into(),
                })
            }
        };
        let key = LinkKey { src: l.src.clone(), dst: l.dst.clone(), locality: l.locality };
        if links.insert(key, model).is_some() {
            return Err(ProfileError::Consistency(format!(
                "duplicate link {}->{} ({:?})",
                l.src, l.dst, l.locality
            )));
        }
    }
    let egress = file
        .egress
        .iter()
        .map(|e| ((e.src_region.clone(), e.dst_region.clone()), e.price_per_byte))
        .collect();
    ClusterSpec::new(file.gpu_types, file.zones, availability, links, egress)
        .map_err(|e| ProfileError::Consistency(e.to_string()))
}

pub fn load_cluster_file(path: &Path) -> Result<ClusterSpec, ProfileError> {
    load_cluster(&read_file(path)?)
}

pub fn save_cluster(cluster: &ClusterSpec) -> serde_json::Value {
    let file = ClusterFile {
        gpu_types: cluster.gpu_types().to_vec(),
        zones: cluster.zones().to_vec(),
        availability: cluster
            .availability()
            .iter()
            .map(|((g, z), &n)| AvailabilityEntry { gpu_type: g.clone(), zone: z.clone(), nodes: n })
            .collect(),
        links: cluster
            .links()
            .iter()
            .map(|(k, m)| LinkFile {
                src: k.src.clone(),
                dst: k.dst.clone(),
                locality: k.locality,
                samples: None,
                degree: None,
                coefficients: Some(m.coefficients().to_vec()),
                valid_range: Some(m.valid_range()),
            })
            .collect(),
        egress: cluster
            .egress_entries()
            .iter()
            .map(|((s, d), &p)| EgressEntry { src_region: s.clone(), dst_region: d.clone(), price_per_byte: p })
            .collect(),
    };
    serde_json::to_value(file).expect("cluster serializes")
}
