//! Availability traces: timed changes to the node count of one GPU type in
//! one zone.

use std::path::Path;

use hetplan_core::domain::ClusterSpec;
use hetplan_core::profiles::{parse_json, read_file};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Seconds since the start of the trace.
    pub t: f64,
    pub gpu_type: String,
    pub zone: String,
    /// New absolute node count.
    pub nodes: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityTrace {
    pub events: Vec<TraceEvent>,
}

impl AvailabilityTrace {
    /// Times must be finite and non-decreasing, and every event must name a
    /// GPU type and zone of `cluster`.
    pub fn check(&self, cluster: &ClusterSpec) -> Result<(), CliError> {
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            let bad = |m: String| Err(CliError::validation(format!("trace event {i}: {m}")));
            if !e.t.is_finite() || e.t < 0.0 {
                return bad(format!("time {} must be finite and non-negative", e.t));
            }
            if e.t < last {
                return bad(format!("time {} goes backwards (previous {last})", e.t));
            }
            if cluster.gpu_type(&e.gpu_type).is_none() {
                return bad(format!("unknown gpu type {:?}", e.gpu_type));
            }
            if cluster.region_of_zone(&e.zone).is_none() {
                return bad(format!("unknown zone {:?}", e.zone));
            }
            last = e.t;
        }
        Ok(())
    }
}

pub fn load_trace(path: &Path) -> Result<AvailabilityTrace, CliError> {
    Ok(parse_json(&read_file(path)?)?)
}

/// Random walk of one GPU type's node counts in the given zones, starting
/// from the cluster's availability. Each event moves one zone by 1 to 3
/// nodes, staying within `0..=ceiling` where the ceiling is the zone's
/// starting count.
pub fn synthetic_trace(
    cluster: &ClusterSpec,
    gpu_type: &str,
    zones: &[String],
    events: usize,
    seed: u64,
) -> Result<AvailabilityTrace, CliError> {
    if cluster.gpu_type(gpu_type).is_none() {
        return Err(CliError::validation(format!("unknown gpu type {gpu_type:?}")));
    }
    let mut counts: Vec<u32> = Vec::with_capacity(zones.len());
    for z in zones {
        if cluster.region_of_zone(z).is_none() {
            return Err(CliError::validation(format!("unknown zone {z:?}")));
        }
        counts.push(cluster.availability().get(&(gpu_type.to_string(), z.clone())).copied().unwrap_or(0));
    }
    let ceilings = counts.clone();
    if zones.is_empty() || ceilings.iter().all(|&c| c == 0) {
        return Err(CliError::validation(format!("no {gpu_type} nodes in the chosen zones")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(events);
    while out.len() < events {
        let z = rng.gen_range(0..zones.len());
        if ceilings[z] == 0 {
            continue;
        }
        let step = rng.gen_range(1..=3u32);
        let up = if counts[z] == 0 {
            true
        } else if counts[z] == ceilings[z] {
            false
        } else {
            rng.gen_bool(0.5)
        };
        counts[z] = if up { (counts[z] + step).min(ceilings[z]) } else { counts[z].saturating_sub(step) };
        t += rng.gen_range(60.0..900.0_f64).round();
        out.push(TraceEvent { t, gpu_type: gpu_type.to_string(), zone: zones[z].clone(), nodes: counts[z] });
    }
    Ok(AvailabilityTrace { events: out })
}
