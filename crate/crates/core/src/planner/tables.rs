//! Minimum-TP tables, layer partitions, resource combos and region choice.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::domain::{ClusterSpec, GpuTypeSpec, JobSpec, ResourcePool};
use crate::profiles::{ProfileError, ProfileStore};
use crate::simulator::{class_profile, memory_of};

/// Identifies one stage shape for one GPU type: layer range, microbatch
/// size and the number of microbatches it keeps in flight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TpKey {
    pub first_layer: usize,
    pub layer_count: usize,
    pub mbs: u32,
    pub gpu_type: String,
    pub in_flight: u64,
}

/// Which profiled TP degrees of a type fit a stage in memory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TpEntry {
    /// Fitting degrees, ascending. May include degrees wider than a node.
    pub fitting: Vec<u32>,
    pub any_oom: bool,
    pub any_missing: bool,
}

impl TpEntry {
    /// Smallest fitting degree that stays within one node.
    pub fn min_tp(&self, gpu: &GpuTypeSpec) -> Option<u32> {
        self.fitting.iter().copied().find(|&tp| tp <= gpu.gpus_per_node)
    }
}

/// Checks every profiled degree of `gpu` against the stage's peak memory.
pub fn compute_tp_entry(
    job: &JobSpec,
    store: &ProfileStore,
    gpu: &GpuTypeSpec,
    key: &TpKey,
) -> TpEntry {
    let mut entry = TpEntry::default();
    let range = key.first_layer..key.first_layer + key.layer_count;
    for tp in store.tp_degrees(&gpu.name) {
        match class_profile(job, store, range.clone(), &gpu.name, tp, key.mbs) {
            Ok(p) => {
                if memory_of(&p, key.in_flight, job).m_peak <= gpu.mem_bytes {
                    entry.fitting.push(tp);
                } else {
                    entry.any_oom = true;
                }
            }
            Err(ProfileError::MissingProfile { .. }) => entry.any_missing = true,
            Err(_) => entry.any_missing = true,
        }
    }
    entry
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TpCacheStats {
    pub entries: usize,
    pub computed: u64,
    pub hits: u64,
    /// Computations of a key that had been computed before.
    pub recomputed: u64,
}

/// Memory-fit tables shared across searches of one job on one set of GPU
/// types. Availability changes do not invalidate entries.
#[derive(Debug, Default)]
pub struct TpCache {
    inner: Mutex<CacheInner>,
}

#[derive(Debug, Default)]
struct CacheInner {
    entries: HashMap<TpKey, Arc<TpEntry>>,
    seen: HashSet<TpKey>,
    stats: TpCacheStats,
}

impl TpCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(&self, key: TpKey, compute: impl FnOnce(&TpKey) -> TpEntry) -> Arc<TpEntry> {
        {
            let mut inner = self.inner.lock().expect("tp cache poisoned");
            if let Some(e) = inner.entries.get(&key).cloned() {
                inner.stats.hits += 1;
                return e;
            }
        }
        // computed outside the lock; a concurrent duplicate is harmless
        let entry = Arc::new(compute(&key));
        let mut inner = self.inner.lock().expect("tp cache poisoned");
        if let Some(e) = inner.entries.get(&key).cloned() {
            inner.stats.hits += 1;
            return e;
        }
        inner.stats.computed += 1;
        if !inner.seen.insert(key.clone()) {
            inner.stats.recomputed += 1;
        }
        inner.entries.insert(key, entry.clone());
        entry
    }

    pub fn stats(&self) -> TpCacheStats {
        let inner = self.inner.lock().expect("tp cache poisoned");
        TpCacheStats { entries: inner.entries.len(), ..inner.stats }
    }

    /// Drops cached entries but remembers which keys were computed.
    pub fn clear(&self) {
        self.inner.lock().expect("tp cache poisoned").entries.clear();
    }
}

/// Minimum fitting TP per stage shape and GPU type (`None`: nothing fits).
pub type StageTpTable = BTreeMap<TpKey, Option<u32>>;

/// Builds the minimum-TP table for explicit partitions (stage sizes).
pub fn min_tp_table(
    job: &JobSpec,
    cluster: &ClusterSpec,
    store: &ProfileStore,
    partitions: &[Vec<usize>],
    mbs_set: &[u32],
) -> StageTpTable {
    let mut table = BTreeMap::new();
    for part in partitions {
        let p = part.len();
        let mut l0 = 0;
        for (i, &len) in part.iter().enumerate() {
            for &mbs in mbs_set {
                for gpu in cluster.gpu_types() {
                    let key = TpKey {
                        first_layer: l0,
                        layer_count: len,
                        mbs,
                        gpu_type: gpu.name.clone(),
                        in_flight: (p - i) as u64,
                    };
                    let entry = compute_tp_entry(job, store, gpu, &key);
                    table.insert(key, entry.min_tp(gpu));
                }
            }
            l0 += len;
        }
    }
    table
}

/// Allowed stage sizes for `n` layers over `p` stages with slack `k`.
pub fn stage_size_window(n: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = (n / p).saturating_sub(k).max(1);
    let hi = (n.div_ceil(p) + k).min(n);
    (lo, hi)
}

/// Contiguous partitions of the layers into `p` stages whose sizes stay
/// within `k` of the balanced split.
pub fn enumerate_partitions(job: &JobSpec, p: usize, k: usize) -> Vec<Vec<usize>> {
    let n = job.num_layers();
    if p == 0 || p > n {
        return Vec::new();
    }
    let (lo, hi) = stage_size_window(n, p, k);
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(p);
    fn rec(rest: usize, stages: usize, lo: usize, hi: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if stages == 0 {
            if rest == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for len in lo..=hi.min(rest) {
            let left = rest - len;
            if left < (stages - 1) * lo || left > (stages - 1) * hi {
                continue;
            }
            cur.push(len);
            rec(left, stages - 1, lo, hi, cur, out);
            cur.pop();
        }
    }
    rec(n, p, lo, hi, &mut cur, &mut out);
    out
}

/// Calls `f` with every way of splitting `total` into `parts` non-negative
/// counts, in lexicographically descending order of the first count.
pub(crate) fn for_each_split(total: u32, parts: usize, f: &mut impl FnMut(&[u32])) {
    fn rec(rest: u32, i: usize, buf: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
        if i + 1 == buf.len() {
            buf[i] = rest;
            f(buf);
            return;
        }
        for c in (0..=rest).rev() {
            buf[i] = c;
            rec(rest - c, i + 1, buf, f);
        }
    }
    if parts == 0 {
        return;
    }
    let mut buf = vec![0; parts];
    rec(total, 0, &mut buf, f);
}

/// All replica counts per GPU type summing to `d` whose node demand fits
/// the pool in `region`. Types mapped to `None` (no usable TP) are excluded.
pub fn generate_combos(
    pool: &ResourcePool,
    d: u32,
    stage_tp: &BTreeMap<String, Option<u32>>,
    region: &str,
    cluster: &ClusterSpec,
) -> Vec<BTreeMap<String, u32>> {
    let usable: Vec<(&GpuTypeSpec, u32)> = stage_tp
        .iter()
        .filter_map(|(name, tp)| {
            let gpu = cluster.gpu_type(name)?;
            let tp = (*tp)?;
            (gpu.replicas_per_node(tp) > 0).then_some((gpu, tp))
        })
        .collect();
    let mut out = Vec::new();
    if d == 0 {
        return out;
    }
    for_each_split(d, usable.len(), &mut |counts| {
        let fits = usable
            .iter()
            .zip(counts)
            .all(|((gpu, tp), &c)| gpu.nodes_for(c, *tp) <= pool.get(&gpu.name, region));
        if fits {
            out.push(
                usable.iter().zip(counts).filter(|(_, &c)| c > 0).map(|((g, _), &c)| (g.name.clone(), c)).collect(),
            );
        }
    });
    out
}

/// Regions in search order: `current` first, then by descending available
/// nodes, then by name.
pub fn region_order(pool: &ResourcePool, current: Option<&str>, cluster: &ClusterSpec) -> Vec<String> {
    let mut regions: Vec<(u32, &String)> = cluster
        .regions()
        .iter()
        .map(|r| (pool.iter().filter(|(k, _)| &k.region == r).map(|(_, n)| n).sum(), r))
        .collect();
    regions.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut out: Vec<String> = Vec::with_capacity(regions.len());
    if let Some(c) = current {
        if cluster.region_index(c).is_some() {
            out.push(c.to_string());
        }
    }
    out.extend(regions.into_iter().map(|(_, r)| r.clone()).filter(|r| Some(r.as_str()) != current));
    out
}

/// First region in [`region_order`] whose pool covers the combo's node
/// demand (`combo` maps gpu type to (replicas, tp)).
pub fn find_region_fits(
    combo: &BTreeMap<String, (u32, u32)>,
    current_region: Option<&str>,
    pool: &ResourcePool,
    cluster: &ClusterSpec,
) -> Option<String> {
    region_order(pool, current_region, cluster).into_iter().find(|r| {
        combo.iter().all(|(g, &(count, tp))| {
            cluster.gpu_type(g).is_some_and(|spec| spec.nodes_for(count, tp) <= pool.get(g, r))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::{pool, toy_cluster};
    use crate::domain::LayerRef;

    fn job(n: u32) -> JobSpec {
        JobSpec::new("t", vec![LayerRef { id: "l".into(), repeat: n }], 8, 1, 2, 1.0, vec![1]).unwrap()
    }

    #[test]
    fn partitions_examples() {
        assert_eq!(enumerate_partitions(&job(8), 4, 0), vec![vec![2, 2, 2, 2]]);
        assert_eq!(enumerate_partitions(&job(7), 2, 0), vec![vec![3, 4], vec![4, 3]]);
        assert_eq!(enumerate_partitions(&job(8), 2, 1), vec![vec![3, 5], vec![4, 4], vec![5, 3]]);
        assert!(enumerate_partitions(&job(2), 3, 1).is_empty());
    }

    #[test]
    fn combos_examples() {
        let c = toy_cluster(&[("A", 2)], &[("z", "us")], &[("A", "z", 1)]);
        let tp: BTreeMap<_, _> = [("A".to_string(), Some(1))].into();
        let combos = generate_combos(&c.region_pool(), 2, &tp, "us", &c);
        assert_eq!(combos, vec![BTreeMap::from([("A".to_string(), 2)])]);

        let c = toy_cluster(&[("A", 1), ("V", 1)], &[("z", "us")], &[("A", "z", 4), ("V", "z", 4)]);
        let tp: BTreeMap<_, _> = [("A".to_string(), Some(1)), ("V".to_string(), Some(1))].into();
        assert_eq!(generate_combos(&c.region_pool(), 2, &tp, "us", &c).len(), 3);

        let c = toy_cluster(&[("A", 4)], &[("z", "us")], &[("A", "z", 4)]);
        let tp: BTreeMap<_, _> = [("A".to_string(), Some(8))].into();
        assert!(generate_combos(&c.region_pool(), 1, &tp, "us", &c).is_empty());
    }

    #[test]
    fn region_fit_examples() {
        let c = toy_cluster(&[("A", 1)], &[("a", "us"), ("b", "eu")], &[("A", "a", 2), ("A", "b", 3)]);
        let combo = BTreeMap::from([("A".to_string(), (2, 1))]);
        let p = c.region_pool();
        assert_eq!(find_region_fits(&combo, Some("us"), &p, &c).as_deref(), Some("us"));
        let drained = pool(&[("A", "us", 0), ("A", "eu", 3)]);
        assert_eq!(find_region_fits(&combo, Some("us"), &drained, &c).as_deref(), Some("eu"));
        let empty = pool(&[("A", "us", 1), ("A", "eu", 1)]);
        assert_eq!(find_region_fits(&combo, Some("us"), &empty, &c), None);
        assert_eq!(region_order(&p, None, &c), vec!["eu".to_string(), "us".to_string()]);
    }

    #[test]
    fn splits_cover_all_compositions() {
        let mut seen = Vec::new();
        for_each_split(3, 2, &mut |c| seen.push(c.to_vec()));
        assert_eq!(seen, vec![vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]);
    }

    #[test]
    fn cache_counts_hits_and_never_recomputes() {
        let cache = TpCache::new();
        let key = TpKey { first_layer: 0, layer_count: 1, mbs: 1, gpu_type: "A".into(), in_flight: 1 };
        cache.get_or_compute(key.clone(), |_| TpEntry::default());
        cache.get_or_compute(key.clone(), |_| panic!("cached"));
        let s = cache.stats();
        assert_eq!((s.computed, s.hits, s.recomputed), (1, 1, 0));
        cache.clear();
        cache.get_or_compute(key, |_| TpEntry::default());
        assert_eq!(cache.stats().recomputed, 1);
    }
}
