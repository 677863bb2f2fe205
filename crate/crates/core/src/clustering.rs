//! Bottom-up average-linkage agglomerative clustering and the node spaces
//! it produces.
//!
//! Distance is 1 − cosine similarity. Clusters merge while the smallest
//! average linkage is ≤ the threshold; ties break on the lexicographically
//! smallest (min id, max id) pair, where a cluster's id is its smallest
//! member index, so runs are reproducible. Tasks are never clustered: the
//! task level gets one node per task.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::embeddings::{cosine_sim, normalize, write_features, FeatureKind, Level, TextStore};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.09;

/// Merge clusters until no pair's average-linkage distance is ≤ `threshold`.
/// Returns one cluster id per input, dense 0..count, numbered by ascending
/// smallest member index.
pub fn agglomerate(vecs: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>> {
    if vecs.is_empty() {
        return Err(Error::Config("agglomerate on empty input".into()));
    }
    if threshold < 0.0 {
        return Err(Error::Config(format!("negative clustering threshold {threshold}")));
    }
    let n = vecs.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine_sim(&vecs[i], &vecs[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut member_of = (0..n).collect::<Vec<usize>>();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                let d = dist[i * n + j];
                // strict improvement only: ascending (i, j) scan makes the
                // first of equal-distance pairs the lexicographic minimum
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > threshold {
            break;
        }
        // cluster a (the smaller id) absorbs b; average linkage updates via
        // d(k, a∪b) = (|a| d(k,a) + |b| d(k,b)) / (|a| + |b|)
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let merged = (sa * dist[k * n + a] + sb * dist[k * n + b]) / (sa + sb);
            dist[k * n + a] = merged;
            dist[a * n + k] = merged;
        }
        size[a] += size[b];
        active[b] = false;
        for m in member_of.iter_mut() {
            if *m == b {
                *m = a;
            }
        }
    }
    let mut remap = BTreeMap::new();
    for i in 0..n {
        if active[i] {
            let next = remap.len();
            remap.insert(i, next);
        }
    }
    Ok(member_of.iter().map(|m| remap[m]).collect())
}

/// Clustered semantic nodes for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpace {
    pub level: Level,
    pub node_count: usize,
    /// text id → node id (total over the level's texts).
    pub member_map: BTreeMap<u64, usize>,
    /// node id → unit-norm centroid in the 512-d match space.
    pub centroids: Vec<Vec<f64>>,
}

impl NodeSpace {
    pub fn node_of(&self, text_id: u64) -> Option<usize> {
        self.member_map.get(&text_id).copied()
    }

    /// Text ids belonging to `node`, ascending.
    pub fn members(&self, node: usize) -> Vec<u64> {
        self.member_map
            .iter()
            .filter(|(_, &n)| n == node)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Cluster one level's texts into a node space. Tasks map one-to-one; other
/// levels agglomerate on the 768-d cluster vectors. Centroids are the
/// renormalized means of member 512-d match vectors.
pub fn build_node_space(level: Level, texts: &TextStore, threshold: f64) -> Result<NodeSpace> {
    if texts.level() != level {
        return Err(Error::Config(format!(
            "store level {} does not match requested {}",
            texts.level().as_str(),
            level.as_str()
        )));
    }
    if texts.is_empty() {
        return Err(Error::MissingData(format!(
            "no texts to cluster at level {}",
            level.as_str()
        )));
    }
    let ids = texts.ids();
    let assignment = if level == Level::Task {
        (0..ids.len()).collect::<Vec<usize>>()
    } else {
        let vecs: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| texts.get(*id).unwrap().cluster_vec.clone())
            .collect();
        agglomerate(&vecs, threshold)?
    };
    let node_count = assignment.iter().copied().max().unwrap() + 1;
    let mut member_map = BTreeMap::new();
    let dim = texts.get(ids[0]).unwrap().match_vec.len();
    let mut sums = vec![vec![0.0f64; dim]; node_count];
    let mut counts = vec![0usize; node_count];
    for (idx, id) in ids.iter().enumerate() {
        let node = assignment[idx];
        member_map.insert(*id, node);
        let mv = &texts.get(*id).unwrap().match_vec;
        for (s, v) in sums[node].iter_mut().zip(mv) {
            *s += v;
        }
        counts[node] += 1;
    }
    let mut centroids = Vec::with_capacity(node_count);
    for (node, mut sum) in sums.into_iter().enumerate() {
        for v in &mut sum {
            *v /= counts[node] as f64;
        }
        normalize(&mut sum).map_err(|_| {
            Error::Numeric(format!(
                "node {node} at level {} has zero-mean members",
                level.as_str()
            ))
        })?;
        centroids.push(sum);
    }
    Ok(NodeSpace { level, node_count, member_map, centroids })
}

#[derive(Serialize, Deserialize)]
struct SpaceHeader {
    level: String,
    node_count: usize,
}

#[derive(Serialize, Deserialize)]
struct MemberRecord {
    text: u64,
    node: usize,
}

fn members_path(base: &Path) -> PathBuf {
    with_suffix(base, "nodes.jsonl")
}

fn centroids_path(base: &Path) -> PathBuf {
    with_suffix(base, "centroids.tssfeat")
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    base.with_file_name(name)
}

impl NodeSpace {
    /// Write `<base>.nodes.jsonl` and `<base>.centroids.tssfeat`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut body = serde_json::to_string(&SpaceHeader {
            level: self.level.as_str().to_string(),
            node_count: self.node_count,
        })
        .expect("header serializes");
        body.push('\n');
        for (text, node) in &self.member_map {
            body.push_str(
                &serde_json::to_string(&MemberRecord { text: *text, node: *node })
                    .expect("record serializes"),
            );
            body.push('\n');
        }
        write_atomic(&members_path(base), body.as_bytes())?;
        let ids: Vec<serde_json::Value> = (0..self.node_count)
            .map(|n| serde_json::json!({"node": n}))
            .collect();
        let dim = self.centroids.first().map_or(0, Vec::len);
        write_features(
            &centroids_path(base),
            FeatureKind::Centroid,
            dim,
            &self.centroids,
            &ids,
        )
    }

    pub fn load(base: &Path) -> Result<Self> {
        let mpath = members_path(base);
        let body = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut lines = body.lines().enumerate();
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| Error::parse(&mpath, 1, "empty node-space file"))?;
        let header: SpaceHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::parse(&mpath, 1, e.to_string()))?;
        let level = Level::parse(&header.level)?;
        let mut member_map = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: MemberRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(&mpath, i + 1, e.to_string()))?;
            if rec.node >= header.node_count {
                return Err(Error::parse(
                    &mpath,
                    i + 1,
                    format!("node id {} out of range", rec.node),
                ));
            }
            member_map.insert(rec.text, rec.node);
        }
        let cpath = centroids_path(base);
        let (kind, _dim, centroids, _ids) = crate::embeddings::read_features(&cpath)?;
        if kind != FeatureKind::Centroid {
            return Err(Error::Integrity(format!(
                "{}: expected centroid features",
                cpath.display()
            )));
        }
        if centroids.len() != header.node_count {
            return Err(Error::Integrity(format!(
                "{}: {} centroids for {} nodes",
                cpath.display(),
                centroids.len(),
                header.node_count
            )));
        }
        Ok(NodeSpace {
            level,
            node_count: header.node_count,
            member_map,
            centroids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::TextVectors;
    use crate::rng::StreamRng;
    use proptest::prelude::*;

    fn unit(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        normalize(&mut v).unwrap();
        v
    }

    /// Brute-force average linkage straight from the definition: linkage of
    /// two clusters is the mean pairwise distance between their members,
    /// recomputed from the original matrix every round.
    fn oracle_agglomerate(vecs: &[Vec<f64>], threshold: f64) -> Vec<usize> {
        let n = vecs.len();
        let mut d0 = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d0[i * n + j] = 1.0 - cosine_sim(&vecs[i], &vecs[j]).unwrap();
                }
            }
        }
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let mut sum = 0.0;
                    for &x in &clusters[a] {
                        for &y in &clusters[b] {
                            sum += d0[x * n + y];
                        }
                    }
                    let linkage = sum / (clusters[a].len() * clusters[b].len()) as f64;
                    let key = (
                        *clusters[a].iter().min().unwrap(),
                        *clusters[b].iter().min().unwrap(),
                    );
                    let better = match best {
                        None => true,
                        Some((bd, bi, bj)) => {
                            let bkey = (
                                *clusters[bi].iter().min().unwrap(),
                                *clusters[bj].iter().min().unwrap(),
                            );
                            linkage < bd || (linkage == bd && key < bkey)
                        }
                    };
                    if better {
                        best = Some((linkage, a, b));
                    }
                }
            }
            match best {
                Some((d, a, b)) if d <= threshold => {
                    let absorbed = clusters.remove(b);
                    clusters[a].extend(absorbed);
                }
                _ => break,
            }
        }
        clusters.sort_by_key(|c| *c.iter().min().unwrap());
        let mut out = vec![0usize; n];
        for (ci, members) in clusters.iter().enumerate() {
            for &m in members {
                out[m] = ci;
            }
        }
        out
    }

    #[test]
    fn identical_vectors_merge() {
        let v = vec![1.0, 0.0, 0.0];
        let parts = agglomerate(&[v.clone(), v], 0.09).unwrap();
        assert_eq!(parts, vec![0, 0]);
    }

    #[test]
    fn orthogonal_vectors_stay_singletons() {
        let vecs = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let parts = agglomerate(&vecs, 0.09).unwrap();
        assert_eq!(parts, vec![0, 1, 2]);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_inputs() {
        let mut rng = StreamRng::new(42);
        for trial in 0..10 {
            let vecs: Vec<Vec<f64>> = (0..12).map(|_| unit(&mut rng, 6)).collect();
            let got = agglomerate(&vecs, 0.3).unwrap();
            let want = oracle_agglomerate(&vecs, 0.3);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(agglomerate(&[], 0.1).is_err());
    }

    fn store_from_cluster_vecs(level: Level, vecs: Vec<Vec<f64>>) -> TextStore {
        let entries = vecs
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut mv = v.clone();
                mv.truncate(4);
                (i as u64, TextVectors { match_vec: mv, cluster_vec: v })
            })
            .collect();
        TextStore::new(level, entries).unwrap()
    }

    #[test]
    fn task_level_is_never_clustered() {
        let v = vec![1.0, 0.0, 0.0, 0.0];
        let store = store_from_cluster_vecs(Level::Task, vec![v.clone(); 7]);
        let space = build_node_space(Level::Task, &store, 0.09).unwrap();
        assert_eq!(space.node_count, 7);
        for (i, id) in store.ids().iter().enumerate() {
            assert_eq!(space.node_of(*id), Some(i));
        }
    }

    #[test]
    fn identical_steps_collapse_to_one_node() {
        let v = vec![0.5, 0.5, 0.0, 0.0];
        let store = store_from_cluster_vecs(Level::Step, vec![v.clone(); 5]);
        let space = build_node_space(Level::Step, &store, 0.09).unwrap();
        assert_eq!(space.node_count, 1);
        assert_eq!(space.members(0).len(), 5);
    }

    #[test]
    fn centroids_are_unit_norm() {
        let mut rng = StreamRng::new(5);
        let vecs: Vec<Vec<f64>> = (0..20).map(|_| unit(&mut rng, 8)).collect();
        let store = store_from_cluster_vecs(Level::Step, vecs);
        let space = build_node_space(Level::Step, &store, 0.4).unwrap();
        for c in &space.centroids {
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn node_space_round_trip() {
        let mut rng = StreamRng::new(6);
        let vecs: Vec<Vec<f64>> = (0..10).map(|_| unit(&mut rng, 8)).collect();
        let store = store_from_cluster_vecs(Level::StateMid, vecs);
        let space = build_node_space(Level::StateMid, &store, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("nodes.state_m");
        space.save(&base).unwrap();
        let loaded = NodeSpace::load(&base).unwrap();
        assert_eq!(loaded.level, space.level);
        assert_eq!(loaded.node_count, space.node_count);
        assert_eq!(loaded.member_map, space.member_map);
        for (a, b) in loaded.centroids.iter().zip(&space.centroids) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - (*y as f32 as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn members_closer_to_own_centroid_on_planted_clusters() {
        let mut rng = StreamRng::new(9);
        let mut vecs = Vec::new();
        let mut protos = Vec::new();
        for _ in 0..3 {
            protos.push(unit(&mut rng, 16));
        }
        for p in &protos {
            for _ in 0..8 {
                let mut v: Vec<f64> = p.iter().map(|x| x + 0.02 * rng.normal()).collect();
                normalize(&mut v).unwrap();
                vecs.push(v);
            }
        }
        let store = store_from_cluster_vecs(Level::Step, vecs.clone());
        let space = build_node_space(Level::Step, &store, 0.09).unwrap();
        let mut closer = 0usize;
        let mut trials = 0usize;
        for (i, id) in store.ids().iter().enumerate() {
            let own = space.node_of(*id).unwrap();
            let other = (own + 1) % space.node_count;
            if own == other {
                continue;
            }
            let mv = &store.get(*id).unwrap().match_vec;
            let d_own = 1.0 - cosine_sim(mv, &space.centroids[own]).unwrap();
            let d_other = 1.0 - cosine_sim(mv, &space.centroids[other]).unwrap();
            trials += 1;
            if d_own <= d_other {
                closer += 1;
            }
            let _ = i;
        }
        assert!(trials > 0 && closer * 2 > trials, "{closer}/{trials}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partition_is_total_and_dense(seed in 0u64..1000, n in 2usize..12) {
            let mut rng = StreamRng::new(seed);
            let vecs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 5)).collect();
            let parts = agglomerate(&vecs, 0.2).unwrap();
            prop_assert_eq!(parts.len(), n);
            let max = *parts.iter().max().unwrap();
            for c in 0..=max {
                prop_assert!(parts.contains(&c), "cluster {} missing", c);
            }
        }

        #[test]
        fn raising_threshold_never_increases_node_count(seed in 0u64..1000, n in 2usize..12, t1 in 0.0f64..0.5, dt in 0.0f64..0.5) {
            let mut rng = StreamRng::new(seed);
            let vecs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 5)).collect();
            let lo = agglomerate(&vecs, t1).unwrap();
            let hi = agglomerate(&vecs, t1 + dt).unwrap();
            let count = |p: &[usize]| p.iter().max().unwrap() + 1;
            prop_assert!(count(&hi) <= count(&lo));
        }
    }
}
