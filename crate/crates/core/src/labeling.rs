//! Pseudo-label generation: the five supervision families per clip.
//!
//! taskVNM / stepVNM / stateVNM score a clip against every raw text at a
//! level (cosine in the 512-d match space), sum scores per node, and keep
//! the top-k. stateVNM first routes the clip to the state type (before, mid,
//! after) owning the single best-matching raw text. stepTCL masks step
//! scores to the steps of the clip's best task node. stepNRL reads hop-1
//! neighborhoods of the clip's best step node from the step graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::clustering::NodeSpace;
use crate::corpus::KnowledgeBase;
use crate::embeddings::{cosine_sim, ClipKey, ClipStore, Level, TextStore};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateType {
    Before,
    Mid,
    After,
}

impl StateType {
    pub const ALL: [StateType; 3] = [StateType::Before, StateType::Mid, StateType::After];

    pub fn level(self) -> Level {
        match self {
            StateType::Before => Level::StateBefore,
            StateType::Mid => Level::StateMid,
            StateType::After => Level::StateAfter,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StateType::Before => "before",
            StateType::Mid => "mid",
            StateType::After => "after",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub video: u64,
    pub segment: u64,
    pub task_vnm: Vec<usize>,
    pub step_vnm: Vec<usize>,
    pub state_type: StateType,
    pub state_vnm: Vec<usize>,
    pub step_tcl: Vec<usize>,
    pub nrl_in: Vec<usize>,
    pub nrl_out: Vec<usize>,
}

/// Directed graph over step node ids; edges deduplicated, no self-loops.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepGraph {
    pub edges: BTreeSet<(usize, usize)>,
}

impl StepGraph {
    pub fn insert(&mut self, from: usize, to: usize) {
        if from != to {
            self.edges.insert((from, to));
        }
    }

    pub fn predecessors(&self, node: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|(_, t)| *t == node)
            .map(|(f, _)| *f)
            .collect()
    }

    pub fn successors(&self, node: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|(f, _)| *f == node)
            .map(|(_, t)| *t)
            .collect()
    }
}

/// Task node × step node co-occurrence: row i holds exactly the step nodes
/// of task node i's steps.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoOccurrence {
    pub rows: BTreeMap<usize, BTreeSet<usize>>,
}

impl CoOccurrence {
    pub fn build(base: &KnowledgeBase, tasks: &NodeSpace, steps: &NodeSpace) -> Result<Self> {
        let mut rows: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for task in base.tasks.values() {
            let tnode = tasks.node_of(task.task_id).ok_or_else(|| {
                Error::MissingData(format!("task {} missing from task node space", task.task_id))
            })?;
            let row = rows.entry(tnode).or_default();
            for sid in &task.step_ids {
                let snode = steps.node_of(*sid).ok_or_else(|| {
                    Error::MissingData(format!("step {sid} missing from step node space"))
                })?;
                row.insert(snode);
            }
        }
        Ok(CoOccurrence { rows })
    }

    pub fn steps_of(&self, task_node: usize) -> Option<&BTreeSet<usize>> {
        self.rows.get(&task_node)
    }
}

/// Per-node aggregated cosine scores: for every raw text at the level,
/// cosine(clip, text match_vec), summed into the text's node slot. Texts are
/// visited in ascending id order, so accumulation order is fixed.
pub fn score_nodes(clip: &[f64], space: &NodeSpace, texts: &TextStore) -> Result<Vec<f64>> {
    if space.node_count == 0 {
        return Err(Error::MissingData(format!(
            "empty node space at level {}",
            space.level.as_str()
        )));
    }
    let mut scores = vec![0.0f64; space.node_count];
    for (id, vecs) in texts.iter() {
        let node = space.node_of(*id).ok_or_else(|| {
            Error::MissingData(format!(
                "text {id} missing from {} node space",
                space.level.as_str()
            ))
        })?;
        scores[node] += cosine_sim(clip, &vecs.match_vec)?;
    }
    Ok(scores)
}

/// Centroid-matching alternative: one cosine per node against its centroid.
pub fn score_nodes_centroid(clip: &[f64], space: &NodeSpace) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(space.node_count);
    for c in &space.centroids {
        scores.push(cosine_sim(clip, c)?);
    }
    Ok(scores)
}

/// Indices of the k highest scores, descending, ties by ascending id;
/// k is clamped to the score count.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order
}

/// Route a clip to the state type of its single best-matching raw state
/// text (ties: before < mid < after, then lower text id), then rank that
/// type's nodes.
pub fn state_vnm(
    clip: &[f64],
    spaces: &BTreeMap<StateType, NodeSpace>,
    texts: &BTreeMap<StateType, TextStore>,
    k: usize,
) -> Result<(StateType, Vec<usize>)> {
    let mut best: Option<(f64, StateType)> = None;
    for ty in StateType::ALL {
        let store = texts
            .get(&ty)
            .ok_or_else(|| Error::MissingData(format!("missing {} state texts", ty.as_str())))?;
        for (_, vecs) in store.iter() {
            let sim = cosine_sim(clip, &vecs.match_vec)?;
            if best.map_or(true, |(b, _)| sim > b) {
                best = Some((sim, ty));
            }
        }
    }
    let (_, ty) = best.ok_or_else(|| Error::MissingData("no state texts".into()))?;
    let space = spaces
        .get(&ty)
        .ok_or_else(|| Error::MissingData(format!("missing {} node space", ty.as_str())))?;
    let scores = score_nodes(clip, space, &texts[&ty])?;
    Ok((ty, top_k(&scores, k)))
}

/// Step graph from (1) consecutive steps of each task and (2) best step
/// nodes of chronologically consecutive clips of the same video.
pub fn build_step_graph(
    base: &KnowledgeBase,
    steps: &NodeSpace,
    clip_best_step: &[(ClipKey, usize)],
) -> Result<StepGraph> {
    let mut graph = StepGraph::default();
    for task in base.tasks.values() {
        for w in task.step_ids.windows(2) {
            let a = steps.node_of(w[0]).ok_or_else(|| {
                Error::MissingData(format!("step {} missing from node space", w[0]))
            })?;
            let b = steps.node_of(w[1]).ok_or_else(|| {
                Error::MissingData(format!("step {} missing from node space", w[1]))
            })?;
            graph.insert(a, b);
        }
    }
    for w in clip_best_step.windows(2) {
        let ((ka, na), (kb, nb)) = (w[0], w[1]);
        if ka.video == kb.video {
            graph.insert(na, nb);
        }
    }
    Ok(graph)
}

/// Hop-1 neighborhoods. Only hop = 1 is supported.
pub fn nrl_labels(node: usize, graph: &StepGraph, hop: usize) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    if hop != 1 {
        return Err(Error::Config(format!("NRL hop must be 1, got {hop}")));
    }
    Ok((graph.predecessors(node), graph.successors(node)))
}

/// Mask step scores to the best task node's co-occurring steps, then top-k.
pub fn tcl_labels(
    best_task_node: usize,
    step_scores: &[f64],
    cooc: &CoOccurrence,
    k: usize,
) -> Result<Vec<usize>> {
    let allowed = cooc.steps_of(best_task_node).ok_or_else(|| {
        Error::MissingData(format!("task node {best_task_node} absent from co-occurrence"))
    })?;
    let mut pairs: Vec<(usize, f64)> = allowed
        .iter()
        .map(|&n| (n, step_scores[n]))
        .collect();
    pairs.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    pairs.truncate(k.min(pairs.len()));
    Ok(pairs.into_iter().map(|(n, _)| n).collect())
}

/// All label spaces and side structures needed to label clips.
pub struct LabelContext<'a> {
    pub base: &'a KnowledgeBase,
    pub task_space: &'a NodeSpace,
    pub step_space: &'a NodeSpace,
    pub state_spaces: &'a BTreeMap<StateType, NodeSpace>,
    pub task_texts: &'a TextStore,
    pub step_texts: &'a TextStore,
    pub state_texts: &'a BTreeMap<StateType, TextStore>,
}

/// Label every clip in the store. Clips are processed in ascending
/// (video, segment) order; output order matches.
pub fn generate_all(store: &ClipStore, ctx: &LabelContext, k: usize) -> Result<Vec<PseudoLabelRecord>> {
    if k == 0 {
        return Err(Error::Config("label top-k must be ≥ 1".into()));
    }
    let mut partial = Vec::with_capacity(store.len());
    let mut best_steps = Vec::with_capacity(store.len());
    for (i, key) in store.keys().iter().enumerate() {
        let clip = store.row(i);
        let with_clip = |e: Error| Error::MissingData(format!("clip {key:?}: {e}"));
        let task_scores = score_nodes(clip, ctx.task_space, ctx.task_texts).map_err(with_clip)?;
        let task_vnm = top_k(&task_scores, k);
        let step_scores = score_nodes(clip, ctx.step_space, ctx.step_texts).map_err(with_clip)?;
        let step_vnm = top_k(&step_scores, k);
        let (state_type, state_ids) =
            state_vnm(clip, ctx.state_spaces, ctx.state_texts, k).map_err(with_clip)?;
        best_steps.push((*key, step_vnm[0]));
        partial.push((task_vnm, step_vnm, state_type, state_ids, step_scores, task_scores));
    }
    let graph = build_step_graph(ctx.base, ctx.step_space, &best_steps)?;
    let cooc = CoOccurrence::build(ctx.base, ctx.task_space, ctx.step_space)?;
    let mut out = Vec::with_capacity(store.len());
    for (key, (task_vnm, step_vnm, state_type, state_ids, step_scores, _)) in
        store.keys().iter().zip(partial)
    {
        let best_step = step_vnm[0];
        let (nrl_in, nrl_out) = nrl_labels(best_step, &graph, 1)?;
        let step_tcl = tcl_labels(task_vnm[0], &step_scores, &cooc, k)?;
        out.push(PseudoLabelRecord {
            video: key.video,
            segment: key.segment,
            task_vnm,
            step_vnm,
            state_type,
            state_vnm: state_ids,
            step_tcl,
            nrl_in: nrl_in.into_iter().collect(),
            nrl_out: nrl_out.into_iter().collect(),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    schema: String,
    version: u32,
    k: usize,
}

pub fn save_labels(path: &Path, records: &[PseudoLabelRecord], k: usize) -> Result<()> {
    let mut body = serde_json::to_string(&LabelHeader {
        schema: "tss-labels".into(),
        version: 1,
        k,
    })
    .expect("header serializes");
    body.push('\n');
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

/// Returns (records, k).
pub fn load_labels(path: &Path) -> Result<(Vec<PseudoLabelRecord>, usize)> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = body.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty label file"))?;
    let header: LabelHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    if header.schema != "tss-labels" || header.version != 1 {
        return Err(Error::parse(path, 1, "unrecognized label schema"));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?,
        );
    }
    Ok((records, header.k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::TextVectors;
    use crate::rng::StreamRng;
    use proptest::prelude::*;

    fn space_of(level: Level, assignment: &[usize], dim: usize) -> NodeSpace {
        let node_count = assignment.iter().max().map_or(0, |m| m + 1);
        let member_map = assignment
            .iter()
            .enumerate()
            .map(|(i, &n)| (i as u64, n))
            .collect();
        NodeSpace {
            level,
            node_count,
            member_map,
            centroids: vec![vec![1.0; dim]; node_count],
        }
    }

    fn store_of(level: Level, match_vecs: Vec<Vec<f64>>) -> TextStore {
        let entries = match_vecs
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                (i as u64, TextVectors { cluster_vec: v.clone(), match_vec: v })
            })
            .collect();
        TextStore::new(level, entries).unwrap()
    }

    #[test]
    fn single_text_score_is_its_cosine() {
        let store = store_of(Level::Step, vec![vec![0.0, 1.0]]);
        let space = space_of(Level::Step, &[0], 2);
        let clip = vec![1.0, 1.0];
        let scores = score_nodes(&clip, &space, &store).unwrap();
        let want = cosine_sim(&clip, &[0.0, 1.0]).unwrap();
        assert!((scores[0] - want).abs() < 1e-15);
    }

    #[test]
    fn multi_member_score_matches_per_text_oracle() {
        let mut rng = StreamRng::new(8);
        let texts: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let assignment = [0usize, 0, 1, 1, 1, 2];
        let store = store_of(Level::Step, texts.clone());
        let space = space_of(Level::Step, &assignment, 8);
        let clip: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let scores = score_nodes(&clip, &space, &store).unwrap();
        let mut want = vec![0.0f64; 3];
        for (i, t) in texts.iter().enumerate() {
            want[assignment[i]] += cosine_sim(&clip, t).unwrap();
        }
        for (g, w) in scores.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_texts_score_zero() {
        let store = store_of(Level::Step, vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let space = space_of(Level::Step, &[0, 1], 3);
        let scores = score_nodes(&[1.0, 0.0, 0.0], &space, &store).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    #[test]
    fn top_k_tie_breaks_by_id() {
        assert_eq!(top_k(&[1.0, 1.0], 1), vec![0]);
        assert_eq!(top_k(&[0.5, 1.0, 1.0], 2), vec![1, 2]);
    }

    #[test]
    fn top_k_clamps_to_len() {
        assert_eq!(top_k(&[0.3, 0.1], 5), vec![0, 1]);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = StreamRng::new(12);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
            let got = top_k(&scores, 3);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            assert_eq!(got, order[..3]);
        }
    }

    fn state_fixture() -> (BTreeMap<StateType, NodeSpace>, BTreeMap<StateType, TextStore>) {
        let mut spaces = BTreeMap::new();
        let mut texts = BTreeMap::new();
        let mk = |v: Vec<Vec<f64>>| v;
        let b = mk(vec![vec![1.0, 0.0, 0.0, 0.0]]);
        let m = mk(vec![vec![0.0, 1.0, 0.0, 0.0]]);
        let a = mk(vec![vec![0.0, 0.0, 1.0, 0.0]]);
        for (ty, vecs) in [
            (StateType::Before, b),
            (StateType::Mid, m),
            (StateType::After, a),
        ] {
            spaces.insert(ty, space_of(ty.level(), &[0], 4));
            texts.insert(ty, store_of(ty.level(), vecs));
        }
        (spaces, texts)
    }

    #[test]
    fn state_routing_exact_match_wins() {
        let (spaces, texts) = state_fixture();
        let (ty, ids) = state_vnm(&[0.0, 1.0, 0.0, 0.0], &spaces, &texts, 3).unwrap();
        assert_eq!(ty, StateType::Mid);
        assert_eq!(ids, vec![0]);
    }

    #[test]
    fn state_tie_prefers_before() {
        let (spaces, texts) = state_fixture();
        // equidistant from the before and after texts
        let (ty, _) = state_vnm(&[1.0, 0.0, 1.0, 0.0], &spaces, &texts, 3).unwrap();
        assert_eq!(ty, StateType::Before);
    }

    #[test]
    fn step_graph_from_task_chain() {
        let base = KnowledgeBase::from_parts(
            vec![(0, "t".into())],
            vec![
                (0, 0, 0, "a".into()),
                (1, 0, 1, "b".into()),
                (2, 0, 2, "c".into()),
            ],
            Vec::new(),
        )
        .unwrap();
        let space = space_of(Level::Step, &[0, 1, 2], 2);
        let graph = build_step_graph(&base, &space, &[]).unwrap();
        assert_eq!(
            graph.edges,
            BTreeSet::from([(0, 1), (1, 2)])
        );
    }

    #[test]
    fn chronology_edge_drops_self_loop() {
        let base = KnowledgeBase::from_parts(
            vec![(0, "t".into())],
            vec![(0, 0, 0, "a".into())],
            Vec::new(),
        )
        .unwrap();
        let space = space_of(Level::Step, &[0], 2);
        let clips = vec![
            (ClipKey { video: 5, segment: 0 }, 7),
            (ClipKey { video: 5, segment: 1 }, 7),
            (ClipKey { video: 5, segment: 2 }, 9),
            (ClipKey { video: 6, segment: 0 }, 1),
        ];
        let graph = build_step_graph(&base, &space, &clips).unwrap();
        assert!(graph.edges.contains(&(7, 9)));
        assert!(!graph.edges.contains(&(7, 7)));
        assert!(!graph.edges.contains(&(9, 1)), "videos must not chain");
    }

    #[test]
    fn nrl_isolated_node_is_empty() {
        let graph = StepGraph::default();
        let (i, o) = nrl_labels(3, &graph, 1).unwrap();
        assert!(i.is_empty() && o.is_empty());
        assert!(nrl_labels(3, &graph, 2).is_err());
    }

    #[test]
    fn nrl_adjacency_duality() {
        let mut rng = StreamRng::new(77);
        let mut graph = StepGraph::default();
        for _ in 0..40 {
            graph.insert(rng.below(10) as usize, rng.below(10) as usize);
        }
        for i in 0..10 {
            let (_, out) = nrl_labels(i, &graph, 1).unwrap();
            for j in out {
                let (jin, _) = nrl_labels(j, &graph, 1).unwrap();
                assert!(jin.contains(&i));
            }
        }
    }

    #[test]
    fn tcl_restricts_to_task_steps() {
        let mut cooc = CoOccurrence::default();
        cooc.rows.insert(0, BTreeSet::from([1, 3, 4]));
        let scores = vec![9.0, 0.5, 9.0, 0.7, 0.1];
        let got = tcl_labels(0, &scores, &cooc, 3).unwrap();
        assert_eq!(got, vec![3, 1, 4]);
    }

    #[test]
    fn labels_round_trip() {
        let records = vec![PseudoLabelRecord {
            video: 1,
            segment: 2,
            task_vnm: vec![0],
            step_vnm: vec![4, 2, 1],
            state_type: StateType::After,
            state_vnm: vec![3],
            step_tcl: vec![2],
            nrl_in: vec![],
            nrl_out: vec![4, 5],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        save_labels(&path, &records, 3).unwrap();
        let (loaded, k) = load_labels(&path).unwrap();
        assert_eq!(loaded, records);
        assert_eq!(k, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn top_k_is_sorted_and_distinct(scores in proptest::collection::vec(-2.0f64..2.0, 1..20), k in 1usize..6) {
            let ids = top_k(&scores, k);
            prop_assert_eq!(ids.len(), k.min(scores.len()));
            for w in ids.windows(2) {
                prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
            }
            let set: BTreeSet<usize> = ids.iter().copied().collect();
            prop_assert_eq!(set.len(), ids.len());
        }

        #[test]
        fn scaling_clip_preserves_top_k(seed in 0u64..500, lambda in 0.01f64..100.0) {
            let mut rng = StreamRng::new(seed);
            let texts: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
            let assignment: Vec<usize> = (0..10).map(|i| i % 4).collect();
            let store = store_of(Level::Step, texts);
            let space = space_of(Level::Step, &assignment, 6);
            let clip: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            prop_assume!(clip.iter().any(|&x| x != 0.0));
            let scaled: Vec<f64> = clip.iter().map(|&x| x * lambda).collect();
            let a = top_k(&score_nodes(&clip, &space, &store).unwrap(), 3);
            let b = top_k(&score_nodes(&scaled, &space, &store).unwrap(), 3);
            prop_assert_eq!(a, b);
        }
    }
}
