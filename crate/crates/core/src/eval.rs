//! Downstream evaluation: task recognition (TR), step recognition (SR),
//! and step forecasting (SF) via fine-tuned heads over frozen features,
//! with seeded video-level splits, early stopping, and top-1 accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, NodeId};
use crate::checkpoint::ParamSet;
use crate::embeddings::ClipStore;
use crate::fusion::{apply_adapter, FusedStore};
use crate::model::{self, MlpOrder};
use crate::rng::{derive_seed, label_hash, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Tr,
    Sr,
    Sf,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Tr, TaskKind::Sr, TaskKind::Sf];

    pub fn parse(text: &str) -> Result<TaskKind> {
        match text.trim().to_lowercase().as_str() {
            "tr" => Ok(TaskKind::Tr),
            "sr" => Ok(TaskKind::Sr),
            "sf" => Ok(TaskKind::Sf),
            other => Err(Error::Config(format!("unknown downstream task {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Tr => "tr",
            TaskKind::Sr => "sr",
            TaskKind::Sf => "sf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlp,
    Transformer,
}

impl HeadKind {
    pub fn parse(text: &str) -> Result<HeadKind> {
        match text.trim().to_lowercase().as_str() {
            "mlp" => Ok(HeadKind::Mlp),
            "transformer" => Ok(HeadKind::Transformer),
            other => Err(Error::Config(format!("unknown eval head {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Transformer => "transformer",
        }
    }
}

/// One annotated segment. `step` and `task` are knowledge-base ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub video: u64,
    pub segment: u64,
    pub step: u64,
    pub task: u64,
}

pub fn save_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut body = String::new();
    for a in annotations {
        body.push_str(&serde_json::to_string(a).expect("annotation serialize"));
        body.push('\n');
    }
    crate::artifact::write_atomic(path, body.as_bytes())
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(a);
    }
    Ok(out)
}

/// Per-video feature blocks: `rows[pos * channels + c]` is channel `c` of
/// the segment at `segments[pos]` (ascending).
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub segments: Vec<u64>,
    pub channels: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl VideoFeatures {
    fn block(&self, pos: usize) -> &[Vec<f64>] {
        &self.rows[pos * self.channels..(pos + 1) * self.channels]
    }
}

pub type FeatureMap = BTreeMap<u64, VideoFeatures>;

pub fn features_from_clips(store: &ClipStore) -> FeatureMap {
    let mut out: FeatureMap = BTreeMap::new();
    for (i, key) in store.keys().iter().enumerate() {
        let entry = out.entry(key.video).or_insert_with(|| VideoFeatures {
            segments: Vec::new(),
            channels: 1,
            dim: store.dim(),
            rows: Vec::new(),
        });
        entry.segments.push(key.segment);
        entry.rows.push(store.row(i).to_vec());
    }
    out
}

/// Adapter outputs of every clip, grouped per video.
pub fn features_from_adapter(params: &ParamSet, store: &ClipStore) -> Result<FeatureMap> {
    let rows = apply_adapter(params, "adapter", store)?;
    let mut out: FeatureMap = BTreeMap::new();
    for (key, row) in store.keys().iter().zip(rows) {
        let entry = out.entry(key.video).or_insert_with(|| VideoFeatures {
            segments: Vec::new(),
            channels: 1,
            dim: store.dim(),
            rows: Vec::new(),
        });
        entry.segments.push(key.segment);
        entry.rows.push(row);
    }
    Ok(out)
}

pub fn features_from_fused(fused: &FusedStore) -> FeatureMap {
    let channels = fused.mode.channels();
    let mut out: FeatureMap = BTreeMap::new();
    for (key, channel, row) in fused.entries() {
        let entry = out.entry(key.video).or_insert_with(|| VideoFeatures {
            segments: Vec::new(),
            channels,
            dim: fused.dim(),
            rows: Vec::new(),
        });
        if *channel == 0 {
            entry.segments.push(key.segment);
        }
        entry.rows.push(row.clone());
    }
    out
}

#[derive(Debug, Clone)]
pub struct DownstreamSample {
    pub video: u64,
    pub features: Tensor,
    pub label: usize,
}

/// Dense class indices over the annotation vocabulary, sorted by id.
#[derive(Debug, Clone)]
pub struct ClassMaps {
    pub tasks: BTreeMap<u64, usize>,
    pub steps: BTreeMap<u64, usize>,
}

pub fn class_maps(annotations: &[Annotation]) -> ClassMaps {
    let tasks: BTreeSet<u64> = annotations.iter().map(|a| a.task).collect();
    let steps: BTreeSet<u64> = annotations.iter().map(|a| a.step).collect();
    ClassMaps {
        tasks: tasks.into_iter().enumerate().map(|(i, s)| (s, i)).collect(),
        steps: steps.into_iter().enumerate().map(|(i, s)| (s, i)).collect(),
    }
}

/// Build downstream samples. TR: one whole-video sequence per video;
/// SR: one single-segment sequence per annotation; SF: the segment history
/// up to t (truncated to `max_history`) labeled with segment t+1's step.
/// Videos with fewer than two annotated segments contribute no SF samples.
pub fn build_samples(
    features: &FeatureMap,
    annotations: &[Annotation],
    classes: &ClassMaps,
    kind: TaskKind,
    max_history: usize,
) -> Result<Vec<DownstreamSample>> {
    if max_history == 0 {
        return Err(Error::Config("max_history must be at least 1".into()));
    }
    let mut per_video: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
    for a in annotations {
        per_video.entry(a.video).or_default().push(a);
    }
    let mut samples = Vec::new();
    for (video, mut anns) in per_video {
        anns.sort_by_key(|a| a.segment);
        for w in anns.windows(2) {
            if w[0].segment == w[1].segment {
                return Err(Error::Integrity(format!(
                    "video {video} has duplicate annotation for segment {}",
                    w[0].segment
                )));
            }
            if w[0].task != w[1].task {
                return Err(Error::Integrity(format!(
                    "video {video} annotated with conflicting tasks {:?} and {:?}",
                    w[0].task, w[1].task
                )));
            }
        }
        let vf = features.get(&video).ok_or_else(|| {
            Error::MissingData(format!("no features for annotated video {video}"))
        })?;
        let pos_of: BTreeMap<u64, usize> =
            vf.segments.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let positions: Vec<usize> = anns
            .iter()
            .map(|a| {
                pos_of.get(&a.segment).copied().ok_or_else(|| {
                    Error::MissingData(format!(
                        "video {video} segment {} has no features",
                        a.segment
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let step_class = |a: &Annotation| -> Result<usize> {
            classes.steps.get(&a.step).copied().ok_or_else(|| {
                Error::Integrity(format!("step id {} missing from class map", a.step))
            })
        };
        match kind {
            TaskKind::Tr => {
                let label = classes.tasks.get(&anns[0].task).copied().ok_or_else(|| {
                    Error::Integrity(format!("task id {} missing from class map", anns[0].task))
                })?;
                let seq = gather(vf, &positions)?;
                samples.push(DownstreamSample { video, features: seq, label });
            }
            TaskKind::Sr => {
                for (a, &pos) in anns.iter().zip(&positions) {
                    let seq = gather(vf, &[pos])?;
                    samples.push(DownstreamSample { video, features: seq, label: step_class(a)? });
                }
            }
            TaskKind::Sf => {
                if anns.len() < 2 {
                    continue;
                }
                for t in 1..anns.len() {
                    let start = t.saturating_sub(max_history);
                    let seq = gather(vf, &positions[start..t])?;
                    samples.push(DownstreamSample {
                        video,
                        features: seq,
                        label: step_class(anns[t])?,
                    });
                }
            }
        }
    }
    Ok(samples)
}

fn gather(vf: &VideoFeatures, positions: &[usize]) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(positions.len() * vf.channels * vf.dim);
    for &pos in positions {
        for row in vf.block(pos) {
            flat.extend_from_slice(row);
        }
    }
    Tensor::matrix(positions.len() * vf.channels, vf.dim, flat)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded 70/10/20 split over video ids: videos sort by a per-video hash,
/// then quotas are cut in order.
pub fn split_videos(videos: &[u64], seed: u64) -> Split {
    let mut unique: Vec<u64> = videos.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let mut hashed: Vec<(u64, u64)> = unique
        .into_iter()
        .map(|v| (derive_seed(seed, &[label_hash("split"), v]), v))
        .collect();
    hashed.sort_unstable();
    let n = hashed.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let ids: Vec<u64> = hashed.into_iter().map(|(_, v)| v).collect();
    Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub head: HeadKind,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub mlp_order: MlpOrder,
    pub max_history: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            head: HeadKind::Mlp,
            batch: 16,
            optimizer: AdamConfig { lr: 1e-4, weight_decay: 1e-3, ..AdamConfig::default() },
            patience: 50,
            max_epochs: 1000,
            mlp_order: MlpOrder::Literal,
            max_history: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("early-stop patience must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Classifier hidden width: 128 for TR, 768 for SR/SF.
pub fn hidden_for(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Tr => 128,
        TaskKind::Sr | TaskKind::Sf => 768,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalOutcome {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    /// 1-based epoch whose validation accuracy was best (0 if untrained).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn head_logits(
    g: &mut Graph,
    binding: &model::Binding,
    cfg: &EvalConfig,
    sample: &DownstreamSample,
) -> Result<NodeId> {
    let seq = g.constant(sample.features.clone());
    match cfg.head {
        HeadKind::Mlp => model::mlp_forward(g, binding, "mlp", seq, cfg.mlp_order),
        HeadKind::Transformer => model::transformer_forward(g, binding, "t", seq),
    }
}

/// Top-1 accuracy of `params` on `samples`; argmax ties resolve to the
/// lowest class index.
pub fn accuracy(params: &ParamSet, samples: &[DownstreamSample], cfg: &EvalConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::MissingData("accuracy over empty sample set".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let binding = model::bind(&mut g, params);
        let logits = head_logits(&mut g, &binding, cfg, s)?;
        let row = g.value(logits).data();
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Fine-tune a fresh head on the train split, early-stop on validation
/// accuracy, report test top-1 of the best-validation parameters.
pub fn finetune_and_test(
    samples: &[DownstreamSample],
    n_classes: usize,
    kind: TaskKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::MissingData("no downstream samples".into()));
    }
    if n_classes == 0 {
        return Err(Error::Config("no classes".into()));
    }
    let d = samples[0].features.shape()[1];
    let videos: Vec<u64> = samples.iter().map(|s| s.video).collect();
    let split = split_videos(&videos, derive_seed(seed, &[label_hash("eval-split")]));
    let member = |ids: &[u64]| -> Vec<&DownstreamSample> {
        let set: BTreeSet<u64> = ids.iter().copied().collect();
        samples.iter().filter(|s| set.contains(&s.video)).collect()
    };
    let train: Vec<&DownstreamSample> = member(&split.train);
    let val: Vec<&DownstreamSample> = member(&split.val);
    let test: Vec<&DownstreamSample> = member(&split.test);
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::MissingData(format!("empty {name} split")));
        }
    }

    let mut params = ParamSet::new();
    let mut rng = StreamRng::new(derive_seed(seed, &[label_hash("eval-head")]));
    match cfg.head {
        HeadKind::Mlp => {
            model::init_downstream_mlp(&mut params, &mut rng, "mlp", d, hidden_for(kind), n_classes)
        }
        HeadKind::Transformer => {
            model::init_transformer(&mut params, &mut rng, "t", d, hidden_for(kind), n_classes)
        }
    }

    let owned_val: Vec<DownstreamSample> = val.iter().map(|s| (*s).clone()).collect();
    let owned_test: Vec<DownstreamSample> = test.iter().map(|s| (*s).clone()).collect();
    let mut adam = AdamState::new(cfg.optimizer.clone());
    let mut best_params = params.clone();
    let mut best_val = -1.0f64;
    let mut best_epoch = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        StreamRng::new(derive_seed(seed, &[label_hash("eval-shuffle"), epoch as u64]))
            .shuffle(&mut order);
        for batch in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let binding = model::bind(&mut g, &params);
            let mut total: Option<NodeId> = None;
            for &i in batch {
                let s = train[i];
                let logits = head_logits(&mut g, &binding, cfg, s)?;
                let loss = g.cross_entropy(logits, &[s.label])?;
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
            }
            let sum = total.expect("non-empty batch");
            let mean = g.scale(sum, 1.0 / batch.len() as f64)?;
            g.backward(mean)?;
            let grads = model::grads_of(&g, &binding);
            adam.step(&mut params, &grads)?;
        }
        epochs_run = epoch + 1;
        let val_acc = accuracy(&params, &owned_val, cfg)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epochs_run;
            best_params = params.clone();
        }
        if epochs_run >= best_epoch + cfg.patience {
            break;
        }
    }
    let test_accuracy = accuracy(&best_params, &owned_test, cfg)?;
    Ok(EvalOutcome {
        test_accuracy,
        val_accuracy: best_val.max(0.0),
        best_epoch,
        epochs_run,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}

/// One result line per (features, head, downstream task) evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub features: String,
    pub head: String,
    pub task: String,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_test: usize,
}

/// Append a row to a results JSONL file (atomic rewrite).
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let mut body = match fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    body.push_str(&serde_json::to_string(row).expect("result serialize"));
    body.push('\n');
    crate::artifact::write_atomic(path, body.as_bytes())
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ResultRow =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::ClipKey;

    fn grid_features(videos: u64, segments: u64, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = StreamRng::new(seed);
        let mut entries = Vec::new();
        for v in 0..videos {
            for s in 0..segments {
                let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                entries.push((ClipKey { video: v, segment: s }, row));
            }
        }
        let store = ClipStore::from_rows(dim, entries).unwrap();
        features_from_clips(&store)
    }

    fn grid_annotations(videos: u64, segments: u64, n_tasks: u64, n_steps: u64) -> Vec<Annotation> {
        let mut out = Vec::new();
        for v in 0..videos {
            for s in 0..segments {
                out.push(Annotation {
                    video: v,
                    segment: s,
                    step: (v + s) % n_steps,
                    task: v % n_tasks,
                });
            }
        }
        out
    }

    #[test]
    fn sample_counts_match_hand_count() {
        let features = grid_features(1, 4, 6, 1);
        let anns = grid_annotations(1, 4, 1, 3);
        let classes = class_maps(&anns);
        let tr = build_samples(&features, &anns, &classes, TaskKind::Tr, 16).unwrap();
        let sr = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let sf = build_samples(&features, &anns, &classes, TaskKind::Sf, 16).unwrap();
        assert_eq!((tr.len(), sr.len(), sf.len()), (1, 4, 3));
        assert_eq!(sr[0].features.shape(), &[1, 6]);
        assert_eq!(tr[0].features.shape(), &[4, 6]);
        // SF sample t uses the prefix of length t
        assert_eq!(sf[0].features.shape(), &[1, 6]);
        assert_eq!(sf[2].features.shape(), &[3, 6]);
    }

    #[test]
    fn sf_history_truncates_and_short_videos_drop() {
        let features = grid_features(2, 6, 4, 2);
        let mut anns = grid_annotations(1, 6, 1, 4);
        // second video: single annotated segment, no SF samples
        anns.push(Annotation { video: 1, segment: 0, step: 0, task: 0 });
        let classes = class_maps(&anns);
        let sf = build_samples(&features, &anns, &classes, TaskKind::Sf, 2).unwrap();
        assert_eq!(sf.len(), 5);
        let longest = sf.iter().map(|s| s.features.shape()[0]).max().unwrap();
        assert_eq!(longest, 2, "history must truncate to max_history");
        assert!(sf.iter().all(|s| s.video == 0));
    }

    #[test]
    fn conflicting_task_annotation_rejected() {
        let features = grid_features(1, 2, 4, 3);
        let anns = vec![
            Annotation { video: 0, segment: 0, step: 0, task: 0 },
            Annotation { video: 0, segment: 1, step: 1, task: 1 },
        ];
        let classes = class_maps(&anns);
        assert!(matches!(
            build_samples(&features, &anns, &classes, TaskKind::Tr, 16),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn split_is_seeded_disjoint_and_sized() {
        let videos: Vec<u64> = (0..100).collect();
        let a = split_videos(&videos, 7);
        let b = split_videos(&videos, 7);
        let c = split_videos(&videos, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (70, 10, 20));
        let mut all: Vec<u64> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, videos);
    }

    #[test]
    fn constant_labels_reach_full_accuracy() {
        let features = grid_features(20, 3, 6, 4);
        let mut anns = grid_annotations(20, 3, 2, 1);
        for a in &mut anns {
            a.task = 0;
        }
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let cfg = EvalConfig {
            max_epochs: 40,
            patience: 50,
            optimizer: AdamConfig { lr: 1e-2, weight_decay: 0.0, ..AdamConfig::default() },
            ..EvalConfig::default()
        };
        let out = finetune_and_test(&samples, classes.steps.len().max(2), TaskKind::Sr, &cfg, 5)
            .unwrap();
        assert_eq!(out.test_accuracy, 1.0, "constant labels should saturate");
    }

    #[test]
    fn untrained_head_is_chance_level() {
        // labels independent of features: expected accuracy 1/C
        let dim = 6;
        let n_classes = 4u64;
        let features = grid_features(130, 4, dim, 5);
        let mut rng = StreamRng::new(99);
        let mut anns = Vec::new();
        for v in 0..130u64 {
            for s in 0..4u64 {
                anns.push(Annotation {
                    video: v,
                    segment: s,
                    step: rng.below(n_classes as usize) as u64,
                    task: 0,
                });
            }
        }
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let cfg = EvalConfig { max_epochs: 0, ..EvalConfig::default() };
        let out = finetune_and_test(&samples, n_classes as usize, TaskKind::Sr, &cfg, 3).unwrap();
        assert_eq!(out.epochs_run, 0);
        // binomial 99% bounds around 0.25 for n_test ≈ 100
        let n = out.n_test as f64;
        let half_width = 2.576 * (0.25 * 0.75 / n).sqrt();
        assert!(
            (out.test_accuracy - 0.25).abs() < half_width + 1e-9,
            "accuracy {} outside chance bounds ±{half_width}",
            out.test_accuracy
        );
    }

    #[test]
    fn early_stopping_respects_patience_bound() {
        let features = grid_features(30, 3, 5, 6);
        let mut rng = StreamRng::new(17);
        let mut anns = Vec::new();
        for v in 0..30u64 {
            for s in 0..3u64 {
                anns.push(Annotation { video: v, segment: s, step: rng.below(3) as u64, task: 0 });
            }
        }
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let cfg = EvalConfig { max_epochs: 200, patience: 3, ..EvalConfig::default() };
        let out = finetune_and_test(&samples, 3, TaskKind::Sr, &cfg, 11).unwrap();
        assert!(
            out.epochs_run <= out.best_epoch + cfg.patience,
            "ran {} epochs with best at {}",
            out.epochs_run,
            out.best_epoch
        );
        assert!(out.epochs_run < 200, "early stopping never fired");
    }

    #[test]
    fn eval_is_deterministic_per_seed() {
        let features = grid_features(20, 3, 5, 8);
        let anns = grid_annotations(20, 3, 3, 4);
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let cfg = EvalConfig { max_epochs: 3, ..EvalConfig::default() };
        let a = finetune_and_test(&samples, 4, TaskKind::Sr, &cfg, 21).unwrap();
        let b = finetune_and_test(&samples, 4, TaskKind::Sr, &cfg, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transformer_head_runs() {
        let features = grid_features(20, 3, 16, 9);
        let anns = grid_annotations(20, 3, 2, 3);
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Tr, 16).unwrap();
        let cfg = EvalConfig {
            head: HeadKind::Transformer,
            max_epochs: 2,
            patience: 5,
            ..EvalConfig::default()
        };
        let out = finetune_and_test(&samples, 2, TaskKind::Tr, &cfg, 13).unwrap();
        assert!((0.0..=1.0).contains(&out.test_accuracy));
        assert_eq!(out.epochs_run, 2);
    }

    #[test]
    fn accuracy_is_exact_fraction() {
        let features = grid_features(10, 2, 4, 10);
        let anns = grid_annotations(10, 2, 2, 2);
        let classes = class_maps(&anns);
        let samples = build_samples(&features, &anns, &classes, TaskKind::Sr, 16).unwrap();
        let mut params = ParamSet::new();
        let mut rng = StreamRng::new(1);
        model::init_downstream_mlp(&mut params, &mut rng, "mlp", 4, 8, 2);
        let cfg = EvalConfig::default();
        let acc = accuracy(&params, &samples, &cfg).unwrap();
        let scaled = acc * samples.len() as f64;
        assert!((scaled - scaled.round()).abs() < 1e-12);
    }

    #[test]
    fn results_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let row = ResultRow {
            features: "path2".into(),
            head: "mlp".into(),
            task: "sr".into(),
            test_accuracy: 0.5,
            val_accuracy: 0.6,
            best_epoch: 3,
            epochs_run: 5,
            n_test: 10,
        };
        append_result(&path, &row).unwrap();
        append_result(&path, &row).unwrap();
        let rows = load_results(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], row);
    }
}
