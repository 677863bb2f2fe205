//! Fusing task-, step-, and state-level adapter outputs per video.
//!
//! Two schemes: `concat` interleaves the three streams along time in fixed
//! (task, step, state) order per timestep, tripling sequence length;
//! `avgpool` takes the elementwise mean, preserving length.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::ParamSet;
use crate::embeddings::{read_features, write_features, ClipKey, ClipStore, FeatureKind};
use crate::model;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    Concat,
    Avgpool,
}

impl FuseMode {
    pub fn parse(text: &str) -> Result<FuseMode> {
        match text.trim().to_lowercase().as_str() {
            "concat" => Ok(FuseMode::Concat),
            "avgpool" => Ok(FuseMode::Avgpool),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FuseMode::Concat => "concat",
            FuseMode::Avgpool => "avgpool",
        }
    }

    /// Rows emitted per original timestep.
    pub fn channels(self) -> usize {
        match self {
            FuseMode::Concat => 3,
            FuseMode::Avgpool => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub mode: FuseMode,
    pub features: Tensor,
}

/// Fuse three equally-shaped `[T, d]` sequences.
pub fn fuse(
    seq_task: &Tensor,
    seq_step: &Tensor,
    seq_state: &Tensor,
    mode: FuseMode,
) -> Result<FusedSequence> {
    let shape = seq_task.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("fuse expects matrices, got {shape:?}")));
    }
    if seq_step.shape() != shape || seq_state.shape() != shape {
        return Err(Error::Shape(format!(
            "fuse inputs disagree: {:?} vs {:?} vs {:?}",
            shape,
            seq_step.shape(),
            seq_state.shape()
        )));
    }
    let (t, d) = (shape[0], shape[1]);
    let features = match mode {
        FuseMode::Concat => {
            let mut data = Vec::with_capacity(3 * t * d);
            for r in 0..t {
                data.extend_from_slice(seq_task.row(r));
                data.extend_from_slice(seq_step.row(r));
                data.extend_from_slice(seq_state.row(r));
            }
            Tensor::matrix(3 * t, d, data)?
        }
        FuseMode::Avgpool => {
            let mut data = Vec::with_capacity(t * d);
            for r in 0..t {
                let (a, b, c) = (seq_task.row(r), seq_step.row(r), seq_state.row(r));
                for i in 0..d {
                    data.push((a[i] + b[i] + c[i]) / 3.0);
                }
            }
            Tensor::matrix(t, d, data)?
        }
    };
    Ok(FusedSequence { mode, features })
}

/// Run every clip in the store through an adapter (no gradients); rows stay
/// aligned with `store.keys()`.
pub fn apply_adapter(params: &ParamSet, prefix: &str, store: &ClipStore) -> Result<Vec<Vec<f64>>> {
    let adapter = params.subset(&format!("{prefix}."));
    if adapter.is_empty() {
        return Err(Error::Config(format!("checkpoint has no {prefix:?} parameters")));
    }
    let n = store.keys().len();
    let d = store.dim();
    let mut flat = Vec::with_capacity(n * d);
    for i in 0..n {
        flat.extend_from_slice(store.row(i));
    }
    let mut g = Graph::new();
    let binding = model::bind(&mut g, &adapter);
    let x = g.constant(Tensor::matrix(n, d, flat)?);
    let out = model::adapter_forward(&mut g, &binding, prefix, x)?;
    let value = g.value(out);
    Ok((0..n).map(|r| value.row(r).to_vec()).collect())
}

/// Group adapter outputs into per-video sequences: video id -> (ascending
/// segment ids, `[T, d]` matrix).
pub fn sequences_by_video(
    store: &ClipStore,
    rows: &[Vec<f64>],
) -> Result<BTreeMap<u64, (Vec<u64>, Tensor)>> {
    if rows.len() != store.keys().len() {
        return Err(Error::Shape(format!(
            "{} rows for {} clips",
            rows.len(),
            store.keys().len()
        )));
    }
    let mut grouped: BTreeMap<u64, (Vec<u64>, Vec<f64>)> = BTreeMap::new();
    for (key, row) in store.keys().iter().zip(rows) {
        let entry = grouped.entry(key.video).or_default();
        entry.0.push(key.segment);
        entry.1.extend_from_slice(row);
    }
    let d = store.dim();
    let mut out = BTreeMap::new();
    for (video, (segments, flat)) in grouped {
        let t = segments.len();
        out.insert(video, (segments, Tensor::matrix(t, d, flat)?));
    }
    Ok(out)
}

/// Fused per-segment features; `channel` orders the rows emitted for one
/// original segment (concat: 0 = task, 1 = step, 2 = state; avgpool: 0).
#[derive(Debug, Clone)]
pub struct FusedStore {
    pub mode: FuseMode,
    dim: usize,
    entries: Vec<(ClipKey, u32, Vec<f64>)>,
}

impl FusedStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(ClipKey, u32, Vec<f64>)] {
        &self.entries
    }

    /// `[T', d]` sequence for one video: segments ascending, channels
    /// ascending within a segment, reproducing `fuse` row order.
    pub fn video_sequence(&self, video: u64) -> Option<Tensor> {
        let rows: Vec<&Vec<f64>> = self
            .entries
            .iter()
            .filter(|(k, _, _)| k.video == video)
            .map(|(_, _, r)| r)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut flat = Vec::with_capacity(rows.len() * self.dim);
        for r in &rows {
            flat.extend_from_slice(r);
        }
        Some(Tensor::matrix(rows.len(), self.dim, flat).expect("store rows consistent"))
    }

    pub fn videos(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.entries.iter().map(|(k, _, _)| k.video).collect();
        v.dedup();
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|(_, _, r)| r.clone()).collect();
        let ids: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, c, _)| {
                serde_json::json!({"video": k.video, "segment": k.segment, "channel": c})
            })
            .collect();
        write_features(path, FeatureKind::Fused, self.dim, &rows, &ids)
    }

    pub fn load(path: &Path) -> Result<FusedStore> {
        let (kind, dim, rows, ids) = read_features(path)?;
        if kind != FeatureKind::Fused {
            return Err(Error::Integrity(format!(
                "{}: expected fused features, got {kind:?}",
                path.display()
            )));
        }
        let mut entries = Vec::with_capacity(rows.len());
        let mut max_channel = 0u32;
        for (row, id) in rows.into_iter().zip(ids) {
            let field = |name: &str| -> Result<u64> {
                id.get(name).and_then(|v| v.as_u64()).ok_or_else(|| {
                    Error::Integrity(format!("{}: id row missing {name:?}", path.display()))
                })
            };
            let key = ClipKey { video: field("video")?, segment: field("segment")? };
            let channel = field("channel")? as u32;
            max_channel = max_channel.max(channel);
            entries.push((key, channel, row));
        }
        let mode = if max_channel > 0 { FuseMode::Concat } else { FuseMode::Avgpool };
        Ok(FusedStore { mode, dim, entries })
    }
}

/// Build the fused store from the three pathway checkpoints' adapters.
pub fn fuse_store(
    task_params: &ParamSet,
    step_params: &ParamSet,
    state_params: &ParamSet,
    store: &ClipStore,
    mode: FuseMode,
) -> Result<FusedStore> {
    let streams = [
        apply_adapter(task_params, "adapter", store)?,
        apply_adapter(step_params, "adapter", store)?,
        apply_adapter(state_params, "adapter", store)?,
    ];
    let by_video = [
        sequences_by_video(store, &streams[0])?,
        sequences_by_video(store, &streams[1])?,
        sequences_by_video(store, &streams[2])?,
    ];
    let mut entries = Vec::new();
    for (video, (segments, seq_task)) in &by_video[0] {
        let (_, seq_step) = &by_video[1][video];
        let (_, seq_state) = &by_video[2][video];
        let fused = fuse(seq_task, seq_step, seq_state, mode)?;
        let channels = mode.channels();
        for (t, &segment) in segments.iter().enumerate() {
            for c in 0..channels {
                entries.push((
                    ClipKey { video: *video, segment },
                    c as u32,
                    fused.features.row(t * channels + c).to_vec(),
                ));
            }
        }
    }
    Ok(FusedStore { mode, dim: store.dim(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn seq(rng: &mut StreamRng, t: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..t * d).map(|_| rng.normal()).collect();
        Tensor::matrix(t, d, data).unwrap()
    }

    #[test]
    fn avgpool_of_identical_inputs_is_identity() {
        let mut rng = StreamRng::new(1);
        let a = seq(&mut rng, 4, 6);
        let out = fuse(&a, &a, &a, FuseMode::Avgpool).unwrap();
        for (x, y) in out.features.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_triples_length_and_interleaves() {
        let mut rng = StreamRng::new(2);
        let (a, b, c) = (seq(&mut rng, 2, 3), seq(&mut rng, 2, 3), seq(&mut rng, 2, 3));
        let out = fuse(&a, &b, &c, FuseMode::Concat).unwrap();
        assert_eq!(out.features.shape(), &[6, 3]);
        assert_eq!(out.features.row(0), a.row(0));
        assert_eq!(out.features.row(1), b.row(0));
        assert_eq!(out.features.row(2), c.row(0));
        assert_eq!(out.features.row(3), a.row(1));
        assert_eq!(out.features.row(4), b.row(1));
        assert_eq!(out.features.row(5), c.row(1));
    }

    #[test]
    fn avgpool_matches_elementwise_oracle() {
        let mut rng = StreamRng::new(3);
        let (a, b, c) = (seq(&mut rng, 5, 7), seq(&mut rng, 5, 7), seq(&mut rng, 5, 7));
        let out = fuse(&a, &b, &c, FuseMode::Avgpool).unwrap();
        for i in 0..a.len() {
            let want = (a.data()[i] + b.data()[i] + c.data()[i]) / 3.0;
            assert!((out.features.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn avgpool_is_permutation_invariant_concat_is_not() {
        let mut rng = StreamRng::new(4);
        let (a, b, c) = (seq(&mut rng, 3, 4), seq(&mut rng, 3, 4), seq(&mut rng, 3, 4));
        let p1 = fuse(&a, &b, &c, FuseMode::Avgpool).unwrap();
        let p2 = fuse(&c, &a, &b, FuseMode::Avgpool).unwrap();
        for (x, y) in p1.features.data().iter().zip(p2.features.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c1 = fuse(&a, &b, &c, FuseMode::Concat).unwrap();
        let c2 = fuse(&c, &a, &b, FuseMode::Concat).unwrap();
        assert_ne!(c1.features, c2.features);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = StreamRng::new(5);
        let a = seq(&mut rng, 3, 4);
        let b = seq(&mut rng, 2, 4);
        assert!(matches!(fuse(&a, &b, &a, FuseMode::Concat), Err(Error::Shape(_))));
    }

    fn tiny_store(seed: u64) -> ClipStore {
        let mut rng = StreamRng::new(seed);
        let dim = 6;
        let mut entries = Vec::new();
        for v in 0..3u64 {
            for s in 0..4u64 {
                let row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                entries.push((ClipKey { video: v, segment: s }, row));
            }
        }
        ClipStore::from_rows(dim, entries).unwrap()
    }

    fn tiny_adapter(seed: u64, d: usize) -> ParamSet {
        let mut p = ParamSet::new();
        model::init_adapter(&mut p, &mut StreamRng::new(seed), "adapter", d, 3);
        p
    }

    #[test]
    fn apply_adapter_matches_manual_forward() {
        let store = tiny_store(6);
        let params = tiny_adapter(7, store.dim());
        let rows = apply_adapter(&params, "adapter", &store).unwrap();
        assert_eq!(rows.len(), store.keys().len());
        // manual: up(relu(down(x)))
        let dw = params.get("adapter.down.w").unwrap();
        let db = params.get("adapter.down.b").unwrap();
        let uw = params.get("adapter.up.w").unwrap();
        let ub = params.get("adapter.up.b").unwrap();
        let x = store.row(0);
        let mut h = vec![0.0; 3];
        for j in 0..3 {
            let mut acc = db.data()[j];
            for i in 0..store.dim() {
                acc += x[i] * dw.data()[i * 3 + j];
            }
            h[j] = acc.max(0.0);
        }
        for j in 0..store.dim() {
            let mut acc = ub.data()[j];
            for (i, hv) in h.iter().enumerate() {
                acc += hv * uw.data()[i * store.dim() + j];
            }
            assert!((rows[0][j] - acc).abs() < 1e-9, "col {j}");
        }
    }

    #[test]
    fn fused_store_roundtrip_and_sequences() {
        let store = tiny_store(8);
        let (p1, p2, p3) = (tiny_adapter(1, store.dim()), tiny_adapter(2, store.dim()), tiny_adapter(3, store.dim()));
        for mode in [FuseMode::Concat, FuseMode::Avgpool] {
            let fused = fuse_store(&p1, &p2, &p3, &store, mode).unwrap();
            let seq = fused.video_sequence(0).unwrap();
            assert_eq!(seq.shape(), &[4 * mode.channels(), store.dim()]);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("fused.tssfeat");
            fused.save(&path).unwrap();
            let loaded = FusedStore::load(&path).unwrap();
            assert_eq!(loaded.mode, mode);
            assert_eq!(loaded.videos(), vec![0, 1, 2]);
            let reseq = loaded.video_sequence(0).unwrap();
            // rows survive the f32 round trip
            assert_eq!(reseq.shape(), seq.shape());
            for (a, b) in reseq.data().iter().zip(seq.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_store_interleaves_adapter_streams() {
        let store = tiny_store(9);
        let (p1, p2, p3) = (tiny_adapter(4, store.dim()), tiny_adapter(5, store.dim()), tiny_adapter(6, store.dim()));
        let fused = fuse_store(&p1, &p2, &p3, &store, FuseMode::Concat).unwrap();
        let rows_task = apply_adapter(&p1, "adapter", &store).unwrap();
        let rows_step = apply_adapter(&p2, "adapter", &store).unwrap();
        // first clip of video 0 is store index 0
        let seq = fused.video_sequence(0).unwrap();
        assert_eq!(seq.row(0), rows_task[0].as_slice());
        assert_eq!(seq.row(1), rows_step[0].as_slice());
    }
}
