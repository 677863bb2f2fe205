//! Feature stores, the `.tssfeat` container, and similarity primitives.
//!
//! Binary layout: magic `TSSF`, version u32, record kind u32, dim u32,
//! count u64, then `count * dim` little-endian f32 values. Record ids live
//! in a `<stem>.ids.jsonl` sidecar, one JSON object per record in payload
//! order. Similarity math runs in f64; stored features stay f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TSSF";
const VERSION: u32 = 1;

/// Joint-space feature dimension (video and matching text vectors).
pub const MATCH_DIM: usize = 512;
/// Clustering-space text vector dimension.
pub const CLUSTER_DIM: usize = 768;

/// Semantic level of a text or node space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Task,
    Step,
    StateBefore,
    StateMid,
    StateAfter,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Task,
        Level::Step,
        Level::StateBefore,
        Level::StateMid,
        Level::StateAfter,
    ];

    pub const STATES: [Level; 3] = [Level::StateBefore, Level::StateMid, Level::StateAfter];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Task => "task",
            Level::Step => "step",
            Level::StateBefore => "state_b",
            Level::StateMid => "state_m",
            Level::StateAfter => "state_a",
        }
    }

    pub fn parse(s: &str) -> Result<Level> {
        match s {
            "task" => Ok(Level::Task),
            "step" => Ok(Level::Step),
            "state_b" => Ok(Level::StateBefore),
            "state_m" => Ok(Level::StateMid),
            "state_a" => Ok(Level::StateAfter),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Payload kind tag in the `.tssfeat` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Clip,
    TextMatch,
    TextCluster,
    Centroid,
    Fused,
}

impl FeatureKind {
    fn code(self) -> u32 {
        match self {
            FeatureKind::Clip => 0,
            FeatureKind::TextMatch => 1,
            FeatureKind::TextCluster => 2,
            FeatureKind::Centroid => 3,
            FeatureKind::Fused => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(FeatureKind::Clip),
            1 => Ok(FeatureKind::TextMatch),
            2 => Ok(FeatureKind::TextCluster),
            3 => Ok(FeatureKind::Centroid),
            4 => Ok(FeatureKind::Fused),
            other => Err(Error::Integrity(format!("unknown feature kind {other}"))),
        }
    }
}

pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids.jsonl")
}

/// Write a feature file and its ids sidecar.
pub fn write_features(
    path: &Path,
    kind: FeatureKind,
    dim: usize,
    rows: &[Vec<f64>],
    ids: &[serde_json::Value],
) -> Result<()> {
    if rows.len() != ids.len() {
        return Err(Error::Integrity(format!(
            "{} rows but {} ids",
            rows.len(),
            ids.len()
        )));
    }
    let mut buf = Vec::with_capacity(24 + rows.len() * dim * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.code().to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for row in rows {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "feature row has dim {}, expected {dim}",
                row.len()
            )));
        }
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    let mut sidecar = String::new();
    for id in ids {
        sidecar.push_str(&serde_json::to_string(id).expect("json value serializes"));
        sidecar.push('\n');
    }
    write_atomic(&ids_path(path), sidecar.as_bytes())
}

/// Read a feature file and its ids sidecar. Returns (kind, dim, rows, ids).
#[allow(clippy::type_complexity)]
pub fn read_features(path: &Path) -> Result<(FeatureKind, usize, Vec<Vec<f64>>, Vec<serde_json::Value>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[0..4] != MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad feature-file magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "{}: unsupported feature version {version}",
            path.display()
        )));
    }
    let kind = FeatureKind::from_code(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))?;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: payload is {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    let mut pos = 24;
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64);
            pos += 4;
        }
        rows.push(row);
    }
    let sidecar = ids_path(path);
    let body = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut ids = Vec::with_capacity(count);
    for (i, line) in body.lines().enumerate() {
        ids.push(
            serde_json::from_str(line).map_err(|e| Error::parse(&sidecar, i + 1, e.to_string()))?,
        );
    }
    if ids.len() != count {
        return Err(Error::Integrity(format!(
            "{}: {} ids for {count} records",
            sidecar.display(),
            ids.len()
        )));
    }
    Ok((kind, dim, rows, ids))
}

/// Key of one 9.6 s video segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClipKey {
    pub video: u64,
    pub segment: u64,
}

/// Immutable store of pooled segment features.
#[derive(Debug, Clone)]
pub struct ClipStore {
    dim: usize,
    keys: Vec<ClipKey>,
    rows: Vec<Vec<f64>>,
    index: BTreeMap<ClipKey, usize>,
}

impl ClipStore {
    /// Build from rows already in (video, segment) order or not; entries are
    /// sorted by key and duplicates rejected.
    pub fn from_rows(dim: usize, mut entries: Vec<(ClipKey, Vec<f64>)>) -> Result<Self> {
        entries.sort_by_key(|(k, _)| *k);
        let mut keys = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        let mut index = BTreeMap::new();
        for (key, row) in entries {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "clip {key:?} has dim {}, store dim {dim}",
                    row.len()
                )));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("clip {key:?} has non-finite feature")));
            }
            if index.insert(key, keys.len()).is_some() {
                return Err(Error::Integrity(format!("duplicate clip key {key:?}")));
            }
            keys.push(key);
            rows.push(row);
        }
        Ok(ClipStore { dim, keys, rows, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys in ascending (video, segment) order.
    pub fn keys(&self) -> &[ClipKey] {
        &self.keys
    }

    pub fn feature(&self, key: ClipKey) -> Option<&[f64]> {
        self.index.get(&key).map(|&i| self.rows[i].as_slice())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ids: Vec<serde_json::Value> = self
            .keys
            .iter()
            .map(|k| serde_json::json!({"video": k.video, "segment": k.segment}))
            .collect();
        write_features(path, FeatureKind::Clip, self.dim, &self.rows, &ids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, dim, rows, ids) = read_features(path)?;
        if kind != FeatureKind::Clip {
            return Err(Error::Integrity(format!(
                "{}: expected clip features",
                path.display()
            )));
        }
        let mut entries = Vec::with_capacity(rows.len());
        for (row, id) in rows.into_iter().zip(ids) {
            let key: ClipKey = serde_json::from_value(id)
                .map_err(|e| Error::parse(path, 0, format!("clip id: {e}")))?;
            entries.push((key, row));
        }
        Self::from_rows(dim, entries)
    }

    /// Load a sub-clip file (ids `{"video","segment","subclip"}`, three rows
    /// per segment) and pool each triple into one segment feature.
    pub fn from_subclips(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct SubKey {
            video: u64,
            segment: u64,
            subclip: u64,
        }
        let (kind, dim, rows, ids) = read_features(path)?;
        if kind != FeatureKind::Clip {
            return Err(Error::Integrity(format!(
                "{}: expected clip features",
                path.display()
            )));
        }
        let mut groups: BTreeMap<ClipKey, Vec<Vec<f64>>> = BTreeMap::new();
        for (row, id) in rows.into_iter().zip(ids) {
            let sk: SubKey = serde_json::from_value(id)
                .map_err(|e| Error::parse(path, 0, format!("subclip id: {e}")))?;
            let _ = sk.subclip;
            groups
                .entry(ClipKey { video: sk.video, segment: sk.segment })
                .or_default()
                .push(row);
        }
        let mut entries = Vec::with_capacity(groups.len());
        for (key, group) in groups {
            entries.push((key, pool_subclips(&group)?));
        }
        Self::from_rows(dim, entries)
    }
}

/// One text's embeddings in both spaces.
#[derive(Debug, Clone)]
pub struct TextVectors {
    pub match_vec: Vec<f64>,
    pub cluster_vec: Vec<f64>,
}

/// Immutable store of text embeddings for one level, keyed by text id
/// (task id, step id, or the owning step id for state texts).
#[derive(Debug, Clone)]
pub struct TextStore {
    level: Level,
    entries: BTreeMap<u64, TextVectors>,
}

impl TextStore {
    pub fn new(level: Level, entries: BTreeMap<u64, TextVectors>) -> Result<Self> {
        for (id, v) in &entries {
            if v.match_vec.iter().any(|x| !x.is_finite())
                || v.cluster_vec.iter().any(|x| !x.is_finite())
            {
                return Err(Error::Numeric(format!(
                    "text {id} at level {} has non-finite embedding",
                    level.as_str()
                )));
            }
        }
        Ok(TextStore { level, entries })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Text ids in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, id: u64) -> Option<&TextVectors> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &TextVectors)> {
        self.entries.iter()
    }

    /// Write `<base>.match.tssfeat` and `<base>.cluster.tssfeat`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let ids: Vec<serde_json::Value> = self
            .entries
            .keys()
            .map(|id| serde_json::json!({"level": self.level.as_str(), "id": id}))
            .collect();
        let match_rows: Vec<Vec<f64>> =
            self.entries.values().map(|v| v.match_vec.clone()).collect();
        let cluster_rows: Vec<Vec<f64>> =
            self.entries.values().map(|v| v.cluster_vec.clone()).collect();
        let match_dim = match_rows.first().map_or(MATCH_DIM, Vec::len);
        let cluster_dim = cluster_rows.first().map_or(CLUSTER_DIM, Vec::len);
        write_features(
            &sibling(base, "match.tssfeat"),
            FeatureKind::TextMatch,
            match_dim,
            &match_rows,
            &ids,
        )?;
        write_features(
            &sibling(base, "cluster.tssfeat"),
            FeatureKind::TextCluster,
            cluster_dim,
            &cluster_rows,
            &ids,
        )
    }

    pub fn load(base: &Path, level: Level) -> Result<Self> {
        #[derive(Deserialize)]
        struct TextId {
            level: String,
            id: u64,
        }
        let read = |suffix: &str, want: FeatureKind| -> Result<BTreeMap<u64, Vec<f64>>> {
            let path = sibling(base, suffix);
            let (kind, _dim, rows, ids) = read_features(&path)?;
            if kind != want {
                return Err(Error::Integrity(format!(
                    "{}: wrong feature kind",
                    path.display()
                )));
            }
            let mut map = BTreeMap::new();
            for (row, id) in rows.into_iter().zip(ids) {
                let tid: TextId = serde_json::from_value(id)
                    .map_err(|e| Error::parse(&path, 0, format!("text id: {e}")))?;
                if tid.level != level.as_str() {
                    return Err(Error::Integrity(format!(
                        "{}: record level {} in a {} store",
                        path.display(),
                        tid.level,
                        level.as_str()
                    )));
                }
                if map.insert(tid.id, row).is_some() {
                    return Err(Error::Integrity(format!(
                        "{}: duplicate text id {}",
                        path.display(),
                        tid.id
                    )));
                }
            }
            Ok(map)
        };
        let match_map = read("match.tssfeat", FeatureKind::TextMatch)?;
        let mut cluster_map = read("cluster.tssfeat", FeatureKind::TextCluster)?;
        if match_map.len() != cluster_map.len() {
            return Err(Error::Integrity(format!(
                "{}: match/cluster stores disagree on record count",
                base.display()
            )));
        }
        let mut entries = BTreeMap::new();
        for (id, match_vec) in match_map {
            let cluster_vec = cluster_map.remove(&id).ok_or_else(|| {
                Error::Integrity(format!("text {id} present in match store only"))
            })?;
            entries.insert(id, TextVectors { match_vec, cluster_vec });
        }
        TextStore::new(level, entries)
    }
}

/// `base` is a path prefix like `out/texts.task`; appends `.{suffix}`.
fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    base.with_file_name(name)
}

/// Average-pool sub-clip features (exactly 3 rows) into one segment feature.
pub fn pool_subclips(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rows.len() != 3 {
        return Err(Error::Shape(format!(
            "pool_subclips expects 3 rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("pool_subclips rows differ in dim".into()));
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("pool_subclips input not finite".into()));
    }
    let mut out = vec![0.0; dim];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= 3.0;
    }
    Ok(out)
}

/// Cosine similarity of two equal-length non-zero vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine_sim of zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// L2-normalize in place; errors on the zero vector.
pub fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("cannot normalize zero vector".into()));
    }
    for x in v {
        *x /= norm;
    }
    Ok(())
}
