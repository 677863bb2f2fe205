//! Named-tensor parameter sets and the binary checkpoint container.
//!
//! A checkpoint file holds any number of named tensors as little-endian f32
//! with a shape manifest, magic `TSSC`. Values are computed in f64 but
//! persisted as f32; loading lifts f32 to f64 exactly, so save → load → save
//! reproduces identical bytes, and an adapter carried from one stage to the
//! next through its persisted checkpoint matches that file bitwise.
//!
//! A sidecar `<stem>.meta.json` records stage provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TSSC";
const VERSION: u32 = 1;

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Copy every tensor whose name starts with `prefix` into a new set.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { tensors }
    }

    /// Merge `other` into `self`, overwriting on name collision.
    pub fn extend(&mut self, other: &ParamSet) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Round every value through f32, the persisted precision. Applying this
    /// before comparing against a loaded checkpoint makes equality bitwise.
    pub fn quantized(&self) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let shape = v.shape().to_vec();
                let f32s = v.to_f32();
                (k.clone(), Tensor::from_f32(shape, &f32s).unwrap())
            })
            .collect();
        ParamSet { tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.to_f32() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Integrity(format!(
                "{}: bad checkpoint magic",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity(format!("{}: non-utf8 tensor name", path.display())))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()?);
            }
            tensors.insert(name, Tensor::from_f32(shape, &data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{}: {} trailing bytes after checkpoint payload",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(ParamSet { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Stage provenance stored next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub pathway: String,
    pub stage_index: usize,
    pub stage_level: String,
    pub families: Vec<String>,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer_steps: u64,
}

pub fn meta_path(ckpt_path: &Path) -> PathBuf {
    ckpt_path.with_extension("meta.json")
}

pub fn save_meta(ckpt_path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut body = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Integrity(format!("meta serialization: {e}")))?;
    body.push('\n');
    write_atomic(&meta_path(ckpt_path), body.as_bytes())
}

pub fn load_meta(ckpt_path: &Path) -> Result<CheckpointMeta> {
    let p = meta_path(ckpt_path);
    let body = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&body).map_err(|e| Error::parse(&p, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn random_set(seed: u64) -> ParamSet {
        let mut rng = StreamRng::new(seed);
        let mut p = ParamSet::new();
        p.insert(
            "adapter.down.w",
            Tensor::matrix(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap(),
        );
        p.insert("adapter.down.b", Tensor::vector(vec![rng.normal(); 3]));
        p
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tssckpt");
        let p2 = dir.path().join("b.tssckpt");
        let set = random_set(5);
        set.save(&p1).unwrap();
        let loaded = ParamSet::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_matches_quantized_original() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tssckpt");
        let set = random_set(9);
        set.save(&p).unwrap();
        assert_eq!(ParamSet::load(&p).unwrap(), set.quantized());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tssckpt");
        random_set(1).save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamSet::load(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tssckpt");
        fs::write(&p, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(ParamSet::load(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("stage0.tssckpt");
        let meta = CheckpointMeta {
            format_version: 1,
            pathway: "path2".into(),
            stage_index: 0,
            stage_level: "task".into(),
            families: vec!["taskVNM".into()],
            epochs: 10,
            seed: 7,
            optimizer_steps: 40,
        };
        save_meta(&ckpt, &meta).unwrap();
        assert_eq!(load_meta(&ckpt).unwrap(), meta);
    }

    #[test]
    fn subset_and_extend() {
        let mut a = random_set(2);
        let sub = a.subset("adapter.down");
        assert_eq!(sub.len(), 2);
        let mut b = ParamSet::new();
        b.insert("head.x", Tensor::scalar(1.0));
        a.extend(&b);
        assert!(a.contains("head.x"));
    }
}
