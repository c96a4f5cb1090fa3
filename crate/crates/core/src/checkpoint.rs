//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "INRGANCK" | version u32 | meta_len u64 | meta JSON
//! | count u64 | count × (name_len u32 | name | rank u32 | dims u64… | f32 data)
//! ```
//!
//! Arrays are stored in name order, so identical state gives identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::GeneratorConfig;
use crate::inr::InrArchitecture;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"INRGANCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub arch: InrArchitecture,
    pub generator: GeneratorConfig,
    /// Free-form settings of the producer (trainer, discriminator).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata not serializable: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_len(&mut r)?;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = read_len(&mut r)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("array {name} is truncated")))?;
            let raw = take(&mut r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if arrays.insert(name.clone(), Tensor::new(shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }
        Ok(Checkpoint { meta, arrays })
    }

    /// Write through a temporary sibling file and rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Checkpoint("length overflow".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::ArchConfig;

    fn sample() -> Checkpoint {
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "b".to_string(),
            Tensor::new(vec![2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0e38]),
        );
        arrays.insert("a".to_string(), Tensor::new(vec![], vec![std::f32::consts::PI]));
        Checkpoint {
            meta: CheckpointMeta {
                step: 42,
                seed: 7,
                config_hash: "abc".into(),
                arch: ArchConfig::tiny().build().unwrap(),
                generator: GeneratorConfig::default(),
                extra: serde_json::json!({"note": "x"}),
            },
            arrays,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (k, v) in &ck.arrays {
            let w = &back.arrays[k];
            assert!(v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
