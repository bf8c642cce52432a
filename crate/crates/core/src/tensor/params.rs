//! Named, ordered parameter collections and the `DCP1` binary format.
//!
//! Layout: the magic bytes `DCP1`, then for every block in order
//! `name_len: u32 LE`, UTF-8 name, `rank: u32 LE`, `rank` dims as `u32 LE`,
//! and the block's values as little-endian `f32`. There is no block count;
//! a reader consumes blocks until the input is exhausted and rejects any
//! truncated or overlong block.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCP1";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T: Real = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    blocks: IndexMap<String, ParamBlock<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            blocks: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Params {
                name,
                detail: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        if self.blocks.contains_key(&name) {
            return Err(Error::Params {
                name,
                detail: "duplicate block".into(),
            });
        }
        self.blocks.insert(
            name,
            ParamBlock {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock<T>> {
        self.blocks.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamBlock<T>> {
        self.blocks.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamBlock<T>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamBlock<T>)> {
        self.blocks.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.blocks.values().map(|b| b.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        ParamBlock {
                            shape: b.shape.clone(),
                            data: vec![T::zero(); b.data.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        ParamBlock {
                            shape: b.shape.clone(),
                            data: b.data.iter().map(|v| U::of(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Fails unless `other` has the same block names, order and shapes.
    pub fn check_congruent(&self, other: &ParamSet<T>, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Params {
                name: what.to_string(),
                detail: format!("{} blocks vs {} expected", other.len(), self.len()),
            });
        }
        for ((na, a), (nb, b)) in self.blocks.iter().zip(&other.blocks) {
            if na != nb || a.shape != b.shape {
                return Err(Error::Params {
                    name: nb.clone(),
                    detail: format!(
                        "{what}: expected `{na}` with shape {:?}, found shape {:?}",
                        a.shape, b.shape
                    ),
                });
            }
        }
        Ok(())
    }

    /// Copies every block into `self` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) -> Result<()> {
        for (name, b) in other.iter() {
            self.insert(format!("{prefix}{name}"), &b.shape, b.data.clone())?;
        }
        Ok(())
    }

    /// Blocks whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .filter_map(|(k, b)| k.strip_prefix(prefix).map(|s| (s.to_string(), b.clone())))
                .collect(),
        }
    }

    /// Materializes every block as a leaf tensor for one forward pass.
    pub fn leaves(&self, requires_grad: bool) -> Leaves<T> {
        Leaves {
            map: self
                .blocks
                .iter()
                .map(|(k, b)| {
                    let t = if requires_grad {
                        Tensor::param(b.data.clone(), &b.shape)
                    } else {
                        Tensor::new(b.data.clone(), &b.shape)
                    };
                    (k.clone(), t.expect("blocks are shape-validated on insert"))
                })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet<T>) -> Result<f64> {
        self.check_congruent(other, "max_abs_diff")?;
        Ok(self
            .blocks
            .values()
            .zip(other.blocks.values())
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.values().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    pub fn to_dcp_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.num_values() * 4 + self.len() * 32);
        out.extend_from_slice(MAGIC);
        for (name, b) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_dcp_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("missing DCP1 magic".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut set = ParamSet::new();
        while !cur.done() {
            let name_len = cur.u32("name length").map_err(bad)? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "block name").map_err(bad)?)
                .map_err(|_| bad("block name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32("rank").map_err(bad)? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(format!("block `{name}` has unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("dims").map_err(bad)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| bad(format!("block `{name}` has invalid shape {shape:?}")))?;
            let len = n.checked_mul(4).ok_or_else(|| bad("block too large".into()))?;
            let data = cur
                .take(len, "values")
                .map_err(bad)?
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            set.insert(name, &shape, data).map_err(|e| bad(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dcp_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_dcp_bytes(&bytes, path)
    }

    /// SHA-256 of the `DCP1` encoding, hex encoded.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_dcp_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(format!(
                "truncated while reading {what} at byte {} ({left} bytes left, {n} needed)",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Leaf tensors bound to a [`ParamSet`] for one forward/backward pass.
pub struct Leaves<T: Real = f32> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Leaves<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::Params {
            name: name.to_string(),
            detail: "missing from parameter set".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradients collected by `backward`; blocks that received none are zero.
    pub fn grads(&self) -> ParamSet<T> {
        ParamSet {
            blocks: self
                .map
                .iter()
                .map(|(k, t)| {
                    let data = t
                        .grad()
                        .map(|g| g.clone())
                        .unwrap_or_else(|| vec![T::zero(); t.numel()]);
                    (
                        k.clone(),
                        ParamBlock {
                            shape: t.shape().to_vec(),
                            data,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("conv.weight", &[2, 1, 1, 1], vec![0.5, -1.25]).unwrap();
        p.insert("conv.bias", &[2], vec![0.0, 3.0]).unwrap();
        p
    }

    #[test]
    fn exact_byte_layout() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", &[2], vec![1.0, -2.0]).unwrap();
        let bytes = p.to_dcp_bytes();
        let mut want = b"DCP1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(b"b");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().to_dcp_bytes();
        let path = Path::new("mem.dcp");
        for cut in [5, 10, bytes.len() - 1] {
            let err = ParamSet::<f32>::from_dcp_bytes(&bytes[..cut], path).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{err}");
        }
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0]);
        assert!(ParamSet::<f32>::from_dcp_bytes(&extra, path).is_err());
        assert!(ParamSet::<f32>::from_dcp_bytes(b"XXXX", path).is_err());
        assert!(ParamSet::<f32>::from_dcp_bytes(b"DCP1", path).unwrap().is_empty());
    }

    #[test]
    fn congruence_and_prefixes() {
        let p = sample();
        let mut outer = ParamSet::new();
        outer.extend_prefixed("edvf.", &p).unwrap();
        assert_eq!(outer.names().next(), Some("edvf.conv.weight"));
        assert_eq!(outer.strip_prefix("edvf."), p);
        assert!(p.check_congruent(&outer, "x").is_err());
        assert!(p.check_congruent(&p.zeros_like(), "x").is_ok());
        assert!(p.insert_dup_fails());
    }

    impl ParamSet {
        fn insert_dup_fails(&self) -> bool {
            self.clone().insert("conv.bias", &[1], vec![0.0]).is_err()
        }
    }

    #[test]
    fn checksum_tracks_content() {
        let p = sample();
        let mut q = p.clone();
        assert_eq!(p.checksum(), q.checksum());
        q.get_mut("conv.bias").unwrap().data[0] = 1e-7;
        assert_ne!(p.checksum(), q.checksum());
        assert_eq!(p.checksum().len(), 64);
    }

    #[test]
    fn leaves_collect_zero_grads_for_unused_blocks() {
        let p = sample().cast::<f64>();
        let leaves = p.leaves(true);
        let w = leaves.get("conv.weight").unwrap();
        w.square().sum().backward().unwrap();
        let g = leaves.grads();
        assert_eq!(g.get("conv.weight").unwrap().data, vec![1.0, -2.5]);
        assert_eq!(g.get("conv.bias").unwrap().data, vec![0.0, 0.0]);
        assert!(leaves.get("nope").is_err());
    }

    proptest! {
        #[test]
        fn dcp_roundtrip(blocks in prop::collection::vec(
            ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 1..4)), 0..5),
            seed in any::<u32>())
        {
            let mut p = ParamSet::<f32>::new();
            for (i, (name, shape)) in blocks.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| ((seed as usize + i * 31 + j) % 97) as f32 * 0.37 - 10.0).collect();
                p.insert(format!("{i}{name}"), shape, data).unwrap();
            }
            let back = ParamSet::<f32>::from_dcp_bytes(&p.to_dcp_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
