//! Dense float64 tensors, named parameter sets and the checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Allocated iff `requires_grad`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable and allocates a zeroed gradient.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }
}

/// Named tensors iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

const MAGIC: &[u8; 4] = b"A4DP";
const VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Serializes values (not gradients) in the little-endian checkpoint layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`ParamSet::to_bytes`]; loaded tensors are trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(bad("truncated name"));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| bad("name is not utf-8"))?
                .to_string();
            r = &r[name_len..];
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(bad("truncated payload"));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            set.insert(name, Tensor::new(shape, data)?.trainable());
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::BadCheckpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::BadCheckpoint("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(vec![2, 3]).trainable();
        assert_eq!(t.grad.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new(vec![3], vec![1.5, -0.0, f64::MIN_POSITIVE]).unwrap());
        p.insert("a.w", Tensor::new(vec![2, 1, 2], vec![0.1, 0.2, 1e300, -7.25]).unwrap());
        let bytes = p.to_bytes();
        let q = ParamSet::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        let names: Vec<_> = q.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(names, ["a.w", "b"]);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = p.to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ParamSet::from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ParamSet::from_bytes(&extra).is_err());
        assert!(matches!(
            ParamSet::load(Path::new("/nonexistent/ckpt.bin")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
