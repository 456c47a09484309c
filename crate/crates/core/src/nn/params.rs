use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A named, shaped block of trainable (or frozen) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameters, addressable by index or layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

const BLOB_MAGIC: &[u8; 4] = b"RSWB";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            data,
            trainable: true,
        });
        ParamId(id)
    }

    /// Conv weight `[cout, cin, k, k]` with zero-mean normal init of the
    /// given gain over fan-in, plus a zero bias `[cout]`.
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut R,
    ) -> (ParamId, ParamId) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        let wid = self.add(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bid = self.add(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        (wid, bid)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Serialize to the binary weight blob: magic, count, then per entry
    /// `name_len:u32, name, ndim:u32, dims:u64*, values:f64*` (little endian).
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite values of existing params from a blob. Every param of `self`
    /// must be present with an identical shape.
    pub fn load_blob(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = parse_blob(bytes)?;
        let mut found: HashMap<String, (Vec<usize>, Vec<f64>)> =
            entries.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        for p in &mut self.params {
            let (shape, data) = found
                .remove(&p.name)
                .ok_or_else(|| Error::data(format!("weight blob lacks layer {}", p.name)))?;
            if shape != p.shape {
                return Err(Error::shape(format!(
                    "layer {} expects shape {:?}, blob has {:?}",
                    p.name, p.shape, shape
                )));
            }
            p.data = data;
        }
        if let Some(extra) = found.keys().next() {
            return Err(Error::data(format!("weight blob has unknown layer {extra}")));
        }
        Ok(())
    }

    pub fn save_blob(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_blob()).map_err(|e| Error::io(path, e))
    }

    pub fn read_blob(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_blob(&bytes)
    }
}

type BlobEntry = (String, Vec<usize>, Vec<f64>);

fn parse_blob(bytes: &[u8]) -> Result<Vec<BlobEntry>> {
    struct Cursor<'a> {
        b: &'a [u8],
        at: usize,
    }
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            if self.at + n > self.b.len() {
                return Err(Error::data("truncated weight blob"));
            }
            let s = &self.b[self.at..self.at + n];
            self.at += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }
    let mut c = Cursor { b: bytes, at: 0 };
    if c.take(4)? != BLOB_MAGIC {
        return Err(Error::data("not a weight blob (bad magic)"));
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::data("weight blob layer name is not utf-8"))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(c.f64()?);
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        ps.add_conv("a", 2, 3, 3, 2.0, &mut rng);
        ps.add("b", vec![4], vec![1.0, -2.0, 0.5, f64::MIN_POSITIVE]);
        let blob = ps.to_blob();
        let mut other = ps.clone();
        for p in other.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_blob(&blob).unwrap();
        assert_eq!(other, ps);
    }

    #[test]
    fn blob_shape_mismatch_is_rejected() {
        let mut ps = ParamSet::new();
        ps.add("x", vec![2], vec![1.0, 2.0]);
        let blob = ps.to_blob();
        let mut other = ParamSet::new();
        other.add("x", vec![1, 2], vec![0.0, 0.0]);
        assert!(matches!(other.load_blob(&blob), Err(Error::ShapeMismatch(_))));
        assert!(other.load_blob(&blob[..10]).is_err());
    }
}
