//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "GRUODECK"
//! version u32      1
//! n_meta  u32
//!   repeated: key_len u32, key utf-8, val_len u32, val utf-8
//! n_tens  u32
//!   repeated: name_len u32, name utf-8, rank u32, dims u64 × rank,
//!             data f64 × product(dims)
//! ```
//!
//! Entries are written in insertion order, so identical contents give
//! identical bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::adam::Adam;
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GRUODECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for p in params.iter() {
            self.insert(format!("{prefix}/{}", p.name), (*p.value).clone());
        }
    }

    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", params.get(id).name);
            let t = self.require(&name)?.clone();
            params
                .set_value(id, t)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn insert_adam(&mut self, prefix: &str, adam: &Adam) {
        self.insert(format!("{prefix}/step"), Tensor::scalar(adam.step as f64));
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            self.insert(
                format!("{prefix}/m{i}"),
                Tensor::new(vec![m.len()], m.clone()).expect("1-d"),
            );
            self.insert(
                format!("{prefix}/v{i}"),
                Tensor::new(vec![v.len()], v.clone()).expect("1-d"),
            );
        }
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam) -> Result<()> {
        adam.step = self.require(&format!("{prefix}/step"))?.item() as u64;
        for i in 0..adam.m.len() {
            for (key, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = self.require(&format!("{prefix}/{key}{i}"))?;
                if t.numel() != buf.len() {
                    return Err(Error::Checkpoint(format!(
                        "`{prefix}/{key}{i}` has {} values, expected {}",
                        t.numel(),
                        buf.len()
                    )));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("malformed container: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r).map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        let n_meta = read_u32(r).map_err(|_| bad("meta count"))?;
        for _ in 0..n_meta {
            let k = read_str(r).map_err(|_| bad("meta key"))?;
            let v = read_str(r).map_err(|_| bad("meta value"))?;
            ck.meta.push((k, v));
        }
        let n = read_u32(r).map_err(|_| bad("tensor count"))?;
        for _ in 0..n {
            let name = read_str(r).map_err(|_| bad("tensor name"))?;
            let rank = read_u32(r).map_err(|_| bad("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("dims"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b).map_err(|_| bad("data"))?;
                data.push(f64::from_le_bytes(b));
            }
            ck.tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
