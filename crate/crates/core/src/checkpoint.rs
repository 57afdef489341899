//! Versioned archive of named tensors plus a UTF-8 configuration section.
//!
//! Layout (little-endian):
//! `b"FADERCKP"`, `u32` version, `u32`-prefixed kind string, `u64`-prefixed
//! config text, `u32` tensor count, then per tensor a `u32`-prefixed name,
//! `u8` dtype tag, `u32` rank, `u64` dims and the raw element bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Param, RmsProp};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"FADERCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn new<T: Scalar>(name: impl Into<String>, shape: Vec<usize>, values: &[T]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape,
            bytes,
        }
    }

    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} stored as {}, requested {}",
                self.name,
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        Ok(self.bytes.chunks_exact(self.dtype.size()).map(T::read_le).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Archive {
    pub kind: String,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Archive {
    pub fn new(kind: impl Into<String>, config: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            config: config.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[T]) {
        self.tensors.push(NamedTensor::new(name, shape, values));
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    /// Values of `name`, checked against the expected element count.
    pub fn values<T: Scalar>(&self, name: &str, len: usize) -> Result<Vec<T>> {
        let v = self.get(name)?.values::<T>()?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kl = r.u32()? as usize;
        let kind = r.string(kl)?;
        let cl = r.u64()? as usize;
        let config = r.string(cl)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = r.string(nl)?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let bytes = r.take(len * dtype.size())?.to_vec();
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after archive".into()));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

impl Archive {
    pub fn push_params<'a, T: Scalar>(&mut self, params: impl IntoIterator<Item = &'a Param<T>>) {
        for p in params {
            self.push(p.name.clone(), p.shape.clone(), &p.value);
        }
    }

    /// Overwrites each parameter with the stored tensor of the same name.
    pub fn load_params<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        for p in params {
            let t = self.get(&p.name)?;
            if t.shape != p.shape {
                return Err(Error::ConfigMismatch(format!(
                    "{} has shape {:?} in the checkpoint, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.value = t.values()?;
        }
        Ok(())
    }

    pub fn push_optimizer<T: Scalar>(&mut self, prefix: &str, opt: &RmsProp<T>) {
        for (name, v) in &opt.state {
            self.push(format!("{prefix}/{name}"), vec![v.len()], v);
        }
    }

    /// Restores optimizer state saved under `prefix` (hyper-parameters keep
    /// their defaults).
    pub fn load_optimizer<T: Scalar>(&self, prefix: &str) -> Result<RmsProp<T>> {
        let mut opt = RmsProp::default();
        let head = format!("{prefix}/");
        for t in self.tensors.iter().filter(|t| t.name.starts_with(&head)) {
            opt.state.insert(t.name[head.len()..].to_string(), t.values()?);
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let mut a = Archive::new("test", "key = 1\n");
        a.push("w", vec![2, 2], &[1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]);
        a.push("v", vec![3], &[0.1f64, 0.2, 0.3]);
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("v").unwrap().values::<f64>().unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(b.get("w").unwrap().values::<f64>().is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(Archive::from_bytes(b"nonsense").is_err());
        let mut bytes = Archive::new("k", "").to_bytes();
        bytes.push(0);
        assert!(Archive::from_bytes(&bytes).is_err());
        let a = Archive::new("k", "c").to_bytes();
        assert!(Archive::from_bytes(&a[..a.len() - 2]).is_err());
    }
}
