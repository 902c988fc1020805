//! Single-file parameter container.
//!
//! Layout: the magic `VCMP1`, then sections until end of file. Each section
//! is `[u64 name length][name][u64 payload length][payload]` and the payload
//! is `[u64 ndim][u64 dim]*ndim` followed by the values as `f32`. All
//! integers and floats are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 5] = b"VCMP1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("section {name}: {reason}")]
    BadSection { name: String, reason: String },
    #[error("duplicate section {0}")]
    Duplicate(String),
    #[error("missing section {0}")]
    Missing(String),
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[(String, Tensor)] {
        &self.sections
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ContainerError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::Duplicate(name));
        }
        self.sections.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn push_scalar(&mut self, name: &str, value: f32) -> Result<(), ContainerError> {
        self.push(name, Tensor::scalar(value))
    }

    pub fn scalar(&self, name: &str) -> Result<f32, ContainerError> {
        let t = self.require(name)?;
        if !t.is_scalar() {
            return Err(ContainerError::BadSection {
                name: name.into(),
                reason: format!("expected a scalar, got shape {:?}", t.shape()),
            });
        }
        Ok(t.item())
    }

    /// Stores a `u64` exactly as four 16-bit chunks, least significant first.
    pub fn push_u64(&mut self, name: &str, value: u64) -> Result<(), ContainerError> {
        let chunks = (0..4).map(|i| ((value >> (16 * i)) & 0xffff) as f32).collect();
        self.push(name, Tensor::new(vec![4], chunks).expect("four chunks"))
    }

    pub fn u64(&self, name: &str) -> Result<u64, ContainerError> {
        let t = self.require(name)?;
        let bad = |reason: &str| ContainerError::BadSection {
            name: name.into(),
            reason: reason.into(),
        };
        if t.shape() != [4] {
            return Err(bad("expected four 16-bit chunks"));
        }
        let mut value = 0u64;
        for (i, &c) in t.data().iter().enumerate() {
            if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 {
                return Err(bad("chunk out of range"));
            }
            value |= (c as u64) << (16 * i);
        }
        Ok(value)
    }

    /// Adds every tensor of `params` under `prefix/`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) -> Result<(), ContainerError> {
        for (name, t) in params.entries() {
            self.push(format!("{prefix}/{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Reads tensors named like those of `template` under `prefix/`,
    /// checking shapes.
    pub fn params(&self, prefix: &str, template: &ParamSet) -> Result<ParamSet, ContainerError> {
        let mut entries = Vec::with_capacity(template.len());
        for (name, t) in template.entries() {
            let key = format!("{prefix}/{name}");
            let v = self.require(&key)?;
            if v.shape() != t.shape() {
                return Err(ContainerError::BadSection {
                    name: key,
                    reason: format!("shape {:?}, expected {:?}", v.shape(), t.shape()),
                });
            }
            entries.push((name.clone(), v.clone()));
        }
        Ok(ParamSet::new(entries))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.sections {
            out.extend((name.len() as u64).to_le_bytes());
            out.extend(name.as_bytes());
            let payload_len = 8 * (1 + t.shape().len()) + 4 * t.len();
            out.extend((payload_len as u64).to_le_bytes());
            out.extend((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let mut c = Container::new();
        while r.pos < bytes.len() {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| ContainerError::BadSection {
                name: "?".into(),
                reason: "name is not UTF-8".into(),
            })?;
            let payload_len = r.len()?;
            let end = r.pos.checked_add(payload_len).ok_or(ContainerError::Truncated(r.pos))?;
            let bad = |reason: String| ContainerError::BadSection {
                name: name.clone(),
                reason,
            };
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let expected = count.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(8 * (1 + ndim)));
            if expected != Some(payload_len) {
                return Err(bad(format!("payload of {payload_len} bytes does not match shape {shape:?}")));
            }
            let data = r
                .take(4 * count.expect("checked"))?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            debug_assert_eq!(r.pos, end);
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            c.push(name, t)?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize, ContainerError> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("eight bytes"));
        usize::try_from(v).map_err(|_| ContainerError::Truncated(self.pos))
    }
}
