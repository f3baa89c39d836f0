//! Flat parameter snapshots and the `TESM` snapshot file.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TESM" | version u32 | stage_len u32 | stage bytes | n_groups u32
//! then n_groups × ( name_len u32 | name bytes | count u64 | count × f64 )
//! ```
//!
//! The first group is always `shape`, holding the model dimensions
//! `[raw_dim, dim, classes, hidden_dim, text_dim]` so a snapshot can be
//! turned back into a [`ModelState`] without side information.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelDims, ModelState, ParamGroup};
use crate::ndcore::{Matrix, NdError};
use crate::Scalar;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"TESM";
pub const SNAPSHOT_VERSION: u32 = 1;
const SHAPE_GROUP: &str = "shape";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Nd(#[from] NdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub stage: String,
    pub groups: Vec<(String, Vec<f64>)>,
}

impl ModelSnapshot {
    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn dims(&self) -> Result<ModelDims, SnapshotError> {
        let s =
            self.group(SHAPE_GROUP).ok_or_else(|| SnapshotError::Architecture("snapshot has no shape group".into()))?;
        if s.len() != 5 || s.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(SnapshotError::Architecture(format!("malformed shape group {s:?}")));
        }
        Ok(ModelDims {
            raw_dim: s[0] as usize,
            dim: s[1] as usize,
            classes: s[2] as usize,
            hidden_dim: s[3] as usize,
            text_dim: s[4] as usize,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stage.len() as u32).to_le_bytes());
        out.extend_from_slice(self.stage.as_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, values) in &self.groups {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != SNAPSHOT_MAGIC {
            return Err(SnapshotError::Format { offset: 0, message: format!("bad magic {magic:?}") });
        }
        let version_at = cur.pos;
        let version = cur.u32("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::Format {
                offset: version_at as u64,
                message: format!("unsupported version {version}"),
            });
        }
        let stage = cur.string("stage")?;
        let n_groups = cur.u32("group count")?;
        let mut groups = Vec::with_capacity(n_groups as usize);
        for _ in 0..n_groups {
            let name = cur.string("group name")?;
            let count_at = cur.pos;
            let count = cur.u64("element count")?;
            let needed = count.checked_mul(8).filter(|n| *n <= (bytes.len() - cur.pos) as u64);
            let Some(needed) = needed else {
                return Err(SnapshotError::Format {
                    offset: count_at as u64,
                    message: format!("group {name} declares {count} values but payload is truncated"),
                });
            };
            let raw = cur.take(needed as usize, "group payload")?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            groups.push((name, values));
        }
        if cur.pos != bytes.len() {
            return Err(SnapshotError::Format {
                offset: cur.pos as u64,
                message: "trailing bytes after last group".into(),
            });
        }
        Ok(Self { stage, groups })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SnapshotError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SnapshotError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SnapshotError> {
        if self.bytes.len() - self.pos < n {
            return Err(SnapshotError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, SnapshotError> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| SnapshotError::Format { offset: at as u64, message: format!("{what} is not valid UTF-8") })
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn snapshot(&self, stage: &str) -> ModelSnapshot {
        let d = self.dims();
        let shape = [d.raw_dim, d.dim, d.classes, d.hidden_dim, d.text_dim].iter().map(|&v| v as f64).collect();
        let mut groups = vec![(SHAPE_GROUP.to_string(), shape)];
        for g in ParamGroup::ALL {
            groups.push((g.name().to_string(), self.params(g).iter().map(|v| v.as_f64()).collect()));
        }
        ModelSnapshot { stage: stage.to_string(), groups }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<Self, SnapshotError> {
        let d = snap.dims()?;
        let mut model = Self {
            adapter: super::FeatureAdapter { weights: Matrix::zeros(d.raw_dim, d.dim), bias: vec![T::zero(); d.dim] },
            classifier: super::VisionClassifier::zeros(d.dim, d.classes),
            head: super::ProjectionHead {
                w1: Matrix::zeros(d.dim, d.hidden_dim),
                b1: vec![T::zero(); d.hidden_dim],
                w2: Matrix::zeros(d.hidden_dim, d.text_dim),
                b2: vec![T::zero(); d.text_dim],
            },
            align: super::AlignMap { weights: Matrix::zeros(d.text_dim, d.dim) },
        };
        for g in ParamGroup::ALL {
            let values = snap
                .group(g.name())
                .ok_or_else(|| SnapshotError::Architecture(format!("missing group {}", g.name())))?;
            if values.len() != model.num_params(g) {
                return Err(SnapshotError::Architecture(format!(
                    "group {} has {} values, shape implies {}",
                    g.name(),
                    values.len(),
                    model.num_params(g)
                )));
            }
            let cast: Vec<T> = values.iter().map(|&v| T::of(v)).collect();
            model.set_params(g, &cast)?;
        }
        Ok(model)
    }
}

/// Which parameters [`parameter_distance`] compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceGroup {
    Adapter,
    Classifier,
    Head,
    Align,
    All,
}

impl DistanceGroup {
    fn names(self) -> Vec<&'static str> {
        match self {
            Self::Adapter => vec!["adapter"],
            Self::Classifier => vec!["classifier"],
            Self::Head => vec!["head"],
            Self::Align => vec!["align"],
            Self::All => ParamGroup::ALL.iter().map(|g| g.name()).collect(),
        }
    }
}

impl From<ParamGroup> for DistanceGroup {
    fn from(g: ParamGroup) -> Self {
        match g {
            ParamGroup::Adapter => Self::Adapter,
            ParamGroup::Classifier => Self::Classifier,
            ParamGroup::Head => Self::Head,
            ParamGroup::Align => Self::Align,
        }
    }
}

/// Frobenius norm of `a − b` restricted to `group`.
pub fn parameter_distance(a: &ModelSnapshot, b: &ModelSnapshot, group: DistanceGroup) -> Result<f64, SnapshotError> {
    if a.group(SHAPE_GROUP) != b.group(SHAPE_GROUP) {
        return Err(SnapshotError::Architecture("snapshots have different shapes".into()));
    }
    let mut sum = 0.0;
    for name in group.names() {
        let (Some(x), Some(y)) = (a.group(name), b.group(name)) else {
            return Err(SnapshotError::Architecture(format!("group {name} missing")));
        };
        if x.len() != y.len() {
            return Err(SnapshotError::Architecture(format!("group {name} lengths differ")));
        }
        sum += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(sum.sqrt())
}
