//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    "DSCK"
//! version  u32            (currently 1)
//! groups   u32
//! per group:
//!   name_len u32, name (UTF-8)
//!   frozen   u8           (0 or 1)
//!   tensors  u32
//!   per tensor:
//!     rank u32, extents u64 × rank, data f64 × product(extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupData {
    pub name: String,
    pub frozen: bool,
    pub tensors: Vec<TensorData>,
}

/// Detached snapshot of a model's parameter groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCheckpoint {
    pub groups: Vec<GroupData>,
}

impl ModelCheckpoint {
    pub fn capture(groups: &[ParamGroup]) -> Self {
        let groups = groups
            .iter()
            .map(|g| GroupData {
                name: g.name.clone(),
                frozen: g.frozen,
                tensors: g
                    .tensors
                    .iter()
                    .map(|t| TensorData {
                        shape: t.shape().to_vec(),
                        data: t.to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Self { groups }
    }

    pub fn group(&self, name: &str) -> Option<&GroupData> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Copies stored values into live groups, matching by group name.
    /// Every target group must be present with identical tensor shapes.
    pub fn restore(&self, groups: &[ParamGroup]) -> Result<()> {
        for target in groups {
            let src = self.group(&target.name).ok_or_else(|| {
                TensorError::Contract(format!("checkpoint has no group named {:?}", target.name))
            })?;
            if src.tensors.len() != target.tensors.len() {
                return Err(TensorError::Contract(format!(
                    "group {:?}: checkpoint holds {} tensors, model expects {}",
                    target.name,
                    src.tensors.len(),
                    target.tensors.len()
                )));
            }
            for (s, t) in src.tensors.iter().zip(&target.tensors) {
                if s.shape != t.shape() {
                    return Err(TensorError::Shape {
                        op: "restore",
                        lhs: s.shape.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
                t.set_data(&s.data)?;
            }
        }
        Ok(())
    }

    /// Merges another checkpoint's groups in, replacing same-named groups.
    pub fn merge(&mut self, other: ModelCheckpoint) {
        for g in other.groups {
            match self.groups.iter_mut().find(|x| x.name == g.name) {
                Some(slot) => *slot = g,
                None => self.groups.push(g),
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.push(u8::from(g.frozen));
            out.extend_from_slice(&(g.tensors.len() as u32).to_le_bytes());
            for t in &g.tensors {
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &e in &t.shape {
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail_at(0, "bad magic, expected \"DSCK\""));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail_at(4, &format!("unsupported version {version}")));
        }
        let ngroups = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..ngroups {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.fail_at(at, "group name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(r.fail_at(at, &format!("frozen flag must be 0 or 1, got {b}"))),
            };
            let ntensors = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..ntensors {
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let at = r.pos;
                let numel = shape
                    .iter()
                    .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                    .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                    .ok_or_else(|| r.fail_at(at, &format!("implausible tensor shape {shape:?}")))?;
                let raw = r.take(numel * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                tensors.push(TensorData { shape, data });
            }
            groups.push(GroupData { name, frozen, tensors });
        }
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, "trailing bytes after last group"));
        }
        Ok(Self { groups })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds live groups holding fresh trainable tensors.
    pub fn to_groups(&self) -> Result<Vec<ParamGroup>> {
        self.groups
            .iter()
            .map(|g| {
                let tensors = g
                    .tensors
                    .iter()
                    .map(|t| Tensor::param(t.data.clone(), &t.shape))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ParamGroup::new(g.name.clone(), tensors).frozen(g.frozen))
            })
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, msg: &str) -> TensorError {
        TensorError::Format {
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail_at(self.pos, &format!("truncated: wanted {n} more bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
