//! Per-epoch parameter snapshots.
//!
//! On-disk layout, all little-endian:
//!
//! ```text
//! "LLAB" | version u16 | N u64 | epoch u32 | seed u64 | N x f64 params
//!        | momentum flag u8 | (N x f64 momentum, if flag == 1)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ParamVector;

pub const MAGIC: &[u8; 4] = b"LLAB";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub seed: u64,
    pub params: ParamVector,
    pub momentum: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut out = Vec::with_capacity(4 + 2 + 8 + 4 + 8 + 8 * n + 1 + self.momentum.as_ref().map_or(0, |m| 8 * m.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for x in self.params.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        match &self.momentum {
            Some(m) => {
                out.push(1);
                for x in m {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing LLAB magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(r.array()?) as usize;
        let epoch = u32::from_le_bytes(r.array()?) as usize;
        let seed = u64::from_le_bytes(r.array()?);
        let params = r.reals(n)?;
        let momentum = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.reals(n)?),
            f => return Err(bad(&format!("bad momentum flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { epoch, seed, params: params.into(), momentum })
    }
}

fn bad(detail: &str) -> Error {
    Error::Format { what: "checkpoint", detail: detail.to_string() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| bad("truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Snapshots keyed by epoch, optionally mirrored to a directory.
#[derive(Clone, Debug, Default)]
pub struct CheckpointStore {
    root: Option<PathBuf>,
    snapshots: BTreeMap<usize, Checkpoint>,
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        CheckpointStore::default()
    }

    /// Store mirrored to `root`; existing checkpoint files there are loaded.
    pub fn on_disk(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::path(&root, e))?;
        let mut snapshots = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(|e| Error::path(&root, e))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "llab") {
                let c = Checkpoint::from_bytes(&fs::read(&path).map_err(|e| Error::path(&path, e))?)?;
                snapshots.insert(c.epoch, c);
            }
        }
        Ok(CheckpointStore { root: Some(root), snapshots })
    }

    /// In-memory copy of the snapshots, for read-only use by concurrent runs.
    pub fn detached(&self) -> Self {
        CheckpointStore { root: None, snapshots: self.snapshots.clone() }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn file_for(root: &Path, epoch: usize) -> PathBuf {
        root.join(format!("epoch_{epoch:04}.llab"))
    }

    pub fn insert(&mut self, c: Checkpoint) -> Result<()> {
        if let Some(root) = &self.root {
            let path = Self::file_for(root, c.epoch);
            fs::write(&path, c.to_bytes()).map_err(|e| Error::path(&path, e))?;
        }
        self.snapshots.insert(c.epoch, c);
        Ok(())
    }

    pub fn get(&self, epoch: usize) -> Result<&Checkpoint> {
        self.snapshots.get(&epoch).ok_or(Error::MissingCheckpoint(epoch))
    }

    pub fn contains(&self, epoch: usize) -> bool {
        self.snapshots.contains_key(&epoch)
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.keys().copied()
    }

    /// Largest `e <= limit` such that every epoch `0..=e` is stored.
    pub fn contiguous_prefix(&self, limit: usize) -> Option<usize> {
        (0..=limit).take_while(|e| self.snapshots.contains_key(e)).last()
    }
}
