//! Portable binary checkpoints.
//!
//! Layout, all integers unsigned 64-bit little-endian:
//!
//! ```text
//! "PGSU" | version | entry count
//! per entry: name length | name (UTF-8) | rank | dims... | values (f64 LE, row-major)
//! metadata: step count | config hash
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PGSU";
pub const FORMAT_VERSION: u64 = 1;
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub step: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, step: u64, config_hash: u64) -> Self {
        let entries = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { entries, step, config_hash }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Scalar count over entries accepted by `filter`.
    pub fn numel(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.len()).sum()
    }

    /// Copies every store parameter accepted by `filter` from this
    /// checkpoint. Fails, listing all offenders, if any such parameter is
    /// missing or differently shaped.
    pub fn load_into(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            if !filter(&p.name) {
                continue;
            }
            match self.get(&p.name) {
                None => problems.push(format!("{} (missing)", p.name)),
                Some(t) if t.shape() != p.value.shape() => {
                    problems.push(format!("{} (shape {:?} vs {:?})", p.name, t.shape(), p.value.shape()))
                }
                Some(t) => updates.push((id, t.clone())),
            }
        }
        if !problems.is_empty() {
            return Err(TensorError::Checkpoint(format!("mismatched parameters: {}", problems.join(", "))));
        }
        let n = updates.len();
        for (id, t) in updates {
            store.get_mut(id).value = t;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, FORMAT_VERSION);
        put_u64(&mut out, self.entries.len() as u64);
        for (name, t) in &self.entries {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.config_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(corrupt(0, "bad magic bytes"));
        }
        let version = r.u64("format version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(4, &format!("unsupported format version {version}")));
        }
        let count_at = r.pos;
        let count = r.u64("entry count")?;
        if count == 0 {
            return Err(corrupt(count_at, "empty name table"));
        }
        let mut entries = Vec::new();
        for i in 0..count {
            let at = r.pos;
            let len = r.u64("name length")?;
            if len == 0 || len > MAX_NAME_LEN {
                return Err(corrupt(at, &format!("entry {i}: implausible name length {len}")));
            }
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len as usize, "name")?)
                .map_err(|_| corrupt(at, &format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let at = r.pos;
            let rank = r.u64("rank")?;
            if rank > MAX_RANK {
                return Err(corrupt(at, &format!("entry `{name}`: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u64("dimension")? as usize);
            }
            let at = r.pos;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt(at, &format!("entry `{name}`: payload {dims:?} exceeds file")))?;
            let payload = r.take(numel * 8, "payload")?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(corrupt(at, &format!("duplicate entry `{name}`")));
            }
            entries.push((name, Tensor::new(&dims, data)?));
        }
        let step = r.u64("metadata step")?;
        let config_hash = r.u64("metadata config hash")?;
        if r.remaining() != 0 {
            return Err(corrupt(r.pos, "trailing bytes after metadata"));
        }
        Ok(Self { entries, step, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn corrupt(offset: usize, msg: &str) -> TensorError {
    TensorError::Checkpoint(format!("corrupt at byte offset {offset}: {msg}"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(corrupt(
                self.pos,
                &format!("truncated while reading {what} (need {n} bytes, {} left)", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
