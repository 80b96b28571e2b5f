//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KWCK" | u16 version | u64 topology hash | u8 scalar width
//! u32 slot count | per slot: u64 length, values | u64 optimizer step
//! ```

use std::path::Path;

use crate::model::ModelGraph;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"KWCK";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("topology mismatch: checkpoint {found:016x}, config {expected:016x}")]
    Topology { expected: u64, found: u64 },
    #[error("checkpoint stores {found}-byte scalars, expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("checkpoint has {found} parameter slots, expected {expected}")]
    SlotCount { expected: usize, found: usize },
    #[error("slot `{name}` has {found} values, expected {expected}")]
    SlotLength {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
}

/// Serializes the graph parameters and the optimizer step.
pub fn to_bytes<T: Scalar>(graph: &ModelGraph<T>, step: u64) -> Vec<u8> {
    let params = graph.params();
    let mut out = Vec::with_capacity(32 + graph.param_count() * T::BYTES + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&graph.manifest().topology_hash().to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for &v in p {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(&step.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads parameters into `graph`, which must have the same topology.
/// Returns the stored optimizer step. `graph` is untouched on error.
pub fn from_bytes<T: Scalar>(graph: &mut ModelGraph<T>, bytes: &[u8]) -> Result<u64, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let found = r.u64()?;
    let expected = graph.manifest().topology_hash();
    if found != expected {
        return Err(CheckpointError::Topology { expected, found });
    }
    let width = r.take(1)?[0] as usize;
    if width != T::BYTES {
        return Err(CheckpointError::Width {
            expected: T::BYTES,
            found: width,
        });
    }
    let slots = graph.slots();
    let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    if count != slots.len() {
        return Err(CheckpointError::SlotCount {
            expected: slots.len(),
            found: count,
        });
    }
    let mut values: Vec<Vec<T>> = Vec::with_capacity(count);
    for s in &slots {
        let len = r.u64()? as usize;
        if len != s.len {
            return Err(CheckpointError::SlotLength {
                name: s.name.clone(),
                expected: s.len,
                found: len,
            });
        }
        let raw = r.take(len.checked_mul(T::BYTES).ok_or(CheckpointError::Truncated)?)?;
        values.push(raw.chunks_exact(T::BYTES).map(T::read_le).collect());
    }
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    for (dst, src) in graph.params_mut().into_iter().zip(values) {
        dst.copy_from_slice(&src);
    }
    Ok(step)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, graph: &ModelGraph<T>, step: u64) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(graph, step))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, graph: &mut ModelGraph<T>) -> Result<u64, CheckpointError> {
    let bytes = std::fs::read(path)?;
    from_bytes(graph, &bytes)
}
